//! Fitted Q-evaluation over `F = {wᵀφ : φ ∈ Φ}` and the BCRL ablation
//! configurations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::bcrl::{pullback, Aborted, BatchSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureTable};
use crate::mdp::{OfflineDataset, Policy, Transition};
use crate::net::{ForwardTrace, NetFeatures, TrainableNet};
use crate::oracles::ValueFunction;

/// Representation under the linear head.
#[derive(Debug, Clone, PartialEq)]
pub enum QBody {
    Net(NetFeatures),
    Fixed(FeatureTable),
}

/// `Q(s, a) = wᵀφ(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QModel {
    pub body: QBody,
    pub weights: DVector<f64>,
}

impl QModel {
    /// Network body with a zero linear head.
    pub fn with_net(net: TrainableNet, num_states: usize, num_actions: usize) -> Result<Self> {
        let body = NetFeatures::new(net, num_states, num_actions)?;
        let d = body.dim();
        Ok(Self { body: QBody::Net(body), weights: DVector::zeros(d) })
    }

    pub fn with_features(table: FeatureTable) -> Self {
        let d = table.dim();
        Self { body: QBody::Fixed(table), weights: DVector::zeros(d) }
    }

    fn feature_map(&self) -> &dyn FeatureMap {
        match &self.body {
            QBody::Net(f) => f,
            QBody::Fixed(t) => t,
        }
    }

    pub fn num_states(&self) -> usize {
        self.feature_map().num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.feature_map().num_actions()
    }

    fn body_params(&self) -> &[f64] {
        match &self.body {
            QBody::Net(f) => f.net.params(),
            QBody::Fixed(_) => &[],
        }
    }

    /// Body parameters followed by the head weights.
    pub fn params(&self) -> Vec<f64> {
        self.body_params().iter().chain(self.weights.iter()).copied().collect()
    }

    pub fn num_params(&self) -> usize {
        self.body_params().len() + self.weights.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.num_params()),
                found: format!("{}", params.len()),
            });
        }
        let nb = self.body_params().len();
        if let QBody::Net(f) = &mut self.body {
            f.net.params_mut().copy_from_slice(&params[..nb]);
        }
        self.weights.copy_from_slice(&params[nb..]);
        Ok(())
    }

    fn tabulate(&self) -> (FeatureTable, Option<Vec<ForwardTrace>>) {
        match &self.body {
            QBody::Net(f) => {
                let traces = f.traces();
                let d = f.dim();
                let mut values = Vec::with_capacity(traces.len() * d);
                traces.iter().for_each(|t| values.extend_from_slice(t.output()));
                let table = FeatureTable::from_values(f.num_states, f.num_actions, d, values, f.kind())
                    .unwrap_or_else(|_| f.tabulate());
                (table, Some(traces))
            }
            QBody::Fixed(t) => (t.clone(), None),
        }
    }

    pub fn features(&self) -> FeatureTable {
        self.tabulate().0
    }

    pub fn q_function(&self) -> ValueFunction {
        ValueFunction::linear(&self.features(), &self.weights)
    }
}

/// Batch-mean squared error `(1/B) Σ (Q(s_i, a_i) − y_i)²` and its gradient
/// with respect to [`QModel::params`]. With `freeze_body` the body block of
/// the gradient is zero.
pub fn fqe_regression_loss(
    model: &QModel,
    batch: &[Transition],
    targets: &[f64],
    freeze_body: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", batch.len()),
            found: format!("{}", targets.len()),
        });
    }
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let (table, traces) = model.tabulate();
    let (ns, na) = (table.num_states(), table.num_actions());
    let q = table.matrix() * &model.weights;
    let b = batch.len() as f64;
    // Per-pair upstream `c_p = (2/B) Σ_{i ∈ p} (q_p − y_i)`, summed in pair order.
    let mut upstream: BTreeMap<usize, f64> = BTreeMap::new();
    let mut loss = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        if t.state >= ns || t.action >= na {
            return Err(Error::InvalidDataset(format!("pair ({}, {}) out of range", t.state, t.action)));
        }
        let p = t.state * na + t.action;
        let e = q[p] - y;
        loss += e * e;
        *upstream.entry(p).or_insert(0.0) += 2.0 * e / b;
    }
    loss /= b;
    let d = table.dim();
    let mut grad_w = DVector::zeros(d);
    let mut rows = DMatrix::zeros(table.num_pairs(), d);
    for (&p, &c) in &upstream {
        grad_w.axpy(c, &DVector::from_row_slice(table.row_by_pair(p)), 1.0);
        rows.set_row(p, &(&model.weights * c).transpose());
    }
    let mut grad = match (&model.body, traces) {
        (QBody::Net(f), Some(traces)) if !freeze_body => pullback(&f.net, &traces, &rows),
        _ => vec![0.0; model.body_params().len()],
    };
    grad.extend(grad_w.iter());
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FqeConfig {
    /// Outer iterations `K ≥ 1`.
    pub iterations: usize,
    /// Gradient steps per outer iteration.
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train only the linear head.
    pub freeze_features: bool,
    pub gamma: f64,
}

impl FqeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.iterations == 0 {
            bad.push("iterations must be at least 1");
        }
        if self.inner_steps == 0 {
            bad.push("inner_steps must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            bad.push("gamma must lie in [0, 1)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FqeTraceRow {
    pub iteration: usize,
    pub inner_step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct FqeResult {
    /// `Q_0 = 0, Q_1, …, Q_K` tabulated.
    pub q_iterates: Vec<ValueFunction>,
    /// Last inner-step loss of each outer iteration.
    pub residuals: Vec<f64>,
    pub trace: Vec<FqeTraceRow>,
    pub model: QModel,
}

impl FqeResult {
    pub fn final_q(&self) -> &ValueFunction {
        self.q_iterates.last().expect("Q_0 is always present")
    }

    /// `E_{s ~ p0}[Q_K(s, π_e)]`.
    pub fn value_at(&self, pi_e: &Policy, p0: &[f64]) -> f64 {
        self.final_q().value_at(pi_e, p0)
    }
}

/// Iterated regression onto `r + γ Q̄(s', π_e)`, with `Q̄` the previous
/// iterate frozen. The model is warm-started across iterations and fit
/// by plain gradient descent on epoch-shuffled batches.
pub fn fqe_run(
    model: QModel,
    data: &OfflineDataset,
    pi_e: &Policy,
    config: &FqeConfig,
) -> core::result::Result<FqeResult, Aborted<FqeTraceRow>> {
    let abort = |error: Error, trace: Vec<FqeTraceRow>| Aborted { error, trace };
    if let Err(e) = config.validate() {
        return Err(abort(e, Vec::new()));
    }
    if data.is_empty() {
        return Err(abort(Error::InvalidDataset("empty dataset".into()), Vec::new()));
    }
    if model.num_states() != pi_e.num_states() || model.num_actions() != pi_e.num_actions() {
        return Err(abort(
            Error::ShapeMismatch {
                expected: format!("model over {}x{}", pi_e.num_states(), pi_e.num_actions()),
                found: format!("{}x{}", model.num_states(), model.num_actions()),
            },
            Vec::new(),
        ));
    }
    let mut model = model;
    let (ns, na) = (model.num_states(), model.num_actions());
    let mut schedule = BatchSchedule::new(data.len(), config.batch_size, config.seed);
    let mut q_iterates = vec![ValueFunction::zeros(ns, na)];
    let mut residuals = Vec::with_capacity(config.iterations);
    let mut trace = Vec::new();
    for k in 1..=config.iterations {
        let v_prev = q_iterates[k - 1].v_under(pi_e);
        let mut last = 0.0;
        for step in 1..=config.inner_steps {
            let batch: Vec<Transition> = schedule.next_batch().iter().map(|&i| data.transitions()[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|t| t.reward + config.gamma * v_prev[t.next_state]).collect();
            let (loss, grad) = match fqe_regression_loss(&model, &batch, &targets, config.freeze_features) {
                Ok(r) => r,
                Err(e) => return Err(abort(e, trace)),
            };
            trace.push(FqeTraceRow { iteration: k, inner_step: step, loss });
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(abort(Error::NonFinite { what: "FQE regression".into(), step: trace.len() }, trace));
            }
            let mut params = model.params();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
            if let Err(e) = model.set_params(&params) {
                return Err(abort(e, trace));
            }
            last = loss;
        }
        residuals.push(last);
        q_iterates.push(model.q_function());
    }
    Ok(FqeResult { q_iterates, residuals, trace, model })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// `λ = 0`.
    NoDesign,
    /// BC weight zero, design term only.
    DesignOnly,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoDesign => "no-design",
            Ablation::DesignOnly => "design-only",
        }
    }
}

/// The reference configuration with one term switched off. The seed and
/// every other field are inherited so runs pair up seed by seed.
pub fn ablation_config(reference: &TrainConfig, kind: Ablation) -> Result<TrainConfig> {
    let mut out = reference.clone();
    match kind {
        Ablation::NoDesign => out.design_weight = 0.0,
        Ablation::DesignOnly => {
            if reference.design_weight <= 0.0 || reference.design_kind == crate::bcrl::DesignKind::None {
                return Err(Error::InvalidConfig("design-only ablation needs a positive design weight".into()));
            }
            out.bc_weight = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcrl::DesignKind;
    use crate::lspe::{lspe_run, LspeConfig};
    use crate::mdp::{make_random_tabular_mdp, sample_offline_dataset, StateActionDist};
    use crate::net::Architecture;
    use crate::rng::stream;

    fn config(iterations: usize, inner_steps: usize, gamma: f64) -> FqeConfig {
        FqeConfig { iterations, inner_steps, learning_rate: 1.0, batch_size: 100_000, seed: 1, freeze_features: true, gamma }
    }

    #[test]
    fn frozen_one_hot_fqe_matches_lspe() {
        let mdp = make_random_tabular_mdp(1, 4, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::random(1, 4, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 2000, 1).unwrap();
        let phi = FeatureTable::one_hot(4, 2).unwrap();
        let fqe = fqe_run(QModel::with_features(phi.clone()), &data, &pi, &config(30, 400, 0.9)).unwrap();
        let lspe = lspe_run(&phi, &data, &pi, LspeConfig { iterations: 30, radius: 1e6, gamma: 0.9 }).unwrap();
        let a = fqe.value_at(&pi, mdp.initial_dist());
        let b = lspe.final_value_at(&phi, &pi, mdp.initial_dist());
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn myopic_fqe_regresses_reward() {
        let mdp = make_random_tabular_mdp(2, 3, 2, 0.9, true).unwrap().with_gamma(0.0).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let pi = Policy::uniform(3, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 600, 2).unwrap();
        let fqe = fqe_run(QModel::with_features(FeatureTable::one_hot(3, 2).unwrap()), &data, &pi, &config(1, 300, 0.0)).unwrap();
        for (q, r) in fqe.final_q().values().iter().zip(mdp.rewards()) {
            assert!((q - r).abs() < 1e-6);
        }
    }

    #[test]
    fn net_fqe_is_deterministic_and_frozen_body_is_untouched() {
        let mdp = make_random_tabular_mdp(3, 4, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::uniform(4, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 300, 3).unwrap();
        let net = TrainableNet::new(Architecture::feature_net(4, 2, vec![8], 3).unwrap(), 3, stream::NET_INIT);
        let model = QModel::with_net(net.clone(), 4, 2).unwrap();
        let cfg = FqeConfig { iterations: 3, inner_steps: 10, learning_rate: 0.1, batch_size: 64, seed: 3, freeze_features: false, gamma: 0.9 };
        let a = fqe_run(model.clone(), &data, &pi, &cfg).unwrap();
        let b = fqe_run(model.clone(), &data, &pi, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model.params(), b.model.params());
        let frozen = fqe_run(model, &data, &pi, &FqeConfig { freeze_features: true, ..cfg }).unwrap();
        match frozen.model.body {
            QBody::Net(f) => assert_eq!(f.net.params(), net.params()),
            QBody::Fixed(_) => unreachable!(),
        }
    }

    #[test]
    fn ablations_override_one_field() {
        let reference = TrainConfig::reference(7, 10.0);
        let no_design = ablation_config(&reference, Ablation::NoDesign).unwrap();
        assert_eq!(no_design, TrainConfig { design_weight: 0.0, ..reference.clone() });
        let design_only = ablation_config(&reference, Ablation::DesignOnly).unwrap();
        assert_eq!(design_only, TrainConfig { bc_weight: 0.0, ..reference.clone() });
        assert!(design_only.design_weight > 0.0);
        assert_eq!(no_design.seed, design_only.seed);
        let none = TrainConfig { design_kind: DesignKind::None, ..reference };
        assert!(ablation_config(&none, Ablation::DesignOnly).is_err());
    }
}
