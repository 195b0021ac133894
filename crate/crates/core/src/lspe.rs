//! Least-squares policy evaluation: iterated ball-constrained regression of
//! `θᵀφ(s, a)` onto bootstrapped targets `r + γ V̂_{k−1}(s')`, with
//! `V̂_{k−1}(s) = Σ_a π_e(a | s) θ_{k−1}ᵀφ(s, a)` computed exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::{expected_next_feature, weighted_gram, FeatureMap, FeatureTable};
use crate::linalg::BallLeastSquares;
use crate::mdp::{FiniteMdp, OfflineDataset, Policy, StateActionDist};
use crate::oracles::{bellman_error, ValueFunction};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LspeConfig {
    /// Number of regressions `K ≥ 1`.
    pub iterations: usize,
    /// Ball radius `W > 0`.
    pub radius: f64,
    /// Discount; offline datasets do not carry it.
    pub gamma: f64,
}

impl LspeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("LSPE needs at least one iteration".into()));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidRadius(self.radius));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidGamma(self.gamma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LspeResult {
    /// `θ_0 = 0, θ_1, …, θ_K`.
    pub thetas: Vec<DVector<f64>>,
    /// Regression loss of `θ_k` against its own targets, `k = 1..=K`.
    pub residuals: Vec<f64>,
    /// Whether the ball constraint was active at `θ_k`, `k = 1..=K`.
    pub constrained: Vec<bool>,
    /// The design Gram matrix was rank deficient; the pseudoinverse path ran.
    pub rank_deficient: bool,
    /// `‖f_k − T f_k‖` per iterate, `k = 0..=K`, when annotated.
    pub bellman_errors: Option<Vec<f64>>,
    pub config: LspeConfig,
}

impl LspeResult {
    pub fn final_theta(&self) -> &DVector<f64> {
        self.thetas.last().expect("θ_0 is always present")
    }

    /// `f_k(s, a) = θ_kᵀφ(s, a)` on every pair.
    pub fn q_function_at(&self, k: usize, phi: &dyn FeatureMap) -> ValueFunction {
        ValueFunction::linear(&phi.tabulate(), &self.thetas[k])
    }

    pub fn q_function(&self, phi: &dyn FeatureMap) -> ValueFunction {
        self.q_function_at(self.thetas.len() - 1, phi)
    }

    /// `E_{s ~ p0}[f_K(s, π_e)]`.
    pub fn final_value_at(&self, phi: &dyn FeatureMap, pi_e: &Policy, p0: &[f64]) -> f64 {
        self.q_function(phi).value_at(pi_e, p0)
    }
}

/// Sufficient statistics of the regressions: the design Gram `G`, the
/// reward moment `c_r = E[r φ]` and the cross moment `C = E[φ (γ φ(s', π))ᵀ]`,
/// so that iteration `k` solves the ball problem with `b = c_r + C θ_{k−1}`.
struct Moments {
    gram: DMatrix<f64>,
    reward: DVector<f64>,
    cross: DMatrix<f64>,
}

fn check_config_and_features(config: &LspeConfig, phi: &FeatureTable, pi_e: &Policy) -> Result<()> {
    config.validate()?;
    if phi.num_states() != pi_e.num_states() || phi.num_actions() != pi_e.num_actions() {
        return Err(Error::ShapeMismatch {
            expected: format!("features over {}x{}", pi_e.num_states(), pi_e.num_actions()),
            found: format!("{}x{}", phi.num_states(), phi.num_actions()),
        });
    }
    Ok(())
}

fn run(moments: Moments, config: LspeConfig, loss: impl Fn(&DVector<f64>, &DVector<f64>) -> f64) -> Result<LspeResult> {
    let solver = BallLeastSquares::new(&moments.gram);
    if solver.spectrum().rank() == 0 {
        return Err(Error::DegenerateDesign);
    }
    let d = moments.gram.nrows();
    let mut thetas = Vec::with_capacity(config.iterations + 1);
    let mut residuals = Vec::with_capacity(config.iterations);
    let mut constrained = Vec::with_capacity(config.iterations);
    thetas.push(DVector::zeros(d));
    for k in 1..=config.iterations {
        let prev = &thetas[k - 1];
        let b = &moments.reward + &moments.cross * prev;
        let sol = solver.solve(&b, config.radius);
        residuals.push(loss(prev, &sol.theta));
        constrained.push(sol.constrained);
        thetas.push(sol.theta);
    }
    Ok(LspeResult {
        thetas,
        residuals,
        constrained,
        rank_deficient: solver.rank_deficient(),
        bellman_errors: None,
        config,
    })
}

/// Empirical regression loss `(1/N) Σ (θᵀφ_i − r_i − γ θ_prevᵀφ(s'_i, π_e))²`.
pub fn regression_loss(
    phi: &FeatureTable,
    data: &OfflineDataset,
    pi_e: &Policy,
    gamma: f64,
    theta_prev: &DVector<f64>,
    theta: &DVector<f64>,
) -> f64 {
    let q_prev = phi.matrix() * theta_prev;
    let q = phi.matrix() * theta;
    let na = phi.num_actions();
    let v_prev: Vec<f64> = (0..phi.num_states())
        .map(|s| (0..na).map(|a| pi_e.prob(s, a) * q_prev[s * na + a]).sum())
        .collect();
    let mut acc = 0.0;
    for t in data.transitions() {
        let e = q[t.state * na + t.action] - t.reward - gamma * v_prev[t.next_state];
        acc += e * e;
    }
    acc / data.len() as f64
}

/// LSPE on an offline dataset.
pub fn lspe_run(
    phi: &dyn FeatureMap,
    data: &OfflineDataset,
    pi_e: &Policy,
    config: LspeConfig,
) -> Result<LspeResult> {
    let table = phi.tabulate();
    check_config_and_features(&config, &table, pi_e)?;
    if data.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    let d = table.dim();
    let (ns, na) = (table.num_states(), table.num_actions());
    let next = table.policy_average_matrix(pi_e);
    let mut gram = DMatrix::zeros(d, d);
    let mut reward = DVector::zeros(d);
    let mut cross = DMatrix::zeros(d, d);
    // Accumulate per pair and per (pair, next state) first, in a fixed
    // order, then form the moments.
    let mut pair_count = vec![0.0; ns * na];
    let mut pair_reward = vec![0.0; ns * na];
    let mut pair_next = vec![0.0; ns * na * ns];
    for t in data.transitions() {
        if t.state >= ns || t.action >= na || t.next_state >= ns {
            return Err(Error::InvalidDataset(format!(
                "transition ({}, {}, {}) outside {ns}x{na}",
                t.state, t.action, t.next_state
            )));
        }
        let p = t.state * na + t.action;
        pair_count[p] += 1.0;
        pair_reward[p] += t.reward;
        pair_next[p * ns + t.next_state] += 1.0;
    }
    let n = data.len() as f64;
    for p in 0..ns * na {
        if pair_count[p] == 0.0 {
            continue;
        }
        let row = DVector::from_row_slice(table.row_by_pair(p));
        gram.ger(pair_count[p] / n, &row, &row, 1.0);
        reward.axpy(pair_reward[p] / n, &row, 1.0);
        let mut next_mean = DVector::zeros(d);
        for sn in 0..ns {
            let c = pair_next[p * ns + sn];
            if c != 0.0 {
                next_mean.axpy(c, &next.row(sn).transpose(), 1.0);
            }
        }
        cross.ger(config.gamma / n, &row, &next_mean, 1.0);
    }
    let moments = Moments { gram, reward, cross };
    run(moments, config, |prev, theta| regression_loss(&table, data, pi_e, config.gamma, prev, theta))
}

/// LSPE with exact expectations under `ν` and the true transition kernel.
///
/// `config.gamma` is ignored in favour of the MDP's discount.
pub fn lspe_run_population(
    phi: &dyn FeatureMap,
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    pi_e: &Policy,
    config: LspeConfig,
) -> Result<LspeResult> {
    let config = LspeConfig { gamma: mdp.gamma(), ..config };
    let table = phi.tabulate();
    check_config_and_features(&config, &table, pi_e)?;
    nu.check_mdp(mdp)?;
    table.check_shape(mdp.num_states(), mdp.num_actions())?;
    let next = expected_next_feature(mdp, &table, pi_e)?;
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(nu.weights()));
    let phi_m = table.matrix();
    let weighted = phi_m.tr_mul(&w);
    let gram = weighted_gram(&table, nu.weights());
    let reward = &weighted * DVector::from_column_slice(mdp.rewards());
    let cross = &weighted * &next;
    let rewards = DVector::from_column_slice(mdp.rewards());
    let weights = nu.weights().to_vec();
    run(Moments { gram, reward, cross }, config, |prev, theta| {
        let err = &phi_m * theta - (&rewards + &next * prev);
        err.iter().zip(&weights).map(|(e, w)| w * e * e).sum()
    })
}

/// `E_{s ~ p0}[f_K(s, π_e)]`.
pub fn evaluate_at(result: &LspeResult, phi: &dyn FeatureMap, pi_e: &Policy, p0: &[f64]) -> Result<f64> {
    if p0.len() != phi.num_states() {
        return Err(Error::ShapeMismatch {
            expected: format!("state distribution of length {}", phi.num_states()),
            found: format!("{}", p0.len()),
        });
    }
    let sum: f64 = p0.iter().sum();
    if p0.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized { what: "initial distribution".into(), sum });
    }
    Ok(result.final_value_at(phi, pi_e, p0))
}

/// Fills [`LspeResult::bellman_errors`] with `‖f_k − T^{π_e} f_k‖_dist`.
pub fn annotate_bellman_errors(
    result: &mut LspeResult,
    phi: &dyn FeatureMap,
    mdp: &FiniteMdp,
    pi_e: &Policy,
    dist: &StateActionDist,
) -> Result<()> {
    let table = phi.tabulate();
    let errors = result
        .thetas
        .iter()
        .map(|theta| bellman_error(mdp, pi_e, &ValueFunction::linear(&table, theta), dist))
        .collect::<Result<Vec<f64>>>()?;
    result.bellman_errors = Some(errors);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::mdp::{make_random_tabular_mdp, sample_offline_dataset};
    use crate::oracles::exact_value;
    use rand::Rng;

    fn config(iterations: usize, radius: f64, gamma: f64) -> LspeConfig {
        LspeConfig { iterations, radius, gamma }
    }

    #[test]
    fn myopic_reduces_to_reward_regression() {
        let mdp = make_random_tabular_mdp(1, 4, 2, 0.9, true).unwrap().with_gamma(0.0).unwrap();
        let phi = FeatureTable::one_hot(4, 2).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::random(1, 4, 2).unwrap();
        let res = lspe_run_population(&phi, &mdp, &nu, &pi, config(1, 10.0, 0.0)).unwrap();
        for (t, r) in res.thetas[1].iter().zip(mdp.rewards()) {
            assert!((t - r).abs() < 1e-12);
        }
        let v = evaluate_at(&res, &phi, &pi, mdp.initial_dist()).unwrap();
        let truth = exact_value(&mdp, &pi).unwrap().value_at(&pi, mdp.initial_dist());
        assert!((v - truth).abs() < 1e-12);
    }

    #[test]
    fn population_one_hot_converges_within_horizon_bound() {
        let mdp = make_random_tabular_mdp(2, 6, 2, 0.9, true).unwrap();
        let phi = FeatureTable::one_hot(6, 2).unwrap();
        let nu = StateActionDist::uniform(6, 2).unwrap();
        let pi = Policy::random(2, 6, 2).unwrap();
        let truth = exact_value(&mdp, &pi).unwrap().value_at(&pi, mdp.initial_dist());
        let w = libm::sqrt(12.0) / (1.0 - 0.9);
        for k in [1, 5, 10, 20, 50] {
            let res = lspe_run_population(&phi, &mdp, &nu, &pi, config(k, w, 0.9)).unwrap();
            let v = evaluate_at(&res, &phi, &pi, mdp.initial_dist()).unwrap();
            assert!((v - truth).abs() <= libm::pow(0.9, k as f64 / 2.0) / 0.1);
            assert!(res.thetas.iter().all(|t| t.norm() <= w + 1e-9));
        }
    }

    #[test]
    fn tiny_radius_keeps_every_iterate_on_the_boundary() {
        let mdp = make_random_tabular_mdp(3, 5, 2, 0.9, true).unwrap();
        let phi = FeatureTable::random_fixed(3, 5, 2, 3).unwrap();
        let nu = StateActionDist::uniform(5, 2).unwrap();
        let pi = Policy::uniform(5, 2).unwrap();
        let res = lspe_run_population(&phi, &mdp, &nu, &pi, config(20, 0.01, 0.9)).unwrap();
        for (t, &c) in res.thetas[1..].iter().zip(&res.constrained) {
            assert!(c);
            assert!((t.norm() - 0.01).abs() <= 1e-9);
        }
    }

    #[test]
    fn rank_deficient_design_runs() {
        let mdp = make_random_tabular_mdp(4, 3, 2, 0.9, true).unwrap();
        let values = [0.6, 0.0, 0.0].repeat(6);
        let phi = FeatureTable::from_values(3, 2, 3, values, FeatureKind::RandomFixed).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let pi = Policy::uniform(3, 2).unwrap();
        let res = lspe_run_population(&phi, &mdp, &nu, &pi, config(10, 100.0, 0.9)).unwrap();
        assert!(res.rank_deficient);
        assert!(res.thetas.iter().all(|t| t.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn zero_features_are_a_degenerate_design() {
        let mdp = make_random_tabular_mdp(4, 3, 2, 0.9, true).unwrap();
        let phi = FeatureTable::from_values(3, 2, 2, vec![0.0; 12], FeatureKind::RandomFixed).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let pi = Policy::uniform(3, 2).unwrap();
        let err = lspe_run_population(&phi, &mdp, &nu, &pi, config(3, 1.0, 0.9)).unwrap_err();
        assert_eq!(err, Error::DegenerateDesign);
        let bad = lspe_run_population(&phi, &mdp, &nu, &pi, config(3, 0.0, 0.9)).unwrap_err();
        assert_eq!(bad, Error::InvalidRadius(0.0));
    }

    #[test]
    fn sample_iterates_beat_random_feasible_probes() {
        let mdp = make_random_tabular_mdp(5, 5, 2, 0.9, true).unwrap();
        let phi = FeatureTable::random_fixed(5, 5, 2, 4).unwrap();
        let nu = StateActionDist::uniform(5, 2).unwrap();
        let pi = Policy::random(5, 5, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 500, 5).unwrap();
        let cfg = config(8, 3.0, 0.9);
        let res = lspe_run(&phi, &data, &pi, cfg).unwrap();
        let mut r = crate::rng::seeded(99);
        for k in 1..=8 {
            let best = regression_loss(&phi, &data, &pi, 0.9, &res.thetas[k - 1], &res.thetas[k]);
            assert!((best - res.residuals[k - 1]).abs() <= 1e-12);
            for _ in 0..50 {
                let mut probe = DVector::from_fn(4, |_, _| 2.0 * r.random::<f64>() - 1.0);
                let scale = 3.0 * r.random::<f64>() / probe.norm();
                probe *= scale;
                let other = regression_loss(&phi, &data, &pi, 0.9, &res.thetas[k - 1], &probe);
                assert!(best <= other + 1e-9);
            }
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let mdp = make_random_tabular_mdp(6, 4, 3, 0.9, true).unwrap();
        let phi = FeatureTable::random_fixed(6, 4, 3, 5).unwrap();
        let nu = StateActionDist::uniform(4, 3).unwrap();
        let pi = Policy::uniform(4, 3).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 300, 6).unwrap();
        let a = lspe_run(&phi, &data, &pi, config(10, 5.0, 0.9)).unwrap();
        let b = lspe_run(&phi, &data, &pi, config(10, 5.0, 0.9)).unwrap();
        for (x, y) in a.thetas.iter().zip(&b.thetas) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn annotated_bellman_errors_decay_with_one_hot() {
        let mdp = make_random_tabular_mdp(7, 4, 2, 0.9, true).unwrap();
        let phi = FeatureTable::one_hot(4, 2).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::uniform(4, 2).unwrap();
        let mut res = lspe_run_population(&phi, &mdp, &nu, &pi, config(30, 100.0, 0.9)).unwrap();
        annotate_bellman_errors(&mut res, &phi, &mdp, &pi, &nu).unwrap();
        let errors = res.bellman_errors.unwrap();
        assert_eq!(errors.len(), 31);
        for (k, e) in errors.iter().enumerate() {
            assert!(*e <= libm::pow(0.9, k as f64 / 2.0) + 1e-12);
        }
    }
}
