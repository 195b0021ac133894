//! Bellman-complete representation learning.
//!
//! For a representation `φ` the witness `(ρ, M)` regresses reward and
//! discounted next feature onto the current feature:
//!
//! ```text
//! J(φ; ρ, M) = E ‖M φ(s, a) − γ φ̄(s', π_e)‖² + (ρᵀφ(s, a) − r)²
//! ```
//!
//! where `φ̄` is a detached target copy of `φ`. With single next-state
//! samples the first term is biased upward by the conditional variance of
//! `γ φ̄(s', π_e)`; the stochastic regime subtracts
//! `E ‖g(s, a) − γ φ̄(s', π_e)‖²` for a regressor `g` fit to that target.
//!
//! Gradients are written by hand against tabulated feature values and then
//! pulled back through the network with [`NetFeatures`] traces.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::features::{expected_next_feature, pair_frequencies, weighted_gram, FeatureMap, FeatureTable};
use crate::linalg::{logdet_psd, project_spectral, spectral_norm, SymmetricSpectrum};
use crate::mdp::{FiniteMdp, OfflineDataset, Policy, StateActionDist, Transition};
use crate::net::{encode_pair, Architecture, ForwardTrace, Head, NetFeatures, TrainableNet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, stream};

/// Ridge added before taking the log-determinant of a batch covariance.
pub const LOGDET_RIDGE: f64 = 1e-6;

/// Default spectral-norm bound on `M`.
pub const DEFAULT_M_BOUND: f64 = 0.99;

/// Feasible set `Θ` for the witness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaBounds {
    pub rho_bound: f64,
    pub m_spectral_bound: f64,
    /// When false the witness is left unprojected.
    pub enforce: bool,
}

impl ThetaBounds {
    pub fn new(rho_bound: f64) -> Self {
        Self { rho_bound, m_spectral_bound: DEFAULT_M_BOUND, enforce: true }
    }

    pub fn unconstrained() -> Self {
        Self { rho_bound: f64::INFINITY, m_spectral_bound: f64::INFINITY, enforce: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enforce {
            if !(self.rho_bound > 0.0) {
                return Err(Error::InvalidRadius(self.rho_bound));
            }
            if !(self.m_spectral_bound > 0.0 && self.m_spectral_bound < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "spectral bound {} outside (0, 1)",
                    self.m_spectral_bound
                )));
            }
        }
        Ok(())
    }
}

/// `(ρ, M)` certifying `r ≈ ρᵀφ` and `γ E φ(s', π_e) ≈ M φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub rho: DVector<f64>,
    pub m: DMatrix<f64>,
    pub bounds: ThetaBounds,
}

impl Witness {
    pub fn zeros(dim: usize, bounds: ThetaBounds) -> Self {
        Self { rho: DVector::zeros(dim), m: DMatrix::zeros(dim, dim), bounds }
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    /// Projects onto `Θ`: singular values of `M` are clamped and `ρ` is
    /// rescaled onto its ball. Returns whether anything changed.
    pub fn project(&mut self) -> bool {
        if !self.bounds.enforce {
            return false;
        }
        let mut changed = false;
        let norm = self.rho.norm();
        if norm > self.bounds.rho_bound {
            self.rho *= self.bounds.rho_bound / norm;
            changed = true;
        }
        let projected = project_spectral(&self.m, self.bounds.m_spectral_bound);
        if projected != self.m {
            self.m = projected;
            changed = true;
        }
        changed
    }

    pub fn is_feasible(&self) -> bool {
        !self.bounds.enforce
            || (self.rho.norm() <= self.bounds.rho_bound + 1e-9
                && spectral_norm(&self.m) <= self.bounds.m_spectral_bound + 1e-9)
    }

    /// `‖ρ‖ / (1 − ‖M‖₂)`, the norm bound on the linear value solution
    /// implied by the witness; infinite when `‖M‖₂ ≥ 1`.
    pub fn implied_radius(&self) -> f64 {
        let m = spectral_norm(&self.m);
        if m >= 1.0 {
            f64::INFINITY
        } else {
            self.rho.norm() / (1.0 - m)
        }
    }
}

/// Where the closed-form witness fit takes its moments from.
#[derive(Debug, Clone, Copy)]
pub enum WitnessSource<'a> {
    /// Exact expectations under `ν` and the true kernel.
    Exact { mdp: &'a FiniteMdp, nu: &'a StateActionDist },
    /// Empirical moments of a dataset.
    Dataset { data: &'a OfflineDataset, gamma: f64 },
}

#[derive(Debug, Clone)]
pub struct WitnessFit {
    pub witness: Witness,
    /// The design Gram matrix was rank deficient; minimum-norm solutions
    /// were used.
    pub rank_deficient: bool,
    /// The unconstrained solution was outside `Θ`.
    pub projected: bool,
}

/// Closed-form witness: `ρ = G⁺ E[φ r]`, `M = (G⁺ E[φ yᵀ])ᵀ` with
/// `y = γ target(s', π_e)`, followed by projection onto `Θ`.
///
/// `target` defaults to `phi`.
pub fn fit_witness(
    phi: &dyn FeatureMap,
    source: WitnessSource<'_>,
    pi_e: &Policy,
    target: Option<&dyn FeatureMap>,
    bounds: ThetaBounds,
) -> Result<WitnessFit> {
    bounds.validate()?;
    let table = phi.tabulate();
    let target_table = match target {
        Some(t) => t.tabulate(),
        None => table.clone(),
    };
    check_pair(&table, &target_table, pi_e)?;
    let d = table.dim();
    let (gram, reward, cross) = match source {
        WitnessSource::Exact { mdp, nu } => {
            nu.check_mdp(mdp)?;
            let next = expected_next_feature(mdp, &target_table, pi_e)?;
            let weighted = table.matrix().tr_mul(&DMatrix::from_diagonal(&DVector::from_column_slice(nu.weights())));
            let reward = &weighted * DVector::from_column_slice(mdp.rewards());
            (weighted_gram(&table, nu.weights()), reward, &weighted * next)
        }
        WitnessSource::Dataset { data, gamma } => {
            if data.is_empty() {
                return Err(Error::InvalidDataset("empty dataset".into()));
            }
            let agg = Aggregated::new(data.transitions(), table.num_states(), table.num_actions())?;
            sample_moments(&table, &agg, &policy_averaged(&target_table, pi_e), gamma)
        }
    };
    Ok(solve_witness(d, &gram, &reward, &cross, bounds))
}

/// Empirical `G`, `E[φ r]` and `E[φ yᵀ]` with `y = γ φ̄(s', π_e)`.
fn sample_moments(
    table: &FeatureTable,
    agg: &Aggregated,
    next: &[f64],
    gamma: f64,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let d = table.dim();
    let mut gram = DMatrix::zeros(d, d);
    let mut reward = DVector::zeros(d);
    let mut cross = DMatrix::zeros(d, d);
    let n = agg.total;
    for e in &agg.entries {
        let x = table.row_by_pair(e.pair);
        let y = &next[e.next * d..(e.next + 1) * d];
        for i in 0..d {
            let xi = x[i] / n;
            reward[i] += xi * e.reward_sum;
            for j in 0..d {
                gram[(i, j)] += e.count * xi * x[j];
                cross[(i, j)] += gamma * e.count * xi * y[j];
            }
        }
    }
    (gram, reward, cross)
}

fn solve_witness(
    d: usize,
    gram: &DMatrix<f64>,
    reward: &DVector<f64>,
    cross: &DMatrix<f64>,
    bounds: ThetaBounds,
) -> WitnessFit {
    let spectrum = SymmetricSpectrum::new(gram);
    let rank_deficient = spectrum.rank() < d;
    let rho = spectrum.pinv_solve(reward);
    let m = spectrum.pinv_solve_matrix(cross).transpose();
    let mut witness = Witness { rho, m, bounds };
    let projected = witness.project();
    WitnessFit { witness, rank_deficient, projected }
}

fn check_pair(phi: &FeatureTable, target: &FeatureTable, pi_e: &Policy) -> Result<()> {
    if phi.num_states() != target.num_states()
        || phi.num_actions() != target.num_actions()
        || phi.dim() != target.dim()
        || phi.num_states() != pi_e.num_states()
        || phi.num_actions() != pi_e.num_actions()
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} features of dim {}", phi.num_states(), phi.num_actions(), phi.dim()),
            found: format!(
                "target {}x{} dim {}, policy {}x{}",
                target.num_states(),
                target.num_actions(),
                target.dim(),
                pi_e.num_states(),
                pi_e.num_actions()
            ),
        });
    }
    Ok(())
}

/// A batch grouped by `(pair, next state)`. Every loss below depends on a
/// transition only through that key and its reward, so grouping is exact.
struct Aggregated {
    entries: Vec<Entry>,
    total: f64,
}

struct Entry {
    pair: usize,
    next: usize,
    count: f64,
    reward_sum: f64,
    reward_sq: f64,
}

impl Aggregated {
    fn pair_weights(&self, num_pairs: usize) -> Vec<f64> {
        let mut w = vec![0.0; num_pairs];
        for e in &self.entries {
            w[e.pair] += e.count / self.total;
        }
        w
    }

    fn new(batch: &[Transition], ns: usize, na: usize) -> Result<Self> {
        let mut map: BTreeMap<(usize, usize), (f64, f64, f64)> = BTreeMap::new();
        for t in batch {
            if t.state >= ns || t.action >= na || t.next_state >= ns {
                return Err(Error::InvalidDataset(format!(
                    "transition ({}, {}, {}) outside {ns}x{na}",
                    t.state, t.action, t.next_state
                )));
            }
            let e = map.entry((t.state * na + t.action, t.next_state)).or_insert((0.0, 0.0, 0.0));
            e.0 += 1.0;
            e.1 += t.reward;
            e.2 += t.reward * t.reward;
        }
        let entries = map
            .into_iter()
            .map(|((pair, next), (count, reward_sum, reward_sq))| Entry { pair, next, count, reward_sum, reward_sq })
            .collect();
        Ok(Self { entries, total: batch.len() as f64 })
    }
}

/// Whether the target table receives gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Stop-gradient: the target gradient is identically zero.
    Detached,
    Attached,
}

/// Value and gradients of the BC objective on a batch.
#[derive(Debug, Clone)]
pub struct BcTerms {
    pub loss: f64,
    /// `∂J/∂φ(s, a)`, one row per pair.
    pub grad_phi: DMatrix<f64>,
    /// `∂J/∂φ̄(s, a)`; zero when detached.
    pub grad_target: DMatrix<f64>,
    pub grad_m: DMatrix<f64>,
    pub grad_rho: DVector<f64>,
}

/// Batch-mean BC objective.
pub fn bc_loss(
    phi: &FeatureTable,
    witness: &Witness,
    batch: &[Transition],
    pi_e: &Policy,
    target_phi: &FeatureTable,
    gamma: f64,
) -> Result<f64> {
    Ok(bc_loss_with_gradients(phi, witness, batch, pi_e, target_phi, gamma, TargetMode::Detached)?.loss)
}

/// [`bc_loss`] with gradients with respect to the feature tables and the
/// witness.
pub fn bc_loss_with_gradients(
    phi: &FeatureTable,
    witness: &Witness,
    batch: &[Transition],
    pi_e: &Policy,
    target_phi: &FeatureTable,
    gamma: f64,
    mode: TargetMode,
) -> Result<BcTerms> {
    check_pair(phi, target_phi, pi_e)?;
    check_witness(witness, phi.dim())?;
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let agg = Aggregated::new(batch, phi.num_states(), phi.num_actions())?;
    let next = policy_averaged(target_phi, pi_e);
    Ok(bc_terms(phi, witness, &agg, &next, pi_e, gamma, mode))
}

/// `φ̄(s, π_e)` for every state, row-major `|S| × d`.
fn policy_averaged(target: &FeatureTable, pi_e: &Policy) -> Vec<f64> {
    let (ns, na, d) = (target.num_states(), target.num_actions(), target.dim());
    let mut out = vec![0.0; ns * d];
    for s in 0..ns {
        let row = &mut out[s * d..(s + 1) * d];
        for a in 0..na {
            let p = pi_e.prob(s, a);
            if p != 0.0 {
                for (o, v) in row.iter_mut().zip(target.row(s, a)) {
                    *o += p * v;
                }
            }
        }
    }
    out
}

/// Spreads a gradient on `φ̄(s', π_e)` over the pairs `(s', a')`.
fn scatter_to_target(grad_target: &mut DMatrix<f64>, next: usize, pi_e: &Policy, grad_avg: &[f64]) {
    let na = pi_e.num_actions();
    for a in 0..na {
        let p = pi_e.prob(next, a);
        if p != 0.0 {
            for (j, g) in grad_avg.iter().enumerate() {
                grad_target[(next * na + a, j)] += p * g;
            }
        }
    }
}

fn bc_terms(
    phi: &FeatureTable,
    witness: &Witness,
    agg: &Aggregated,
    next: &[f64],
    pi_e: &Policy,
    gamma: f64,
    mode: TargetMode,
) -> BcTerms {
    let d = phi.dim();
    let mut terms = BcTerms {
        loss: 0.0,
        grad_phi: DMatrix::zeros(phi.num_pairs(), d),
        grad_target: DMatrix::zeros(phi.num_pairs(), d),
        grad_m: DMatrix::zeros(d, d),
        grad_rho: DVector::zeros(d),
    };
    let scale = 2.0 / agg.total;
    let m = &witness.m;
    let rho = &witness.rho;
    let mut resid = vec![0.0; d];
    let mut grad_avg = vec![0.0; d];
    for e in &agg.entries {
        let x = phi.row_by_pair(e.pair);
        let y = &next[e.next * d..(e.next + 1) * d];
        let mut sq = 0.0;
        for i in 0..d {
            let mut mx = 0.0;
            for (j, xj) in x.iter().enumerate() {
                mx += m[(i, j)] * xj;
            }
            resid[i] = mx - gamma * y[i];
            sq += resid[i] * resid[i];
        }
        let q: f64 = rho.iter().zip(x).map(|(r, xj)| r * xj).sum();
        terms.loss += e.count * (sq + q * q) - 2.0 * q * e.reward_sum + e.reward_sq;
        let u_sum = e.count * q - e.reward_sum;
        let c = scale * e.count;
        for j in 0..d {
            let mut mt = 0.0;
            for (i, r) in resid.iter().enumerate() {
                mt += m[(i, j)] * r;
                terms.grad_m[(i, j)] += c * r * x[j];
            }
            terms.grad_phi[(e.pair, j)] += c * mt + scale * u_sum * rho[j];
            terms.grad_rho[j] += scale * u_sum * x[j];
        }
        if mode == TargetMode::Attached {
            for (g, r) in grad_avg.iter_mut().zip(&resid) {
                *g = -c * gamma * r;
            }
            scatter_to_target(&mut terms.grad_target, e.next, pi_e, &grad_avg);
        }
    }
    terms.loss /= agg.total;
    terms
}

fn check_witness(witness: &Witness, d: usize) -> Result<()> {
    if witness.rho.len() != d || witness.m.nrows() != d || witness.m.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("witness of dim {d}"),
            found: format!("rho {}, M {}x{}", witness.rho.len(), witness.m.nrows(), witness.m.ncols()),
        });
    }
    Ok(())
}

/// Value and gradients of `E ‖g(s, a) − γ φ̄(s', π_e)‖²` on a batch.
#[derive(Debug, Clone)]
pub struct CorrectionTerms {
    pub value: f64,
    /// `∂/∂g(s, a)`, one row per pair.
    pub grad_g: DMatrix<f64>,
    /// `∂/∂φ̄(s, a)`; zero when detached.
    pub grad_target: DMatrix<f64>,
}

/// The regression term subtracted by the double-sampling correction.
/// `g_table` holds `g(s, a)` as one row per pair.
pub fn correction_term(
    g_table: &DMatrix<f64>,
    batch: &[Transition],
    pi_e: &Policy,
    target_phi: &FeatureTable,
    gamma: f64,
    mode: TargetMode,
) -> Result<CorrectionTerms> {
    let d = target_phi.dim();
    if g_table.nrows() != target_phi.num_pairs() || g_table.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("g table {}x{d}", target_phi.num_pairs()),
            found: format!("{}x{}", g_table.nrows(), g_table.ncols()),
        });
    }
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let agg = Aggregated::new(batch, target_phi.num_states(), target_phi.num_actions())?;
    let next = policy_averaged(target_phi, pi_e);
    Ok(correction_terms(g_table, &agg, &next, pi_e, gamma, mode))
}

fn correction_terms(
    g_table: &DMatrix<f64>,
    agg: &Aggregated,
    next: &[f64],
    pi_e: &Policy,
    gamma: f64,
    mode: TargetMode,
) -> CorrectionTerms {
    let (pairs, d) = g_table.shape();
    let mut out = CorrectionTerms {
        value: 0.0,
        grad_g: DMatrix::zeros(pairs, d),
        grad_target: DMatrix::zeros(pairs, d),
    };
    let scale = 2.0 / agg.total;
    let mut resid = vec![0.0; d];
    let mut grad_avg = vec![0.0; d];
    for e in &agg.entries {
        let y = &next[e.next * d..(e.next + 1) * d];
        let c = scale * e.count;
        let mut sq = 0.0;
        for j in 0..d {
            resid[j] = g_table[(e.pair, j)] - gamma * y[j];
            sq += resid[j] * resid[j];
            out.grad_g[(e.pair, j)] += c * resid[j];
        }
        out.value += e.count * sq;
        if mode == TargetMode::Attached {
            for (g, r) in grad_avg.iter_mut().zip(&resid) {
                *g = -c * gamma * r;
            }
            scatter_to_target(&mut out.grad_target, e.next, pi_e, &grad_avg);
        }
    }
    out.value /= agg.total;
    out
}

/// `bc_loss − E ‖g(s, a) − γ φ̄(s', π_e)‖²` on a batch.
pub fn double_sampling_corrected_loss(
    phi: &FeatureTable,
    witness: &Witness,
    g_table: &DMatrix<f64>,
    batch: &[Transition],
    pi_e: &Policy,
    target_phi: &FeatureTable,
    gamma: f64,
) -> Result<f64> {
    let bc = bc_loss(phi, witness, batch, pi_e, target_phi, gamma)?;
    let c = correction_term(g_table, batch, pi_e, target_phi, gamma, TargetMode::Detached)?;
    Ok(bc - c.value)
}

/// Per-pair squared errors `‖M φ − x‖² + (ρᵀφ − r)²` against fixed
/// next-feature rows `x`, summed under `ν`.
fn population_sum(phi: &FeatureTable, witness: &Witness, mdp: &FiniteMdp, nu: &StateActionDist, per_pair: impl Fn(usize, &DVector<f64>) -> f64) -> f64 {
    let mut acc = 0.0;
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let w = nu.weight(s, a);
            if w == 0.0 {
                continue;
            }
            let p = mdp.pair_index(s, a);
            let x = DVector::from_row_slice(phi.row_by_pair(p));
            let u = witness.rho.dot(&x) - mdp.reward(s, a);
            acc += w * (u * u + per_pair(p, &(&witness.m * &x)));
        }
    }
    acc
}

/// Ideal objective with the expectation inside the square:
/// `E_ν ‖M φ − γ E_{s'} φ̄(s', π_e)‖² + (ρᵀφ − r)²`.
pub fn ideal_bc_loss(
    phi: &dyn FeatureMap,
    witness: &Witness,
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    pi_e: &Policy,
    target_phi: &dyn FeatureMap,
) -> Result<f64> {
    let (table, target) = (phi.tabulate(), target_phi.tabulate());
    check_pair(&table, &target, pi_e)?;
    check_witness(witness, table.dim())?;
    nu.check_mdp(mdp)?;
    let next = expected_next_feature(mdp, &target, pi_e)?;
    Ok(population_sum(&table, witness, mdp, nu, |p, mx| (mx - next.row(p).transpose()).norm_squared()))
}

/// Population value of the sampled objective (expectation outside the
/// square), optionally minus the correction for a fixed `g`:
/// `E_ν E_{s'} ‖M φ − γ φ̄(s', π_e)‖² + (ρᵀφ − r)² − E_ν E_{s'} ‖g − γ φ̄(s', π_e)‖²`.
pub fn population_corrected_loss(
    phi: &dyn FeatureMap,
    witness: &Witness,
    g_table: Option<&DMatrix<f64>>,
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    pi_e: &Policy,
    target_phi: &dyn FeatureMap,
) -> Result<f64> {
    let (table, target) = (phi.tabulate(), target_phi.tabulate());
    check_pair(&table, &target, pi_e)?;
    check_witness(witness, table.dim())?;
    nu.check_mdp(mdp)?;
    let na = mdp.num_actions();
    let next = target.policy_average_matrix(pi_e) * mdp.gamma();
    Ok(population_sum(&table, witness, mdp, nu, |p, mx| {
        let (s, a) = (p / na, p % na);
        let mut acc = 0.0;
        for (sn, &prob) in mdp.transition_row(s, a).iter().enumerate() {
            if prob == 0.0 {
                continue;
            }
            let y = next.row(sn).transpose();
            acc += prob * (mx - &y).norm_squared();
            if let Some(g) = g_table {
                acc -= prob * (g.row(p).transpose() - &y).norm_squared();
            }
        }
        acc
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignKind {
    None,
    /// D-optimal: `−logdet(Σ̂ + εI)`.
    LogDet,
    /// E-optimal: `−λ_min(Σ̂)`.
    MinEig,
}

impl DesignKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignKind::None => "none",
            DesignKind::LogDet => "logdet",
            DesignKind::MinEig => "min-eig",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DesignPenalty {
    pub value: f64,
    /// `∂/∂φ(s, a)`, one row per pair.
    pub grad: DMatrix<f64>,
    /// Spectrum diagnostics of the unridged `Σ̂`.
    pub lambda_min: f64,
    pub logdet: f64,
}

/// Design penalty of `Σ̂ = Σ_p w_p φ_p φ_pᵀ` for per-pair weights `w`.
///
/// The min-eig gradient uses the first eigenvector among ties in the
/// solver's order, so it is a deterministic subgradient.
pub fn design_penalty_weighted(phi: &FeatureTable, pair_weights: &[f64], kind: DesignKind) -> Result<DesignPenalty> {
    if pair_weights.len() != phi.num_pairs() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pair weights", phi.num_pairs()),
            found: format!("{}", pair_weights.len()),
        });
    }
    let d = phi.dim();
    let sigma = weighted_gram(phi, pair_weights);
    let spectrum = SymmetricSpectrum::new(&sigma);
    let lambda_min = spectrum.min();
    let logdet = logdet_psd(&spectrum);
    let mut grad = DMatrix::zeros(phi.num_pairs(), d);
    let value = match kind {
        DesignKind::None => 0.0,
        DesignKind::LogDet => {
            let mut value = 0.0;
            let mut inverse = DMatrix::zeros(d, d);
            for (i, &l) in spectrum.values.iter().enumerate() {
                let l = l + LOGDET_RIDGE;
                value -= libm::log(l);
                let v = spectrum.vectors.column(i);
                inverse.ger(1.0 / l, &v, &v, 1.0);
            }
            for (p, &w) in pair_weights.iter().enumerate() {
                if w != 0.0 {
                    let x = DVector::from_row_slice(phi.row_by_pair(p));
                    grad.set_row(p, &(&inverse * x * (-2.0 * w)).transpose());
                }
            }
            value
        }
        DesignKind::MinEig => {
            let v = spectrum.vectors.column(spectrum.min_index()).into_owned();
            for (p, &w) in pair_weights.iter().enumerate() {
                if w != 0.0 {
                    let x = DVector::from_row_slice(phi.row_by_pair(p));
                    grad.set_row(p, &(&v * (-2.0 * w * v.dot(&x))).transpose());
                }
            }
            -lambda_min
        }
    };
    Ok(DesignPenalty { value, grad, lambda_min, logdet })
}

/// Design penalty of the batch covariance.
pub fn design_penalty(phi: &FeatureTable, batch: &[Transition], kind: DesignKind) -> Result<DesignPenalty> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let mut weights = vec![0.0; phi.num_pairs()];
    let na = phi.num_actions();
    for t in batch {
        if t.state >= phi.num_states() || t.action >= na {
            return Err(Error::InvalidDataset(format!("pair ({}, {}) out of range", t.state, t.action)));
        }
        weights[t.state * na + t.action] += 1.0;
    }
    let n = batch.len() as f64;
    weights.iter_mut().for_each(|w| *w /= n);
    design_penalty_weighted(phi, &weights, kind)
}

/// Post-training check of the E-optimal constraint `λ_min(Σ̂) ≥ β/2`.
#[derive(Debug, Clone, Copy)]
pub struct DesignFeasibility {
    pub lambda_min: f64,
    pub threshold: f64,
    pub satisfied: bool,
}

pub fn design_feasibility(phi: &dyn FeatureMap, data: &OfflineDataset, beta: f64) -> Result<DesignFeasibility> {
    let table = phi.tabulate();
    if data.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    let freq = pair_frequencies(data, table.num_states(), table.num_actions());
    let lambda_min = SymmetricSpectrum::new(&weighted_gram(&table, &freq)).min();
    let threshold = beta / 2.0;
    Ok(DesignFeasibility { lambda_min, threshold, satisfied: lambda_min >= threshold })
}

/// Pulls a per-pair gradient table back to network parameters.
pub fn pullback(net: &TrainableNet, traces: &[ForwardTrace], grad_rows: &DMatrix<f64>) -> Vec<f64> {
    let mut grad = vec![0.0; net.num_params()];
    let mut upstream = vec![0.0; grad_rows.ncols()];
    for (p, trace) in traces.iter().enumerate() {
        let row = grad_rows.row(p);
        if row.iter().all(|&g| g == 0.0) {
            continue;
        }
        upstream.iter_mut().zip(row.iter()).for_each(|(u, g)| *u = *g);
        net.backward_into(trace, &upstream, &mut grad);
    }
    grad
}

fn table_from_traces(traces: &[ForwardTrace], num_states: usize, num_actions: usize, kind: crate::features::FeatureKind) -> Result<FeatureTable> {
    let d = traces.first().map(|t| t.output().len()).unwrap_or(0);
    let mut values = Vec::with_capacity(traces.len() * d);
    for t in traces {
        values.extend_from_slice(t.output());
    }
    FeatureTable::from_values(num_states, num_actions, d, values, kind)
}

/// Regressor for `(s, a) ↦ γ E φ̄(s', π_e)`. The head bounds
/// `‖g(s, a)‖₂ ≤ γ` for any parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GNet {
    pub net: TrainableNet,
    pub num_states: usize,
    pub num_actions: usize,
}

impl GNet {
    /// Same body as `phi_arch`, with a `γ`-bounded head.
    pub fn new(phi_arch: &Architecture, num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> Result<Self> {
        let arch = Architecture::new(phi_arch.input_dim, phi_arch.hidden.clone(), phi_arch.output_dim, Head::Bounded { scale: gamma })?;
        if arch.input_dim != num_states + num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("network input {}", num_states + num_actions),
                found: format!("{}", arch.input_dim),
            });
        }
        Ok(Self { net: TrainableNet::new(arch, seed, stream::G_NET_INIT), num_states, num_actions })
    }

    pub fn traces(&self) -> Vec<ForwardTrace> {
        let mut out = Vec::with_capacity(self.num_states * self.num_actions);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let x = encode_pair(s, a, self.num_states, self.num_actions);
                out.push(self.net.forward_trace(&x).expect("input width checked at construction"));
            }
        }
        out
    }

    /// `g(s, a)` as one row per pair.
    pub fn table(&self) -> DMatrix<f64> {
        rows_of(&self.traces())
    }
}

fn rows_of(traces: &[ForwardTrace]) -> DMatrix<f64> {
    let d = traces.first().map(|t| t.output().len()).unwrap_or(0);
    DMatrix::from_fn(traces.len(), d, |i, j| traces[i].output()[j])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Plain sampled objective; unbiased only for deterministic transitions.
    Deterministic,
    /// Sampled objective minus the fitted `g` correction.
    Stochastic,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Deterministic => "deterministic",
            Regime::Stochastic => "stochastic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Outer steps `T ≥ 1`.
    pub steps: usize,
    /// Step size for `φ`.
    pub learning_rate: f64,
    /// Step size for the witness and `g`.
    pub inner_learning_rate: f64,
    /// EMA rate `τ ∈ (0, 1]`.
    pub ema_tau: f64,
    /// Design weight `λ ≥ 0`.
    pub design_weight: f64,
    pub design_kind: DesignKind,
    pub regime: Regime,
    pub batch_size: usize,
    pub seed: u64,
    /// Closed-form witness refit on the full dataset every this many steps
    /// (0 disables refits).
    pub refit_every: usize,
    /// Regress onto an EMA target copy (detached). When false the online
    /// features serve as their own target and gradients flow through both
    /// sides.
    pub use_target: bool,
    /// Weight on the BC term; zero gives the design-only ablation.
    pub bc_weight: f64,
    pub bounds: ThetaBounds,
    pub optimizer: OptimizerKind,
    /// Gradient steps on `g` per outer step (stochastic regime).
    pub g_steps: usize,
}

impl TrainConfig {
    /// Defaults used by the harness; `W` feeds the `ρ` bound.
    pub fn reference(seed: u64, w_radius: f64) -> Self {
        Self {
            steps: 1000,
            learning_rate: 3e-3,
            inner_learning_rate: 1e-2,
            ema_tau: 0.1,
            design_weight: 1e-3,
            design_kind: DesignKind::LogDet,
            regime: Regime::Stochastic,
            batch_size: 20_000,
            seed,
            refit_every: 1,
            use_target: true,
            bc_weight: 1.0,
            bounds: ThetaBounds::new(w_radius),
            optimizer: OptimizerKind::ADAM,
            g_steps: 1,
        }
    }

    /// Lists every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.steps == 0 {
            out.push(String::from("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.inner_learning_rate > 0.0 && self.inner_learning_rate.is_finite()) {
            out.push(format!("inner_learning_rate {} must be positive", self.inner_learning_rate));
        }
        if !(self.ema_tau > 0.0 && self.ema_tau <= 1.0) {
            out.push(format!("ema_tau {} outside (0, 1]", self.ema_tau));
        }
        if !(self.design_weight >= 0.0 && self.design_weight.is_finite()) {
            out.push(format!("design_weight {} must be nonnegative", self.design_weight));
        }
        if !(self.bc_weight >= 0.0 && self.bc_weight.is_finite()) {
            out.push(format!("bc_weight {} must be nonnegative", self.bc_weight));
        }
        if self.batch_size == 0 {
            out.push(String::from("batch_size must be at least 1"));
        }
        if let Err(e) = self.bounds.validate() {
            out.push(format!("{e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub bc_loss: f64,
    /// Correction value subtracted from `bc_loss` (zero in the
    /// deterministic regime).
    pub correction: f64,
    /// Design penalty value before weighting.
    pub penalty: f64,
    /// Spectrum of `Σ̂` over the full training set.
    pub lambda_min: f64,
    pub logdet: f64,
    /// The witness was refit in closed form this step.
    pub refit: bool,
    /// Max absolute parameter difference between target and online
    /// networks after the EMA update.
    pub target_gap: f64,
}

/// A training run stopped early on a non-finite value.
#[derive(Debug, Clone)]
pub struct Aborted<T> {
    pub error: Error,
    pub trace: Vec<T>,
}

impl<T> fmt::Display for Aborted<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} after {} recorded steps", self.error, self.trace.len())
    }
}

impl<T: fmt::Debug> core::error::Error for Aborted<T> {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub features: NetFeatures,
    pub target: TrainableNet,
    pub witness: Witness,
    pub g: Option<GNet>,
    pub trace: Vec<TraceRow>,
}

/// Epoch-wise shuffled batches drawn without replacement.
#[derive(Debug)]
pub struct BatchSchedule {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: rng::Rng64,
}

impl BatchSchedule {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: 0,
            batch_size: batch_size.min(len).max(1),
            rng: rng::split(seed, stream::BATCHES),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Indices of the next batch. A batch never straddles two epochs.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

fn check_finite(values: &[f64], what: &str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.into(), step })
    }
}

/// Alternating optimization of `φ`, the witness and `g`.
///
/// Per step: the witness takes a gradient step (or a closed-form refit on
/// the whole dataset every `refit_every` steps), `g` takes `g_steps`
/// gradient steps in the stochastic regime, `φ` takes a step on
/// `bc_weight · J + λ · penalty` with the target detached, and the target
/// moves toward `φ` by EMA.
pub fn train(
    phi: TrainableNet,
    config: &TrainConfig,
    data: &OfflineDataset,
    pi_e: &Policy,
    gamma: f64,
) -> core::result::Result<TrainOutcome, Aborted<TraceRow>> {
    let abort = |error: Error, trace: Vec<TraceRow>| Aborted { error, trace };
    if let Err(e) = config.validate() {
        return Err(abort(e, Vec::new()));
    }
    if data.is_empty() {
        return Err(abort(
            Error::InvalidDataset(format!("{} transitions for batch size {}", data.len(), config.batch_size)),
            Vec::new(),
        ));
    }
    let (ns, na) = (pi_e.num_states(), pi_e.num_actions());
    let mut online = match NetFeatures::new(phi, ns, na) {
        Ok(f) => f,
        Err(e) => return Err(abort(e, Vec::new())),
    };
    let d = online.net.architecture().output_dim;
    let mut target = online.net.clone();
    let mut g = match config.regime {
        Regime::Stochastic => match GNet::new(online.net.architecture(), ns, na, gamma, config.seed) {
            Ok(g) => Some(g),
            Err(e) => return Err(abort(e, Vec::new())),
        },
        Regime::Deterministic => None,
    };
    let mut witness = Witness::zeros(d, config.bounds);
    let freq = pair_frequencies(data, ns, na);

    let mut phi_opt = Optimizer::new(config.optimizer, config.learning_rate, online.net.num_params());
    let mut witness_opt = Optimizer::new(config.optimizer, config.inner_learning_rate, d + d * d);
    let mut g_opt = g.as_ref().map(|g| Optimizer::new(config.optimizer, config.inner_learning_rate, g.net.num_params()));
    let mut schedule = BatchSchedule::new(data.len(), config.batch_size, config.seed);
    let mut trace = Vec::with_capacity(config.steps);
    let mode = if config.use_target { TargetMode::Detached } else { TargetMode::Attached };

    let full_agg = match Aggregated::new(data.transitions(), ns, na) {
        Ok(a) => a,
        Err(e) => return Err(abort(e, Vec::new())),
    };
    let full_batch = config.batch_size >= data.len();

    for step in 1..=config.steps {
        let batch_agg = if full_batch {
            None
        } else {
            let batch: Vec<Transition> = schedule.next_batch().iter().map(|&i| data.transitions()[i]).collect();
            match Aggregated::new(&batch, ns, na) {
                Ok(a) => Some(a),
                Err(e) => return Err(abort(e, trace)),
            }
        };
        let agg = batch_agg.as_ref().unwrap_or(&full_agg);
        let traces = online.traces();
        let table = match table_from_traces(&traces, ns, na, crate::features::FeatureKind::Trainable) {
            Ok(t) => t,
            Err(e) => return Err(abort(e, trace)),
        };
        let target_table = if config.use_target {
            match (NetFeatures { net: target.clone(), num_states: ns, num_actions: na }).tabulate_checked() {
                Ok(t) => t,
                Err(e) => return Err(abort(e, trace)),
            }
        } else {
            table.clone()
        };
        let next = policy_averaged(&target_table, pi_e);

        // Witness.
        let refit = config.refit_every > 0 && (step - 1) % config.refit_every == 0;
        if refit {
            let (gram, reward, cross) = sample_moments(&table, &full_agg, &next, gamma);
            witness = solve_witness(d, &gram, &reward, &cross, config.bounds).witness;
        } else {
            let terms = bc_terms(&table, &witness, agg, &next, pi_e, gamma, TargetMode::Detached);
            let mut params: Vec<f64> = witness.rho.iter().chain(witness.m.iter()).copied().collect();
            let grads: Vec<f64> = terms.grad_rho.iter().chain(terms.grad_m.iter()).map(|g| g * config.bc_weight).collect();
            witness_opt.step(&mut params, &grads);
            witness.rho.copy_from_slice(&params[..d]);
            witness.m.copy_from_slice(&params[d..]);
            witness.project();
        }

        // g.
        let mut g_table = None;
        if let (Some(g), Some(opt)) = (g.as_mut(), g_opt.as_mut()) {
            for _ in 0..config.g_steps {
                let g_traces = g.traces();
                let corr = correction_terms(&rows_of(&g_traces), agg, &next, pi_e, gamma, TargetMode::Detached);
                let grad = pullback(&g.net, &g_traces, &corr.grad_g);
                opt.step(g.net.params_mut(), &grad);
            }
            g_table = Some(g.table());
        }

        // φ.
        let bc = bc_terms(&table, &witness, agg, &next, pi_e, gamma, mode);
        let mut grad_rows = &bc.grad_phi * config.bc_weight;
        if mode == TargetMode::Attached {
            grad_rows += &bc.grad_target * config.bc_weight;
        }
        let mut correction = 0.0;
        if let Some(g_table) = g_table.as_ref() {
            let corr = correction_terms(g_table, agg, &next, pi_e, gamma, mode);
            correction = corr.value;
            if mode == TargetMode::Attached {
                grad_rows -= &corr.grad_target * config.bc_weight;
            }
        }
        let penalty = match design_penalty_weighted(&table, &agg.pair_weights(ns * na), config.design_kind) {
            Ok(p) => p,
            Err(e) => return Err(abort(e, trace)),
        };
        if config.design_weight > 0.0 && config.design_kind != DesignKind::None {
            grad_rows += &penalty.grad * config.design_weight;
        }
        let grad = pullback(&online.net, &traces, &grad_rows);

        let full = SymmetricSpectrum::new(&weighted_gram(&table, &freq));
        let mut row = TraceRow {
            step,
            bc_loss: bc.loss,
            correction,
            penalty: penalty.value,
            lambda_min: full.min(),
            logdet: logdet_psd(&full),
            refit,
            target_gap: 0.0,
        };
        if let Err(e) = check_finite(&[bc.loss, correction, penalty.value], "training loss", step)
            .and_then(|_| check_finite(&grad, "feature gradient", step))
        {
            trace.push(row);
            return Err(abort(e, trace));
        }
        phi_opt.step(online.net.params_mut(), &grad);
        if config.use_target {
            target.ema_update(&online.net, config.ema_tau);
        } else {
            target = online.net.clone();
        }
        row.target_gap = target
            .params()
            .iter()
            .zip(online.net.params())
            .fold(0.0, |m: f64, (t, o)| m.max((t - o).abs()));
        trace.push(row);
        if let Err(e) = check_finite(online.net.params(), "feature parameters", step) {
            return Err(abort(e, trace));
        }
    }
    Ok(TrainOutcome { features: online, target, witness, g, trace })
}

impl NetFeatures {
    fn tabulate_checked(&self) -> Result<FeatureTable> {
        table_from_traces(&self.traces(), self.num_states, self.num_actions, crate::features::FeatureKind::Trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_low_rank_mdp, make_random_tabular_mdp, sample_offline_dataset};

    #[test]
    fn zero_witness_zero_reward_myopic_loss_vanishes() {
        let mdp = make_random_tabular_mdp(1, 3, 2, 0.9, true).unwrap().with_rewards(vec![0.0; 6]).unwrap();
        let phi = FeatureTable::random_fixed(1, 3, 2, 2).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let pi = Policy::uniform(3, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 50, 1).unwrap();
        let w = Witness::zeros(2, ThetaBounds::new(1.0));
        assert_eq!(bc_loss(&phi, &w, data.transitions(), &pi, &phi, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn one_hot_exact_witness_is_the_discounted_kernel() {
        let mdp = make_random_tabular_mdp(2, 3, 2, 0.8, true).unwrap();
        let phi = FeatureTable::one_hot(3, 2).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let pi = Policy::random(2, 3, 2).unwrap();
        let fit = fit_witness(&phi, WitnessSource::Exact { mdp: &mdp, nu: &nu }, &pi, None, ThetaBounds::unconstrained()).unwrap();
        let kernel = crate::oracles::policy_transition(&mdp, &pi).transpose() * 0.8;
        assert!((&fit.witness.m - kernel).abs().max() < 1e-12);
        assert!(ideal_bc_loss(&phi, &fit.witness, &mdp, &nu, &pi, &phi).unwrap() <= 1e-10);
        assert!(!fit.projected && !fit.rank_deficient);
    }

    #[test]
    fn low_rank_truth_is_recovered_by_the_exact_fit() {
        let lr = make_low_rank_mdp(3, 10, 3, 4, 0.9).unwrap();
        let nu = StateActionDist::uniform(10, 3).unwrap();
        let pi = Policy::uniform(10, 3).unwrap();
        let fit = fit_witness(
            &lr.features,
            WitnessSource::Exact { mdp: &lr.mdp, nu: &nu },
            &pi,
            None,
            ThetaBounds::unconstrained(),
        )
        .unwrap();
        assert!((&fit.witness.rho - &lr.reward_weights).norm() < 1e-9);
        assert!(ideal_bc_loss(&lr.features, &fit.witness, &lr.mdp, &nu, &pi, &lr.features).unwrap() <= 1e-10);
    }

    #[test]
    fn spectral_projection_clamps() {
        let mut w = Witness::zeros(2, ThetaBounds { rho_bound: 1.0, m_spectral_bound: 0.99, enforce: true });
        w.m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        w.rho = DVector::from_vec(vec![3.0, 4.0]);
        assert!(w.project());
        assert!((w.m[(0, 0)] - 0.99).abs() < 1e-12 && (w.m[(1, 1)] - 0.5).abs() < 1e-12);
        assert!((w.rho.norm() - 1.0).abs() < 1e-12);
        assert!(w.is_feasible());
        assert!(!w.project());
    }

    #[test]
    fn deterministic_mdp_correction_matches_ideal() {
        let mdp = make_random_tabular_mdp(4, 4, 2, 0.9, false).unwrap();
        let phi = FeatureTable::random_fixed(4, 4, 2, 3).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::random(4, 4, 2).unwrap();
        let w = fit_witness(&phi, WitnessSource::Exact { mdp: &mdp, nu: &nu }, &pi, None, ThetaBounds::new(10.0)).unwrap().witness;
        let sampled = population_corrected_loss(&phi, &w, None, &mdp, &nu, &pi, &phi).unwrap();
        let ideal = ideal_bc_loss(&phi, &w, &mdp, &nu, &pi, &phi).unwrap();
        assert!((sampled - ideal).abs() <= 1e-12);
        let g = expected_next_feature(&mdp, &phi, &pi).unwrap();
        let corrected = population_corrected_loss(&phi, &w, Some(&g), &mdp, &nu, &pi, &phi).unwrap();
        assert_eq!(corrected, sampled);
    }

    #[test]
    fn zero_g_subtracts_next_feature_energy() {
        let mdp = make_random_tabular_mdp(5, 4, 2, 0.9, true).unwrap();
        let phi = FeatureTable::random_fixed(5, 4, 2, 3).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::uniform(4, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 200, 5).unwrap();
        let w = Witness::zeros(3, ThetaBounds::new(1.0));
        let zero = DMatrix::zeros(8, 3);
        let bc = bc_loss(&phi, &w, data.transitions(), &pi, &phi, 0.9).unwrap();
        let corrected = double_sampling_corrected_loss(&phi, &w, &zero, data.transitions(), &pi, &phi, 0.9).unwrap();
        let next = phi.policy_average_matrix(&pi);
        let energy: f64 = data
            .transitions()
            .iter()
            .map(|t| 0.81 * next.row(t.next_state).norm_squared())
            .sum::<f64>()
            / 200.0;
        assert!((bc - corrected - energy).abs() <= 1e-12);
    }

    #[test]
    fn detached_target_gets_no_gradient() {
        let mdp = make_random_tabular_mdp(6, 3, 2, 0.9, true).unwrap();
        let phi = FeatureTable::random_fixed(6, 3, 2, 2).unwrap();
        let target = FeatureTable::random_fixed(7, 3, 2, 2).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let pi = Policy::uniform(3, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 100, 6).unwrap();
        let mut w = Witness::zeros(2, ThetaBounds::new(1.0));
        w.m = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
        let t = bc_loss_with_gradients(&phi, &w, data.transitions(), &pi, &target, 0.9, TargetMode::Detached).unwrap();
        assert!(t.grad_target.iter().all(|&g| g == 0.0));
        let a = bc_loss_with_gradients(&phi, &w, data.transitions(), &pi, &target, 0.9, TargetMode::Attached).unwrap();
        assert!(a.grad_target.iter().any(|&g| g != 0.0));
        assert_eq!(a.loss, t.loss);
    }

    #[test]
    fn identity_covariance_logdet_penalty() {
        // One-hot over 2x2 pairs scaled by 2: Σ̂ = I under uniform weights.
        let values = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let phi = FeatureTable::from_values(2, 2, 4, values, crate::features::FeatureKind::OneHot).unwrap();
        let p = design_penalty_weighted(&phi, &[1.0; 4], DesignKind::LogDet).unwrap();
        assert!((p.value + 4.0 * libm::log(1.0 + LOGDET_RIDGE)).abs() < 1e-15);
        assert!((p.value + 4.0 * LOGDET_RIDGE).abs() < 1e-11);
        assert!(p.logdet.abs() < 1e-12);
    }

    #[test]
    fn min_eig_ascent_spreads_rank_one_features() {
        // Two pairs, both starting near e1; the penalty gradient must open
        // up the orthogonal direction.
        let mut rows = [0.7, 0.01, 0.7, -0.01];
        let mut first = 0.0;
        let mut last = -1.0;
        for step in 0..100 {
            let phi = FeatureTable::from_values(1, 2, 2, rows.to_vec(), crate::features::FeatureKind::RandomFixed).unwrap();
            let p = design_penalty_weighted(&phi, &[0.5, 0.5], DesignKind::MinEig).unwrap();
            if step == 0 {
                first = p.lambda_min;
            } else {
                assert!(p.lambda_min > last);
            }
            last = p.lambda_min;
            for (r, g) in rows.iter_mut().zip(p.grad.transpose().iter()) {
                *r -= 0.02 * g;
            }
        }
        assert!(last > 10.0 * first);
    }

    #[test]
    fn batch_schedule_covers_each_epoch_without_replacement() {
        let mut s = BatchSchedule::new(10, 5, 3);
        let mut seen: Vec<usize> = s.next_batch().to_vec();
        seen.extend_from_slice(s.next_batch());
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut again = BatchSchedule::new(10, 5, 3);
        assert_eq!(again.next_batch(), BatchSchedule::new(10, 5, 3).next_batch());
    }

    fn small_setup() -> (FiniteMdp, OfflineDataset, Policy, TrainableNet) {
        let mdp = make_random_tabular_mdp(9, 4, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let pi = Policy::uniform(4, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 400, 9).unwrap();
        let arch = Architecture::feature_net(4, 2, vec![16], 3).unwrap();
        (mdp, data, pi, TrainableNet::new(arch, 9, stream::NET_INIT))
    }

    #[test]
    fn full_ema_rate_keeps_target_equal_to_online() {
        let (_, data, pi, net) = small_setup();
        let mut cfg = TrainConfig::reference(1, 10.0);
        cfg.steps = 20;
        cfg.batch_size = 64;
        cfg.ema_tau = 1.0;
        let out = train(net, &cfg, &data, &pi, 0.9).unwrap();
        assert!(out.trace.iter().all(|r| r.target_gap == 0.0));
        assert_eq!(out.target.params(), out.features.net.params());
    }

    #[test]
    fn training_is_bitwise_reproducible_and_feasible() {
        let (_, data, pi, net) = small_setup();
        let mut cfg = TrainConfig::reference(2, 10.0);
        cfg.steps = 30;
        cfg.batch_size = 64;
        cfg.refit_every = 7;
        let a = train(net.clone(), &cfg, &data, &pi, 0.9).unwrap();
        let b = train(net, &cfg, &data, &pi, 0.9).unwrap();
        assert_eq!(a.features.net.params(), b.features.net.params());
        assert_eq!(a.trace, b.trace);
        assert!(a.witness.is_feasible());
        assert!(a.trace.iter().filter(|r| r.refit).count() == 5);
    }

    #[test]
    fn invalid_config_is_rejected_with_every_violation() {
        let (_, data, pi, net) = small_setup();
        let mut cfg = TrainConfig::reference(2, 10.0);
        cfg.ema_tau = 0.0;
        cfg.steps = 0;
        let err = train(net.clone(), &cfg, &data, &pi, 0.9).unwrap_err();
        match err.error {
            Error::InvalidConfig(msg) => assert!(msg.contains("steps") && msg.contains("ema_tau")),
            other => panic!("{other:?}"),
        }
        let empty = data.prefix(0);
        assert!(train(net, &TrainConfig::reference(2, 10.0), &empty, &pi, 0.9).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_trace() {
        let (_, data, pi, net) = small_setup();
        let mut transitions = data.transitions().to_vec();
        transitions[5].reward = f64::NAN;
        let poisoned = OfflineDataset::new(transitions, data.source_seed(), data.source_dist().clone());
        let mut cfg = TrainConfig::reference(2, 10.0);
        cfg.steps = 50;
        cfg.batch_size = 64;
        cfg.refit_every = 0;
        let err = train(net, &cfg, &poisoned, &pi, 0.9).unwrap_err();
        assert!(matches!(err.error, Error::NonFinite { .. }));
        assert!(!err.trace.is_empty());
    }
}
