//! Exact dynamic-programming ground truth on finite MDPs.
//!
//! Everything here is computed by dense linear solves or exhaustive
//! enumeration; nothing is sampled.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::{expected_next_feature, weighted_gram, FeatureMap, FeatureTable};
use crate::linalg::{halton_directions, BallLeastSquares, SymmetricSpectrum};
use crate::mdp::{FiniteMdp, Policy, StateActionDist};

/// A state-action value table `Q[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    num_states: usize,
    num_actions: usize,
    q: Vec<f64>,
}

impl ValueFunction {
    pub fn new(num_states: usize, num_actions: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != num_states * num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", num_states * num_actions),
                found: format!("{}", q.len()),
            });
        }
        Ok(Self { num_states, num_actions, q })
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self { num_states, num_actions, q: vec![0.0; num_states * num_actions] }
    }

    /// `f(s, a) = θᵀφ(s, a)`.
    pub fn linear(phi: &FeatureTable, theta: &DVector<f64>) -> Self {
        let q = (phi.matrix() * theta).iter().copied().collect();
        Self { num_states: phi.num_states(), num_actions: phi.num_actions(), q }
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    /// `V(s) = Σ_a π(a | s) Q(s, a)`.
    pub fn v_under(&self, pi: &Policy) -> Vec<f64> {
        (0..self.num_states)
            .map(|s| pi.row(s).iter().zip(&self.q[s * self.num_actions..]).map(|(p, q)| p * q).sum())
            .collect()
    }

    /// `E_{s ~ p0}[f(s, π)]`.
    pub fn value_at(&self, pi: &Policy, p0: &[f64]) -> f64 {
        self.v_under(pi).iter().zip(p0).map(|(v, p)| v * p).sum()
    }

    fn check(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::ShapeMismatch {
                expected: format!("values over {}x{}", mdp.num_states(), mdp.num_actions()),
                found: format!("{}x{}", self.num_states, self.num_actions),
            });
        }
        Ok(())
    }
}

fn check_state_dist(mdp: &FiniteMdp, p0: &[f64]) -> Result<()> {
    if p0.len() != mdp.num_states() {
        return Err(Error::ShapeMismatch {
            expected: format!("state distribution of length {}", mdp.num_states()),
            found: format!("{}", p0.len()),
        });
    }
    let sum: f64 = p0.iter().sum();
    if p0.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(Error::NotNormalized { what: "state distribution".into(), sum });
    }
    Ok(())
}

/// `P^π[(s, a), (s', a')] = P(s' | s, a) π(a' | s')`.
pub fn policy_transition(mdp: &FiniteMdp, pi: &Policy) -> DMatrix<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    let mut m = DMatrix::zeros(n, n);
    for s in 0..ns {
        for a in 0..na {
            let i = mdp.pair_index(s, a);
            for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for an in 0..na {
                    m[(i, sn * na + an)] += p * pi.prob(sn, an);
                }
            }
        }
    }
    m
}

/// Solves `Q = r + γ P^π Q` directly.
pub fn exact_value(mdp: &FiniteMdp, pi: &Policy) -> Result<ValueFunction> {
    pi.check_mdp(mdp)?;
    let n = mdp.num_pairs();
    let system = DMatrix::identity(n, n) - policy_transition(mdp, pi) * mdp.gamma();
    let r = DVector::from_column_slice(mdp.rewards());
    let q = system
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::InvalidGamma(mdp.gamma()))?;
    ValueFunction::new(mdp.num_states(), mdp.num_actions(), q.iter().copied().collect())
}

/// `T^π f(s, a) = r(s, a) + γ E_{s' ~ P(s, a), a' ~ π(s')} f(s', a')`.
pub fn apply_bellman(mdp: &FiniteMdp, pi: &Policy, f: &ValueFunction) -> Result<ValueFunction> {
    pi.check_mdp(mdp)?;
    f.check(mdp)?;
    let v = f.v_under(pi);
    let mut out = Vec::with_capacity(mdp.num_pairs());
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let next: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
            out.push(mdp.reward(s, a) + mdp.gamma() * next);
        }
    }
    ValueFunction::new(mdp.num_states(), mdp.num_actions(), out)
}

/// Discounted occupancy `d^π_{p0} = (1 − γ) Σ_h γ^h d^π_h`, solved as
/// `(I − γ P^πᵀ) d = (1 − γ) d_0`.
pub fn occupancy(mdp: &FiniteMdp, pi: &Policy, p0: &[f64]) -> Result<StateActionDist> {
    pi.check_mdp(mdp)?;
    check_state_dist(mdp, p0)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    let mut start = DVector::zeros(n);
    for s in 0..ns {
        for a in 0..na {
            start[s * na + a] = (1.0 - mdp.gamma()) * p0[s] * pi.prob(s, a);
        }
    }
    let system = DMatrix::identity(n, n) - policy_transition(mdp, pi).transpose() * mdp.gamma();
    let d = system.lu().solve(&start).ok_or_else(|| Error::InvalidGamma(mdp.gamma()))?;
    // Round-off can leave entries of order -1e-17.
    let weights = d.iter().map(|&w| if w < 0.0 && w > -1e-12 { 0.0 } else { w }).collect();
    StateActionDist::from_unnormalized(ns, na, weights)
}

/// State marginal of `π` at step `h` when started from `p0`.
pub fn state_marginal_at(mdp: &FiniteMdp, pi: &Policy, p0: &[f64], h: usize) -> Result<Vec<f64>> {
    pi.check_mdp(mdp)?;
    check_state_dist(mdp, p0)?;
    let mut p = p0.to_vec();
    for _ in 0..h {
        let mut next = vec![0.0; mdp.num_states()];
        for (s, &ps) in p.iter().enumerate() {
            if ps == 0.0 {
                continue;
            }
            for a in 0..mdp.num_actions() {
                let w = ps * pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (n, &t) in next.iter_mut().zip(mdp.transition_row(s, a)) {
                    *n += w * t;
                }
            }
        }
        p = next;
    }
    Ok(p)
}

/// `‖f‖_ν = sqrt(Σ ν_i f_i²)`.
pub fn weighted_l2(weights: &[f64], values: &[f64]) -> f64 {
    libm::sqrt(weights.iter().zip(values).map(|(w, v)| w * v * v).sum::<f64>())
}

/// `‖f − T^π f‖` in `L2(dist)`.
pub fn bellman_error(mdp: &FiniteMdp, pi: &Policy, f: &ValueFunction, dist: &StateActionDist) -> Result<f64> {
    let tf = apply_bellman(mdp, pi, f)?;
    let diff: Vec<f64> = f.values().iter().zip(tf.values()).map(|(a, b)| a - b).collect();
    Ok(weighted_l2(dist.weights(), &diff))
}

/// Outcome of the linear Bellman completeness oracle.
#[derive(Debug, Clone)]
pub struct LbcReport {
    /// Lower bound on `max_{w1} min_{w2} ‖w2ᵀφ − T(w1ᵀφ)‖_ν`.
    pub epsilon: f64,
    /// Probe `w1` attaining the maximum.
    pub worst_probe: DVector<f64>,
    /// `Σ(φ)` under `ν` was rank deficient; the inner solve used the
    /// pseudoinverse.
    pub degenerate_covariance: bool,
    pub probes_evaluated: usize,
}

/// Probe set for the outer maximization: the `2d` signed axes followed by
/// `n_probes − 2d` Halton directions, all scaled to the sphere of radius
/// `w_radius`. The set for `n` is a prefix of the set for `n + 1`.
pub fn lbc_probes(dim: usize, n_probes: usize, w_radius: f64) -> Result<Vec<DVector<f64>>> {
    if !(w_radius > 0.0) {
        return Err(Error::InvalidRadius(w_radius));
    }
    if n_probes < 2 * dim {
        return Err(Error::InvalidConfig(format!(
            "{n_probes} probes is fewer than the {} signed axes",
            2 * dim
        )));
    }
    let mut probes = Vec::with_capacity(n_probes);
    for i in 0..dim {
        for sign in [1.0, -1.0] {
            let mut e = DVector::zeros(dim);
            e[i] = sign * w_radius;
            probes.push(e);
        }
    }
    probes.extend(halton_directions(dim, n_probes - 2 * dim).into_iter().map(|v| v * w_radius));
    Ok(probes)
}

struct LbcContext {
    phi: DMatrix<f64>,
    next: DMatrix<f64>,
    rewards: DVector<f64>,
    weights: Vec<f64>,
    solver: BallLeastSquares,
}

impl LbcContext {
    fn new(mdp: &FiniteMdp, nu: &StateActionDist, source: &FeatureTable, target: &FeatureTable, pi_e: &Policy) -> Result<Self> {
        nu.check_mdp(mdp)?;
        let next = expected_next_feature(mdp, source, pi_e)?;
        let gram = weighted_gram(target, nu.weights());
        Ok(Self {
            phi: target.matrix(),
            next,
            rewards: DVector::from_column_slice(mdp.rewards()),
            weights: nu.weights().to_vec(),
            solver: BallLeastSquares::new(&gram),
        })
    }

    /// Residual `min_{w2 ∈ B_W} ‖Φ w2 − (r + Ψ w1)‖_ν`.
    fn residual(&self, w1: &DVector<f64>, w_radius: f64) -> f64 {
        let target = &self.rewards + &self.next * w1;
        let mut b = DVector::zeros(self.phi.ncols());
        for (i, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                b.axpy(w * target[i], &self.phi.row(i).transpose(), 1.0);
            }
        }
        let sol = self.solver.solve(&b, w_radius);
        let fit = &self.phi * &sol.theta - target;
        weighted_l2(&self.weights, fit.as_slice())
    }
}

/// Approximate linear Bellman completeness error of `phi` under `ν`.
///
/// The inner minimization is an exact ball-constrained weighted least
/// squares; the outer maximization is a lower bound over [`lbc_probes`].
/// Because the inner residual is a convex function of `w1`, its maximum
/// over the ball is attained on the sphere, which is where the probes live.
pub fn exact_lbc_error(
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    phi: &dyn FeatureMap,
    pi_e: &Policy,
    w_radius: f64,
    n_probes: usize,
) -> Result<LbcReport> {
    let probes = lbc_probes(phi.dim(), n_probes, w_radius)?;
    lbc_error_over_probes(mdp, nu, phi, pi_e, w_radius, &probes)
}

/// [`exact_lbc_error`] over an explicit probe list.
pub fn lbc_error_over_probes(
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    phi: &dyn FeatureMap,
    pi_e: &Policy,
    w_radius: f64,
    probes: &[DVector<f64>],
) -> Result<LbcReport> {
    if !(w_radius > 0.0) {
        return Err(Error::InvalidRadius(w_radius));
    }
    let table = phi.tabulate();
    let ctx = LbcContext::new(mdp, nu, &table, &table, pi_e)?;
    let mut epsilon = 0.0;
    let mut worst = DVector::zeros(table.dim());
    for p in probes {
        let r = ctx.residual(p, w_radius);
        if r > epsilon {
            epsilon = r;
            worst = p.clone();
        }
    }
    Ok(LbcReport {
        epsilon,
        worst_probe: worst,
        degenerate_covariance: ctx.solver.rank_deficient(),
        probes_evaluated: probes.len(),
    })
}

/// Inherent Bellman error of `F = {wᵀφ : φ ∈ class, ‖w‖ ≤ W}`:
/// `max_{f ∈ F} min_{g ∈ F} ‖g − T f‖²_ν`, with `f` ranging over the probe
/// set of each member.
pub fn inherent_bellman_error(
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    pi_e: &Policy,
    class: &[&dyn FeatureMap],
    w_radius: f64,
    n_probes: usize,
) -> Result<f64> {
    if class.is_empty() {
        return Err(Error::InvalidConfig("empty feature class".into()));
    }
    let tables: Vec<FeatureTable> = class.iter().map(|f| f.tabulate()).collect();
    let mut worst = 0.0;
    for source in &tables {
        let probes = lbc_probes(source.dim(), n_probes, w_radius)?;
        let contexts: Vec<LbcContext> = tables
            .iter()
            .map(|target| LbcContext::new(mdp, nu, source, target, pi_e))
            .collect::<Result<_>>()?;
        for p in &probes {
            let best = contexts
                .iter()
                .map(|c| c.residual(p, w_radius))
                .fold(f64::INFINITY, f64::min);
            worst = f64::max(worst, best * best);
        }
    }
    Ok(worst)
}

/// Relative condition number with its diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct RelativeCondition {
    /// `sup_x xᵀ Σ_{d^π_{p0}} x / xᵀ Σ_ν x`; `+inf` if `Σ_ν` is singular.
    pub value: f64,
    pub denominator_lambda_min: f64,
    pub singular: bool,
}

/// Largest generalized eigenvalue of `(E_{d^{π_e}_{p0}}[φφᵀ], Σ_ν(φ))`,
/// computed through the whitened matrix `Σ_ν^{-1/2} A Σ_ν^{-1/2}`.
pub fn relative_condition_number(
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    pi_e: &Policy,
    p0: &[f64],
    phi: &dyn FeatureMap,
) -> Result<RelativeCondition> {
    nu.check_mdp(mdp)?;
    let table = phi.tabulate();
    let d = occupancy(mdp, pi_e, p0)?;
    let numerator = weighted_gram(&table, d.weights());
    let denominator = SymmetricSpectrum::new(&weighted_gram(&table, nu.weights()));
    let lambda_min = denominator.min();
    if lambda_min <= denominator.threshold() {
        return Ok(RelativeCondition { value: f64::INFINITY, denominator_lambda_min: lambda_min, singular: true });
    }
    let inv_sqrt = DVector::from_iterator(
        denominator.values.len(),
        denominator.values.iter().map(|&v| 1.0 / libm::sqrt(v)),
    );
    let whitener = &denominator.vectors * DMatrix::from_diagonal(&inv_sqrt) * denominator.vectors.transpose();
    let whitened = &whitener * numerator * &whitener;
    let value = SymmetricSpectrum::new(&whitened).max();
    Ok(RelativeCondition { value, denominator_lambda_min: lambda_min, singular: false })
}

/// Residual of the generalized performance-difference identity
///
/// `V^π_{p0} − E_{p0}[f(s, π')] = (1/(1−γ)) E_{d^π_{p0}}[T^{π'} f − f(s, π')]`,
///
/// with both sides evaluated exactly.
pub fn pdl_residual(
    mdp: &FiniteMdp,
    pi: &Policy,
    pi_prime: &Policy,
    p0: &[f64],
    f: &ValueFunction,
) -> Result<f64> {
    pi_prime.check_mdp(mdp)?;
    let v_pi = exact_value(mdp, pi)?.value_at(pi, p0);
    let lhs = v_pi - f.value_at(pi_prime, p0);
    let d = occupancy(mdp, pi, p0)?;
    let tf = apply_bellman(mdp, pi_prime, f)?;
    let f_pi = f.v_under(pi_prime);
    let mut acc = 0.0;
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            acc += d.weight(s, a) * (tf.q(s, a) - f_pi[s]);
        }
    }
    let rhs = acc / (1.0 - mdp.gamma());
    Ok((lhs - rhs).abs())
}
