use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{check_dims, dirichlet_flat, FiniteMdp, MASS_TOL};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureTable};
use crate::rng::{self, stream};

fn check_generator_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidGamma(gamma));
    }
    Ok(())
}

/// Random tabular MDP. Rewards are uniform on `[-1, 1]`, the initial
/// distribution is flat-Dirichlet, and transition rows are flat-Dirichlet
/// (`stochastic`) or point masses on a uniformly drawn successor.
pub fn make_random_tabular_mdp(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    stochastic: bool,
) -> Result<FiniteMdp> {
    check_dims(num_states, num_actions)?;
    check_generator_gamma(gamma)?;
    let mut rng = rng::split(seed, stream::MDP);
    let pairs = num_states * num_actions;
    let mut transition = Vec::with_capacity(pairs * num_states);
    for _ in 0..pairs {
        if stochastic {
            transition.extend(dirichlet_flat(&mut rng, num_states));
        } else {
            let next = rng.random_range(0..num_states);
            transition.extend((0..num_states).map(|s| if s == next { 1.0 } else { 0.0 }));
        }
    }
    let reward = (0..pairs).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
    let initial_dist = dirichlet_flat(&mut rng, num_states);
    FiniteMdp::new(num_states, num_actions, transition, reward, gamma, initial_dist)
}

/// A low-rank MDP together with its generating factors.
///
/// `P(s' | s, a) = φ*(s, a)ᵀ μ(s')` and `r(s, a) = θᵀ φ*(s, a)`.
#[derive(Debug, Clone)]
pub struct LowRankMdp {
    pub mdp: FiniteMdp,
    /// `φ*`, with `max ‖φ*(s, a)‖₂ = 1`.
    pub features: FeatureTable,
    /// `μ` as a `d × |S|` matrix.
    pub mu: DMatrix<f64>,
    /// Reward weights `θ`.
    pub reward_weights: DVector<f64>,
}

/// Low-rank MDP whose generating feature is exactly linear Bellman
/// complete.
///
/// Rows of `φ*` are flat-Dirichlet points on the `d`-simplex and each
/// `μ_j` is a flat-Dirichlet distribution over next states, so every
/// `P(· | s, a)` is a convex combination of distributions. `φ*` is then
/// scaled by `c = 1 / max ‖φ*(s, a)‖₂` and `μ` by `1 / c`, which leaves the
/// kernel unchanged and makes the largest feature norm exactly one. The
/// reward weights are uniform on `[-1, 1]^d`, rescaled so that
/// `max |r| = 1`.
pub fn make_low_rank_mdp(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    feature_dim: usize,
    gamma: f64,
) -> Result<LowRankMdp> {
    check_dims(num_states, num_actions)?;
    check_generator_gamma(gamma)?;
    let pairs = num_states * num_actions;
    if feature_dim == 0 || feature_dim > pairs {
        return Err(Error::InvalidDimension(format!(
            "feature dimension {feature_dim} must lie in 1..={pairs}"
        )));
    }
    let d = feature_dim;
    let mut rng = rng::split(seed, stream::MDP);
    let mut phi = DMatrix::zeros(pairs, d);
    for i in 0..pairs {
        let row = dirichlet_flat(&mut rng, d);
        for j in 0..d {
            phi[(i, j)] = row[j];
        }
    }
    let mut mu = DMatrix::zeros(d, num_states);
    for j in 0..d {
        let row = dirichlet_flat(&mut rng, num_states);
        for s in 0..num_states {
            mu[(j, s)] = row[s];
        }
    }
    let max_norm = (0..pairs).map(|i| phi.row(i).norm()).fold(0.0, f64::max);
    if !(max_norm > 0.0) {
        return Err(Error::ConstructionFailure("all-zero feature rows".into()));
    }
    let scale = 1.0 / max_norm;
    phi *= scale;
    mu /= scale;

    let kernel = &phi * &mu;
    let mut transition = Vec::with_capacity(pairs * num_states);
    for i in 0..pairs {
        let row = kernel.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(Error::ConstructionFailure(format!(
                "row {i} of the factored kernel has mass {sum}"
            )));
        }
        transition.extend(row.iter().copied());
    }

    let mut theta = DVector::from_fn(d, |_, _| 2.0 * rng.random::<f64>() - 1.0);
    let raw = &phi * &theta;
    let peak = raw.amax();
    if peak > 0.0 {
        theta /= peak;
    }
    let reward: Vec<f64> =
        (&phi * &theta).iter().map(|r| r.clamp(-1.0, 1.0)).collect();
    let initial_dist = dirichlet_flat(&mut rng, num_states);
    let mdp = FiniteMdp::new(num_states, num_actions, transition, reward, gamma, initial_dist)?;
    let features = FeatureTable::from_matrix(num_states, num_actions, &phi, FeatureKind::LowRankTruth)?;
    Ok(LowRankMdp { mdp, features, mu, reward_weights: theta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_state_deterministic() {
        let m = make_random_tabular_mdp(7, 1, 1, 0.5, false).unwrap();
        assert_eq!(m.prob(0, 0, 0), 1.0);
    }

    #[test]
    fn generator_is_deterministic_in_seed() {
        let a = make_random_tabular_mdp(11, 4, 3, 0.9, true).unwrap();
        let b = make_random_tabular_mdp(11, 4, 3, 0.9, true).unwrap();
        assert_eq!(a, b);
        let c = make_random_tabular_mdp(12, 4, 3, 0.9, true).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stochastic_rows_sum_to_one() {
        let m = make_random_tabular_mdp(3, 5, 2, 0.9, true).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                let sum: f64 = m.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn generator_rejects_bad_inputs() {
        assert!(matches!(make_random_tabular_mdp(1, 0, 2, 0.9, true), Err(Error::InvalidDimension(_))));
        assert!(matches!(make_random_tabular_mdp(1, 2, 2, 0.0, true), Err(Error::InvalidGamma(_))));
        assert!(matches!(make_random_tabular_mdp(1, 2, 2, 1.0, true), Err(Error::InvalidGamma(_))));
        assert!(matches!(make_low_rank_mdp(1, 2, 2, 5, 0.9), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn low_rank_kernel_factorizes() {
        for (s, a, d) in [(6, 2, 3), (4, 2, 8), (20, 4, 8)] {
            let lr = make_low_rank_mdp(1, s, a, d, 0.9).unwrap();
            let phi = lr.features.matrix();
            let kernel = &phi * &lr.mu;
            for si in 0..s {
                for ai in 0..a {
                    let i = lr.mdp.pair_index(si, ai);
                    for n in 0..s {
                        assert!((lr.mdp.prob(si, ai, n) - kernel[(i, n)]).abs() <= 1e-12);
                    }
                    assert!(phi.row(i).norm() <= 1.0 + 1e-9);
                    let r = (phi.row(i) * &lr.reward_weights)[0];
                    assert!((lr.mdp.reward(si, ai) - r).abs() <= 1e-12);
                }
            }
        }
    }
}
