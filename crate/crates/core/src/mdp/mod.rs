//! Finite discounted MDPs, policies, state-action distributions and
//! offline datasets.

mod dataset;
mod synthetic;

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

pub use dataset::{sample_offline_dataset, DatasetSplit, OfflineDataset, Transition};
pub use synthetic::{make_low_rank_mdp, make_random_tabular_mdp, LowRankMdp};

/// Tolerance for "sums to one" checks on stochastic vectors.
pub const MASS_TOL: f64 = 1e-12;

fn check_stochastic(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidEntry(what.to_string()));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > MASS_TOL {
        return Err(Error::NotNormalized { what: what.to_string(), sum });
    }
    Ok(())
}

fn check_dims(num_states: usize, num_actions: usize) -> Result<()> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::InvalidDimension(format!(
            "{num_states} states and {num_actions} actions; both must be positive"
        )));
    }
    Ok(())
}

fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            expected: format!("{what} of length {expected}"),
            found: format!("length {found}"),
        });
    }
    Ok(())
}

/// Draws a point from the flat Dirichlet distribution on the simplex.
pub(crate) fn dirichlet_flat(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| {
            // 1 - U lies in (0, 1], so the log is finite.
            let u: f64 = rng.random();
            -libm::log(1.0 - u)
        })
        .collect();
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    } else {
        v.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    }
    v
}

/// A discounted MDP with enumerable states and actions.
///
/// Transitions are stored densely as `P[s][a][s']`, rewards as `r[s][a]`.
/// `gamma` is accepted in `[0, 1)`; the synthetic generators restrict it to
/// `(0, 1)`, while the closed interval end at zero supports one-step
/// (contextual bandit) variants of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    initial_dist: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidGamma(gamma));
        }
        let pairs = num_states * num_actions;
        check_len("transition tensor", pairs * num_states, transition.len())?;
        check_len("reward table", pairs, reward.len())?;
        check_len("initial distribution", num_states, initial_dist.len())?;
        for s in 0..num_states {
            for a in 0..num_actions {
                let start = (s * num_actions + a) * num_states;
                check_stochastic(
                    &format!("transition row ({s}, {a})"),
                    &transition[start..start + num_states],
                )?;
                let r = reward[s * num_actions + a];
                if !r.is_finite() || r.abs() > 1.0 {
                    return Err(Error::RewardOutOfBounds { state: s, action: a, value: r });
                }
            }
        }
        check_stochastic("initial distribution", &initial_dist)?;
        Ok(Self { num_states, num_actions, transition, reward, gamma, initial_dist })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// Row-major index of `(s, a)`.
    #[inline]
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.pair_index(s, a) * self.num_states + next]
    }

    /// `P(· | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.pair_index(s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.pair_index(s, a)]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Whether every transition row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        self.transition.chunks(self.num_states).all(|row| row.iter().any(|&p| p == 1.0))
    }

    /// Same instance with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidGamma(gamma));
        }
        Ok(Self { gamma, ..self.clone() })
    }

    /// Same instance with a different reward table.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            reward,
            self.gamma,
            self.initial_dist.clone(),
        )
    }

    /// Same instance with a different initial distribution.
    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.gamma,
            initial_dist,
        )
    }

    /// FNV-1a digest of the exact bit patterns of every field. Dataset files
    /// record it so that loading against the wrong instance is detected.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv64::new();
        h.write_u64(self.num_states as u64);
        h.write_u64(self.num_actions as u64);
        h.write_u64(self.gamma.to_bits());
        for v in self.transition.iter().chain(&self.reward).chain(&self.initial_dist) {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for byte in v.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// A stationary stochastic policy `π(a | s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        check_len("policy table", num_states * num_actions, probs.len())?;
        for s in 0..num_states {
            check_stochastic(
                &format!("policy row {s}"),
                &probs[s * num_actions..(s + 1) * num_actions],
            )?;
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        let p = 1.0 / num_actions as f64;
        Ok(Self { num_states, num_actions, probs: vec![p; num_states * num_actions] })
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        check_dims(actions.len(), num_actions)?;
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidDimension(format!("action {a} in state {s}")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(Self { num_states: actions.len(), num_actions, probs })
    }

    /// Seeded random policy with flat-Dirichlet rows.
    pub fn random(seed: u64, num_states: usize, num_actions: usize) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        let mut rng = crate::rng::split(seed, crate::rng::stream::POLICY);
        let mut probs = Vec::with_capacity(num_states * num_actions);
        for _ in 0..num_states {
            probs.extend(dirichlet_flat(&mut rng, num_actions));
        }
        Ok(Self { num_states, num_actions, probs })
    }

    /// Softmax over a Q table (row-major `[s][a]`) with the given inverse
    /// temperature. Zero gives the uniform policy; negative values prefer
    /// low-valued actions.
    pub fn softmax(
        num_states: usize,
        num_actions: usize,
        q: &[f64],
        inverse_temperature: f64,
    ) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        check_len("Q table", num_states * num_actions, q.len())?;
        let mut probs = Vec::with_capacity(q.len());
        for row in q.chunks(num_actions) {
            let scaled: Vec<f64> = row.iter().map(|v| inverse_temperature * v).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scaled.iter().map(|v| libm::exp(v - max)).collect();
            let z: f64 = exps.iter().sum();
            probs.extend(exps.iter().map(|e| e / z));
        }
        Ok(Self { num_states, num_actions, probs })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub(crate) fn check_mdp(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::ShapeMismatch {
                expected: format!("policy over {}x{}", mdp.num_states(), mdp.num_actions()),
                found: format!("{}x{}", self.num_states, self.num_actions),
            });
        }
        Ok(())
    }
}

/// A probability distribution over state-action pairs, row-major `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateActionDist {
    num_states: usize,
    num_actions: usize,
    weights: Vec<f64>,
}

impl StateActionDist {
    pub fn new(num_states: usize, num_actions: usize, weights: Vec<f64>) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        check_len("state-action weights", num_states * num_actions, weights.len())?;
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidEntry("state-action weights".to_string()));
        }
        let sum: f64 = weights.iter().sum();
        if sum == 0.0 {
            return Err(Error::EmptySupport);
        }
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(Error::NotNormalized { what: "state-action weights".to_string(), sum });
        }
        Ok(Self { num_states, num_actions, weights })
    }

    /// Normalizes nonnegative weights to unit mass.
    pub fn from_unnormalized(
        num_states: usize,
        num_actions: usize,
        mut weights: Vec<f64>,
    ) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        check_len("state-action weights", num_states * num_actions, weights.len())?;
        if weights.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidEntry("state-action weights".to_string()));
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::EmptySupport);
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(Self { num_states, num_actions, weights })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        let n = num_states * num_actions;
        Ok(Self { num_states, num_actions, weights: vec![1.0 / n as f64; n] })
    }

    pub fn point_mass(num_states: usize, num_actions: usize, s: usize, a: usize) -> Result<Self> {
        check_dims(num_states, num_actions)?;
        if s >= num_states || a >= num_actions {
            return Err(Error::InvalidDimension(format!("pair ({s}, {a})")));
        }
        let mut weights = vec![0.0; num_states * num_actions];
        weights[s * num_actions + a] = 1.0;
        Ok(Self { num_states, num_actions, weights })
    }

    /// `ν(s, a) = p(s) π(a | s)`.
    pub fn from_state_policy(state_dist: &[f64], policy: &Policy) -> Result<Self> {
        check_len("state distribution", policy.num_states(), state_dist.len())?;
        check_stochastic("state distribution", state_dist)?;
        let mut weights = Vec::with_capacity(policy.probs().len());
        for (s, p) in state_dist.iter().enumerate() {
            weights.extend(policy.row(s).iter().map(|pa| p * pa));
        }
        Self::from_unnormalized(policy.num_states(), policy.num_actions(), weights)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn weight(&self, s: usize, a: usize) -> f64 {
        self.weights[s * self.num_actions + a]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.weights.chunks(self.num_actions).map(|row| row.iter().sum()).collect()
    }

    pub(crate) fn check_mdp(&self, mdp: &FiniteMdp) -> Result<()> {
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::ShapeMismatch {
                expected: format!("distribution over {}x{}", mdp.num_states(), mdp.num_actions()),
                found: format!("{}x{}", self.num_states, self.num_actions),
            });
        }
        Ok(())
    }
}

/// Pointwise `w·a + (1 − w)·b`.
pub fn mixture_dist(a: &StateActionDist, b: &StateActionDist, w: f64) -> Result<StateActionDist> {
    if a.num_states != b.num_states || a.num_actions != b.num_actions {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.num_states, a.num_actions),
            found: format!("{}x{}", b.num_states, b.num_actions),
        });
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidConfig(format!("mixture weight {w} outside [0, 1]")));
    }
    if w == 1.0 {
        return Ok(a.clone());
    }
    if w == 0.0 {
        return Ok(b.clone());
    }
    let weights = a.weights.iter().zip(&b.weights).map(|(x, y)| w * x + (1.0 - w) * y).collect();
    StateActionDist::from_unnormalized(a.num_states, a.num_actions, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_rows_and_rewards() {
        let err = FiniteMdp::new(1, 1, vec![0.9], vec![0.0], 0.5, vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { .. }));
        let err = FiniteMdp::new(1, 1, vec![1.0], vec![1.5], 0.5, vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::RewardOutOfBounds { .. }));
        let err = FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidGamma(_)));
        let err = FiniteMdp::new(0, 1, vec![], vec![], 0.5, vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidDimension(_)));
    }

    #[test]
    fn mixture_endpoints_and_idempotence() {
        let a = StateActionDist::from_unnormalized(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = StateActionDist::uniform(2, 2).unwrap();
        assert_eq!(mixture_dist(&a, &b, 1.0).unwrap(), a);
        let same = mixture_dist(&a, &a, 0.5).unwrap();
        for (x, y) in same.weights().iter().zip(a.weights()) {
            assert!((x - y).abs() < 1e-15);
        }
        let c = StateActionDist::uniform(3, 2).unwrap();
        assert!(matches!(mixture_dist(&a, &c, 0.5), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_limits() {
        let q = vec![1.0, 0.0, 0.0, 2.0];
        let uniform = Policy::softmax(2, 2, &q, 0.0).unwrap();
        assert!(uniform.probs().iter().all(|&p| (p - 0.5).abs() < 1e-15));
        let greedy = Policy::softmax(2, 2, &q, 50.0).unwrap();
        assert!(greedy.prob(0, 0) > 0.999 && greedy.prob(1, 1) > 0.999);
    }

    #[test]
    fn checksum_detects_reward_change() {
        let m = make_random_tabular_mdp(3, 3, 2, 0.9, true).unwrap();
        let mut r = m.rewards().to_vec();
        r[0] = -r[0] * 0.5;
        let m2 = m.with_rewards(r).unwrap();
        assert_ne!(m.checksum(), m2.checksum());
        assert_eq!(m.checksum(), m.clone().checksum());
    }
}
