use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{FiniteMdp, StateActionDist};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// One offline sample `(s, a, r, s')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// `N` i.i.d. tuples drawn from a sampling distribution `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    transitions: Vec<Transition>,
    source_seed: u64,
    source_dist: StateActionDist,
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, source_seed: u64, source_dist: StateActionDist) -> Self {
        Self { transitions, source_seed, source_dist }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn source_dist(&self) -> &StateActionDist {
        &self.source_dist
    }

    /// Checks indices against `mdp` and that every reward equals
    /// `r(s, a)` exactly.
    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        self.source_dist.check_mdp(mdp)?;
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state >= mdp.num_states()
                || t.action >= mdp.num_actions()
                || t.next_state >= mdp.num_states()
            {
                return Err(Error::InvalidDataset(format!("tuple {i} has an out-of-range index")));
            }
            let expected = mdp.reward(t.state, t.action);
            if t.reward.to_bits() != expected.to_bits() {
                return Err(Error::InvalidDataset(format!(
                    "tuple {i} has reward {} but r({}, {}) = {expected}",
                    t.reward, t.state, t.action
                )));
            }
        }
        Ok(())
    }

    /// The first `n` tuples.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { transitions: self.transitions[..n].to_vec(), ..self.clone() }
    }

    /// Tuples at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            transitions: indices.iter().map(|&i| self.transitions[i]).collect(),
            ..self.clone()
        }
    }

    /// Random split into two halves (the first gets the extra tuple when
    /// the length is odd). Index sets are kept sorted.
    pub fn split_in_half(&self, seed: u64) -> DatasetSplit {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::split(seed, stream::SPLIT));
        let half = self.len().div_ceil(2);
        let mut first_indices = order[..half].to_vec();
        let mut second_indices = order[half..].to_vec();
        first_indices.sort_unstable();
        second_indices.sort_unstable();
        DatasetSplit {
            first: self.subset(&first_indices),
            second: self.subset(&second_indices),
            first_indices,
            second_indices,
        }
    }
}

/// Two disjoint halves of a dataset with the indices each one took.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub first: OfflineDataset,
    pub second: OfflineDataset,
    pub first_indices: Vec<usize>,
    pub second_indices: Vec<usize>,
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], u: f64) -> usize {
    let target = u * cdf[cdf.len() - 1];
    let idx = cdf.partition_point(|&c| c <= target);
    // Never land on a zero-probability tail entry.
    let mut idx = idx.min(cdf.len() - 1);
    while idx > 0 && cdf[idx] == cdf[idx - 1] {
        idx -= 1;
    }
    idx
}

/// Draws `n` tuples with `(s, a) ~ ν`, `r = r(s, a)`, `s' ~ P(· | s, a)`.
pub fn sample_offline_dataset(
    mdp: &FiniteMdp,
    nu: &StateActionDist,
    n: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    nu.check_mdp(mdp)?;
    if n == 0 {
        return Err(Error::InvalidDimension("dataset size must be positive".into()));
    }
    let total: f64 = nu.weights().iter().sum();
    if !(total > 0.0) {
        return Err(Error::EmptySupport);
    }
    let pair_cdf = cumulative(nu.weights());
    let row_cdfs: Vec<Vec<f64>> =
        mdp.transition().chunks(mdp.num_states()).map(cumulative).collect();
    let mut rng = rng::split(seed, stream::DATASET);
    let mut transitions = Vec::with_capacity(n);
    for _ in 0..n {
        let pair = draw(&pair_cdf, rng.random());
        let (state, action) = (pair / mdp.num_actions(), pair % mdp.num_actions());
        let next_state = draw(&row_cdfs[pair], rng.random());
        transitions.push(Transition { state, action, reward: mdp.reward(state, action), next_state });
    }
    Ok(OfflineDataset::new(transitions, seed, nu.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::make_random_tabular_mdp;

    #[test]
    fn point_mass_sampling() {
        let mdp = make_random_tabular_mdp(1, 4, 2, 0.9, true).unwrap();
        let nu = StateActionDist::point_mass(4, 2, 2, 1).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 1000, 5).unwrap();
        assert!(data.transitions().iter().all(|t| t.state == 2 && t.action == 1));
        data.validate(&mdp).unwrap();
    }

    #[test]
    fn deterministic_successors() {
        let mdp = make_random_tabular_mdp(2, 5, 3, 0.9, false).unwrap();
        let nu = StateActionDist::uniform(5, 3).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 500, 1).unwrap();
        for t in data.transitions() {
            assert_eq!(mdp.prob(t.state, t.action, t.next_state), 1.0);
        }
    }

    #[test]
    fn empirical_frequencies_match_uniform() {
        let mdp = make_random_tabular_mdp(4, 4, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 50_000, 9).unwrap();
        let mut counts = [0usize; 8];
        for t in data.transitions() {
            counts[mdp.pair_index(t.state, t.action)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 50_000.0 - 0.125).abs() <= 0.02);
        }
    }

    #[test]
    fn sampling_is_a_pure_function_of_inputs() {
        let mdp = make_random_tabular_mdp(4, 3, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let a = sample_offline_dataset(&mdp, &nu, 100, 3).unwrap();
        let b = sample_offline_dataset(&mdp, &nu, 100, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_offline_dataset(&mdp, &nu, 0, 3).unwrap_err(),
                   Error::InvalidDimension("dataset size must be positive".into()));
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let mdp = make_random_tabular_mdp(4, 3, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 101, 3).unwrap();
        let split = data.split_in_half(8);
        assert_eq!(split.first.len(), 51);
        assert_eq!(split.second.len(), 50);
        let mut all: Vec<usize> =
            split.first_indices.iter().chain(&split.second_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn validate_flags_reward_mismatch() {
        let mdp = make_random_tabular_mdp(4, 3, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(3, 2).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 10, 3).unwrap();
        let mut tuples = data.transitions().to_vec();
        tuples[4].reward += 0.25;
        let bad = OfflineDataset::new(tuples, 3, nu);
        assert!(matches!(bad.validate(&mdp), Err(Error::InvalidDataset(_))));
    }
}
