//! Feature maps `φ(s, a) ∈ R^d`, covariance spectra, and exact expected
//! next features.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, SymmetricSpectrum};
use crate::mdp::{FiniteMdp, OfflineDataset, Policy, StateActionDist};
use crate::rng::{self, stream};

/// Tolerance on the unit feature-norm bound.
pub const FEATURE_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    OneHot,
    LowRankTruth,
    RandomFixed,
    Trainable,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::OneHot => "one-hot",
            FeatureKind::LowRankTruth => "low-rank-truth",
            FeatureKind::RandomFixed => "random-fixed",
            FeatureKind::Trainable => "trainable",
        }
    }
}

/// A representation over an enumerable state-action space.
pub trait FeatureMap {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn dim(&self) -> usize;
    fn kind(&self) -> FeatureKind;

    /// Writes `φ(s, a)` into `out` (length `dim`).
    fn write_features(&self, s: usize, a: usize, out: &mut [f64]);

    fn evaluate(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_features(s, a, &mut out);
        out
    }

    /// Evaluates the map on every pair.
    fn tabulate(&self) -> FeatureTable {
        let (ns, na, d) = (self.num_states(), self.num_actions(), self.dim());
        let mut values = vec![0.0; ns * na * d];
        for s in 0..ns {
            for a in 0..na {
                let start = (s * na + a) * d;
                self.write_features(s, a, &mut values[start..start + d]);
            }
        }
        FeatureTable { num_states: ns, num_actions: na, dim: d, values, kind: self.kind() }
    }
}

/// Feature values stored for every `(s, a)`, row-major by pair index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    num_states: usize,
    num_actions: usize,
    dim: usize,
    values: Vec<f64>,
    kind: FeatureKind,
}

impl FeatureTable {
    /// Builds a table and checks `‖φ(s, a)‖₂ ≤ 1`.
    pub fn from_values(
        num_states: usize,
        num_actions: usize,
        dim: usize,
        values: Vec<f64>,
        kind: FeatureKind,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || dim == 0 {
            return Err(Error::InvalidDimension(format!(
                "feature table {num_states}x{num_actions}x{dim}"
            )));
        }
        if values.len() != num_states * num_actions * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature values", num_states * num_actions * dim),
                found: format!("{}", values.len()),
            });
        }
        let table = Self { num_states, num_actions, dim, values, kind };
        table.check_norms()?;
        Ok(table)
    }

    pub fn from_matrix(
        num_states: usize,
        num_actions: usize,
        matrix: &DMatrix<f64>,
        kind: FeatureKind,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(matrix.len());
        for i in 0..matrix.nrows() {
            values.extend(matrix.row(i).iter().copied());
        }
        Self::from_values(num_states, num_actions, matrix.ncols(), values, kind)
    }

    /// Tabular indicator features, `d = |S||A|`.
    pub fn one_hot(num_states: usize, num_actions: usize) -> Result<Self> {
        let d = num_states * num_actions;
        let mut values = vec![0.0; d * d];
        for i in 0..d {
            values[i * d + i] = 1.0;
        }
        Self::from_values(num_states, num_actions, d, values, FeatureKind::OneHot)
    }

    /// Seeded random features: entries uniform on `[-1, 1]`, rows rescaled
    /// by the largest row norm.
    pub fn random_fixed(seed: u64, num_states: usize, num_actions: usize, dim: usize) -> Result<Self> {
        let mut rng = rng::split(seed, stream::FEATURES);
        let n = num_states * num_actions * dim;
        let mut values: Vec<f64> = (0..n).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let max_norm = values
            .chunks(dim.max(1))
            .map(|r| libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()))
            .fold(0.0, f64::max);
        if max_norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= max_norm);
        }
        Self::from_values(num_states, num_actions, dim, values, FeatureKind::RandomFixed)
    }

    fn check_norms(&self) -> Result<()> {
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let norm = libm::sqrt(self.row(s, a).iter().map(|v| v * v).sum::<f64>());
                if !norm.is_finite() || norm > 1.0 + FEATURE_NORM_TOL {
                    return Err(Error::FeatureNorm { state: s, action: a, norm });
                }
            }
        }
        Ok(())
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.dim;
        &self.values[start..start + self.dim]
    }

    pub fn row_by_pair(&self, pair: usize) -> &[f64] {
        &self.values[pair * self.dim..(pair + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    /// `Φ` as a `|S||A| × d` matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.num_pairs(), self.dim, &self.values)
    }

    /// `φ(s, π) = Σ_a π(a | s) φ(s, a)`.
    pub fn policy_average(&self, s: usize, pi: &Policy) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for a in 0..self.num_actions {
            let p = pi.prob(s, a);
            if p != 0.0 {
                for (o, v) in out.iter_mut().zip(self.row(s, a)) {
                    *o += p * v;
                }
            }
        }
        out
    }

    /// `φ(·, π)` as a `|S| × d` matrix.
    pub fn policy_average_matrix(&self, pi: &Policy) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.num_states, self.dim);
        for s in 0..self.num_states {
            out.set_row(s, &self.policy_average(s, pi).transpose());
        }
        out
    }

    pub(crate) fn check_shape(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.num_states != num_states || self.num_actions != num_actions {
            return Err(Error::ShapeMismatch {
                expected: format!("features over {num_states}x{num_actions}"),
                found: format!("{}x{}", self.num_states, self.num_actions),
            });
        }
        Ok(())
    }
}

impl FeatureMap for FeatureTable {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> FeatureKind {
        self.kind
    }

    fn write_features(&self, s: usize, a: usize, out: &mut [f64]) {
        out.copy_from_slice(self.row(s, a));
    }

    fn tabulate(&self) -> FeatureTable {
        self.clone()
    }
}

/// Spectrum summary of a feature covariance `Σ(φ)` or `Σ̂(φ)`.
#[derive(Debug, Clone)]
pub struct CovarianceReport {
    pub matrix: DMatrix<f64>,
    /// Sorted descending; values within `1e-12` of zero are reported as zero.
    pub eigenvalues: Vec<f64>,
    pub lambda_min: f64,
    /// `λ_max / λ_min`, `+inf` when singular.
    pub condition_number: f64,
    /// `ln det Σ`, `-inf` when singular.
    pub logdet: f64,
}

impl CovarianceReport {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let spectrum = SymmetricSpectrum::new(&matrix);
        let eigenvalues: Vec<f64> =
            spectrum.values.iter().map(|&v| linalg::clamp_eigenvalue(v)).collect();
        let lambda_min = eigenvalues.last().copied().unwrap_or(0.0);
        let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);
        let condition_number =
            if lambda_min > 0.0 { lambda_max / lambda_min } else { f64::INFINITY };
        let logdet = linalg::logdet_psd(&spectrum);
        Self { matrix, eigenvalues, lambda_min, condition_number, logdet }
    }
}

/// Where covariance moments come from.
#[derive(Debug, Clone, Copy)]
pub enum CovarianceSource<'a> {
    /// Empirical `Σ̂ = (1/N) Σ φ φᵀ`.
    Dataset(&'a OfflineDataset),
    /// Exact `Σ = E_ν[φ φᵀ]`.
    Distribution(&'a StateActionDist),
}

/// Second-moment matrix of `phi` weighted per pair.
pub fn weighted_gram(phi: &FeatureTable, pair_weights: &[f64]) -> DMatrix<f64> {
    let d = phi.dim;
    let mut sigma = DMatrix::zeros(d, d);
    for (pair, &w) in pair_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = phi.row_by_pair(pair);
        for i in 0..d {
            let wi = w * row[i];
            if wi == 0.0 {
                continue;
            }
            for j in 0..d {
                sigma[(i, j)] += wi * row[j];
            }
        }
    }
    sigma
}

/// Empirical pair frequencies of a dataset.
pub fn pair_frequencies(data: &OfflineDataset, num_states: usize, num_actions: usize) -> Vec<f64> {
    let mut freq = vec![0.0; num_states * num_actions];
    for t in data.transitions() {
        freq[t.state * num_actions + t.action] += 1.0;
    }
    let n = data.len().max(1) as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    freq
}

/// Covariance spectrum of `phi` under a dataset or a distribution.
pub fn covariance(phi: &dyn FeatureMap, source: CovarianceSource<'_>) -> Result<CovarianceReport> {
    let table = phi.tabulate();
    let weights = match source {
        CovarianceSource::Dataset(data) => {
            if data.is_empty() {
                return Err(Error::InvalidDataset("empty dataset".into()));
            }
            pair_frequencies(data, table.num_states, table.num_actions)
        }
        CovarianceSource::Distribution(nu) => {
            table.check_shape(nu.num_states(), nu.num_actions())?;
            nu.weights().to_vec()
        }
    };
    Ok(CovarianceReport::from_matrix(weighted_gram(&table, &weights)))
}

/// `γ E_{s' ~ P(s, a)} φ(s', π)` for every pair, as a `|S||A| × d` matrix.
pub fn expected_next_feature(mdp: &FiniteMdp, phi: &dyn FeatureMap, pi: &Policy) -> Result<DMatrix<f64>> {
    let table = phi.tabulate();
    table.check_shape(mdp.num_states(), mdp.num_actions())?;
    pi.check_mdp(mdp)?;
    let next = table.policy_average_matrix(pi);
    let mut out = DMatrix::zeros(mdp.num_pairs(), table.dim);
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let i = mdp.pair_index(s, a);
            for (sn, &p) in mdp.transition_row(s, a).iter().enumerate() {
                if p != 0.0 {
                    for j in 0..table.dim {
                        out[(i, j)] += mdp.gamma() * p * next[(sn, j)];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_random_tabular_mdp, sample_offline_dataset};

    #[test]
    fn one_hot_uniform_covariance() {
        let phi = FeatureTable::one_hot(2, 2).unwrap();
        let nu = StateActionDist::uniform(2, 2).unwrap();
        let rep = covariance(&phi, CovarianceSource::Distribution(&nu)).unwrap();
        for v in &rep.eigenvalues {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!((rep.lambda_min - 0.25).abs() < 1e-15);
        assert!((rep.logdet - 4.0 * libm::log(0.25)).abs() < 1e-12);
        assert!((rep.condition_number - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_feature_is_singular() {
        let values = [1.0, 0.0, 0.0].repeat(4);
        let phi = FeatureTable::from_values(2, 2, 3, values, FeatureKind::RandomFixed).unwrap();
        let nu = StateActionDist::uniform(2, 2).unwrap();
        let rep = covariance(&phi, CovarianceSource::Distribution(&nu)).unwrap();
        assert_eq!(rep.lambda_min, 0.0);
        assert_eq!(rep.logdet, f64::NEG_INFINITY);
        assert_eq!(rep.condition_number, f64::INFINITY);
    }

    #[test]
    fn feature_norm_is_enforced() {
        let err = FeatureTable::from_values(1, 1, 2, vec![1.0, 0.5], FeatureKind::RandomFixed);
        assert!(matches!(err, Err(Error::FeatureNorm { .. })));
    }

    #[test]
    fn random_features_respect_norm_bound_and_eigen_range() {
        let phi = FeatureTable::random_fixed(4, 5, 3, 6).unwrap();
        for s in 0..5 {
            for a in 0..3 {
                let n: f64 = phi.row(s, a).iter().map(|v| v * v).sum();
                assert!(libm::sqrt(n) <= 1.0 + 1e-9);
            }
        }
        let nu = StateActionDist::uniform(5, 3).unwrap();
        let rep = covariance(&phi, CovarianceSource::Distribution(&nu)).unwrap();
        assert!(rep.eigenvalues.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let sym = &rep.matrix - rep.matrix.transpose();
        assert!(sym.amax() <= 1e-12);
    }

    #[test]
    fn expected_next_feature_deterministic_and_myopic() {
        let mdp = make_random_tabular_mdp(1, 4, 2, 0.8, false).unwrap();
        let phi = FeatureTable::random_fixed(2, 4, 2, 3).unwrap();
        let pi = Policy::random(3, 4, 2).unwrap();
        let next = expected_next_feature(&mdp, &phi, &pi).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                let sn = (0..4).find(|&n| mdp.prob(s, a, n) == 1.0).unwrap();
                let expect = phi.policy_average(sn, &pi) * 0.8;
                let got = next.row(mdp.pair_index(s, a)).transpose();
                assert!((got - expect).amax() < 1e-15);
            }
        }
        let myopic = expected_next_feature(&mdp.with_gamma(0.0).unwrap(), &phi, &pi).unwrap();
        assert!(myopic.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empirical_covariance_converges() {
        let mdp = make_random_tabular_mdp(5, 4, 2, 0.9, true).unwrap();
        let nu = StateActionDist::uniform(4, 2).unwrap();
        let phi = FeatureTable::random_fixed(6, 4, 2, 4).unwrap();
        let data = sample_offline_dataset(&mdp, &nu, 100_000, 2).unwrap();
        let exact = covariance(&phi, CovarianceSource::Distribution(&nu)).unwrap();
        let emp = covariance(&phi, CovarianceSource::Dataset(&data)).unwrap();
        assert!(linalg::spectral_norm(&(emp.matrix - exact.matrix)) <= 0.02);
    }
}
