//! Dense linear-algebra helpers shared by the oracles, LSPE and the
//! witness fit: symmetric spectra, pseudoinverse solves, norm-ball
//! constrained least squares and spectral-norm projection.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

/// Relative threshold below which an eigen/singular value is treated as
/// zero by pseudoinverse solves.
pub const PINV_TOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted in descending
/// order. Eigenvectors are the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricSpectrum {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymmetricSpectrum {
    /// Decomposes `matrix`, symmetrizing it first so tiny asymmetries from
    /// accumulation order cannot leak into the spectrum.
    pub fn new(matrix: &DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        let sym = (matrix + matrix.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        // Stable sort keeps the solver's order among equal eigenvalues.
        order.sort_by(|&i, &j| {
            eig.eigenvalues[j]
                .partial_cmp(&eig.eigenvalues[i])
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let mut vectors = DMatrix::zeros(n, n);
        for (col, &i) in order.iter().enumerate() {
            let mut v = eig.eigenvectors.column(i).into_owned();
            // Sign convention: the largest-magnitude entry is positive.
            let mut pivot = 0;
            for k in 1..n {
                if v[k].abs() > v[pivot].abs() {
                    pivot = k;
                }
            }
            if n > 0 && v[pivot] < 0.0 {
                v.neg_mut();
            }
            vectors.set_column(col, &v);
        }
        Self { values, vectors }
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    /// Index of the eigenvector used for the minimum eigenvalue: the first
    /// one, in solver order, whose eigenvalue ties with the minimum.
    pub fn min_index(&self) -> usize {
        let n = self.values.len();
        let min = self.min();
        let tol = 1e-12 * self.max().abs().max(1.0);
        (0..n).find(|&i| (self.values[i] - min).abs() <= tol).unwrap_or(n - 1)
    }

    /// Pseudoinverse threshold for this spectrum.
    pub fn threshold(&self) -> f64 {
        PINV_TOL * self.max().abs().max(1.0)
    }

    /// Number of eigenvalues above the pseudoinverse threshold.
    pub fn rank(&self) -> usize {
        let tol = self.threshold();
        self.values.iter().filter(|&&v| v > tol).count()
    }

    /// Moore-Penrose solve `A x = b` for the decomposed `A`.
    pub fn pinv_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let tol = self.threshold();
        let coeffs = self.vectors.tr_mul(b);
        let mut x = DVector::zeros(b.len());
        for (i, &lambda) in self.values.iter().enumerate() {
            if lambda > tol {
                x.axpy(coeffs[i] / lambda, &self.vectors.column(i), 1.0);
            }
        }
        x
    }

    /// Moore-Penrose solve `A X = B` column by column.
    pub fn pinv_solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let col = self.pinv_solve(&b.column(j).into_owned());
            x.set_column(j, &col);
        }
        x
    }
}

/// Outcome of a ball-constrained least-squares solve.
#[derive(Debug, Clone)]
pub struct BallSolution {
    pub theta: DVector<f64>,
    /// Tikhonov multiplier at the solution (zero when the constraint is
    /// inactive).
    pub multiplier: f64,
    pub constrained: bool,
}

/// Solver for `min_θ θᵀGθ − 2θᵀb  s.t. ‖θ‖₂ ≤ W` with a fixed Gram matrix
/// `G` and many right-hand sides.
///
/// The unconstrained minimum-norm solution is taken from the
/// pseudoinverse. When it leaves the ball the multiplier `μ` of the
/// secular equation `‖(G + μI)⁻¹ b‖ = W` is found by bisection.
#[derive(Debug, Clone)]
pub struct BallLeastSquares {
    spectrum: SymmetricSpectrum,
}

impl BallLeastSquares {
    pub fn new(gram: &DMatrix<f64>) -> Self {
        Self { spectrum: SymmetricSpectrum::new(gram) }
    }

    pub fn spectrum(&self) -> &SymmetricSpectrum {
        &self.spectrum
    }

    pub fn rank_deficient(&self) -> bool {
        self.spectrum.rank() < self.spectrum.values.len()
    }

    pub fn solve(&self, b: &DVector<f64>, radius: f64) -> BallSolution {
        let spec = &self.spectrum;
        let tol = spec.threshold();
        let coeffs = spec.vectors.tr_mul(b);
        let unconstrained = spec.pinv_solve(b);
        if unconstrained.norm() <= radius {
            return BallSolution { theta: unconstrained, multiplier: 0.0, constrained: false };
        }
        let lambdas: Vec<f64> =
            spec.values.iter().map(|&l| if l > tol { l } else { 0.0 }).collect();
        let norm_at = |mu: f64| -> f64 {
            let mut acc = 0.0;
            for (c, l) in coeffs.iter().zip(&lambdas) {
                let t = c / (l + mu);
                acc += t * t;
            }
            libm::sqrt(acc)
        };
        let mut lo = 0.0;
        let mut hi = coeffs.norm() / radius;
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if norm_at(mid) > radius {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo) <= 1e-15 * hi {
                break;
            }
        }
        let mu = hi;
        let mut theta = DVector::zeros(b.len());
        for (i, l) in lambdas.iter().enumerate() {
            theta.axpy(coeffs[i] / (l + mu), &spec.vectors.column(i), 1.0);
        }
        BallSolution { theta, multiplier: mu, constrained: true }
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().fold(0.0, |a: f64, &s| a.max(s))
}

/// Clamps the singular values of `m` to at most `bound`.
pub fn project_spectral(m: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    if svd.singular_values.iter().all(|&s| s <= bound) {
        return m.clone();
    }
    let u = svd.u.expect("left singular vectors requested");
    let v_t = svd.v_t.expect("right singular vectors requested");
    let clamped = svd.singular_values.map(|s| s.min(bound));
    u * DMatrix::from_diagonal(&clamped) * v_t
}

/// Log-determinant of a symmetric positive semidefinite matrix.
/// Eigenvalues within `1e-12` of zero are clamped to zero, and any
/// nonpositive eigenvalue yields `-inf`.
pub fn logdet_psd(spectrum: &SymmetricSpectrum) -> f64 {
    let mut acc = 0.0;
    for &v in &spectrum.values {
        let v = clamp_eigenvalue(v);
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += libm::log(v);
    }
    acc
}

/// Rounds eigenvalues in `[-1e-12, 1e-12]` to zero.
pub fn clamp_eigenvalue(v: f64) -> f64 {
    if v.abs() <= 1e-12 {
        0.0
    } else {
        v
    }
}

/// The first `n` primes.
pub fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut candidate = 2u64;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= candidate).all(|&p| candidate % p != 0) {
            out.push(candidate);
        }
        candidate += 1;
    }
    out
}

/// Radical inverse of `index` in `base` (van der Corput).
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut acc = 0.0;
    while index > 0 {
        acc += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    acc
}

/// Deterministic low-discrepancy directions on the unit sphere in `dim`
/// dimensions: Halton points mapped from the unit cube to `[-1, 1]^dim`
/// and normalized. Points that land too close to the origin are skipped.
pub fn halton_directions(dim: usize, count: usize) -> Vec<DVector<f64>> {
    let bases = primes(dim);
    let mut out = Vec::with_capacity(count);
    let mut index = 1u64;
    while out.len() < count {
        let v = DVector::from_iterator(
            dim,
            bases.iter().map(|&b| 2.0 * radical_inverse(index, b) - 1.0),
        );
        index += 1;
        let n = v.norm();
        if n > 1e-3 {
            out.push(v / n);
        }
    }
    out
}
