//! Small dense linear-algebra helpers shared by the GP, Nyström and
//! quadrature code paths.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SoberError};

/// Relative jitter first added to an ill-conditioned Gram diagonal.
pub const JITTER_BASE_REL: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX_REL: f64 = 1e-4;

/// Cholesky factorisation with an escalating diagonal jitter.
///
/// Adds `rel * trace / n` to the diagonal, starting at `rel = 1e-8` and
/// escalating tenfold up to `1e-4` before failing. Returns the factor and the
/// absolute jitter that was applied (0 when none was needed).
pub fn jittered_cholesky(
    mat: &DMatrix<f64>,
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let n = mat.nrows();
    assert_eq!(n, mat.ncols(), "cholesky input must be square");
    if let Some(chol) = nalgebra::Cholesky::new(mat.clone()) {
        return Ok((chol, 0.0));
    }
    let trace: f64 = mat.diagonal().sum();
    let unit = trace.abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut rel = JITTER_BASE_REL;
    while rel <= JITTER_MAX_REL * (1.0 + 1e-12) {
        let jitter = rel * unit;
        let mut jittered = mat.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = nalgebra::Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        rel *= 10.0;
    }
    Err(SoberError::Factorization { size: n })
}

/// Symmetric eigendecomposition with eigenvalues sorted in non-increasing
/// order and eigenvectors permuted to match.
pub fn sorted_symmetric_eigen(mat: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = nalgebra::SymmetricEigen::new(mat.clone());
    let m = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(m, order.iter().map(|&j| eig.eigenvalues[j]));
    let mut vectors = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Draws `count` indices with replacement, proportionally to `weights`.
///
/// Weights must be non-negative with a positive sum.
pub fn sample_indices_weighted<R: Rng>(
    weights: &DVector<f64>,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0, "weights must have positive mass");
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights.iter() {
        acc += w.max(0.0);
        cdf.push(acc);
    }
    let norm = acc;
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen::<f64>() * norm;
            match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) | Err(i) => i.min(cdf.len() - 1),
            }
        })
        .collect()
}

/// A vector of independent standard-normal draws.
pub fn standard_normal_vector<R: Rng>(len: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// log(sum(exp(v))) without overflow.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
