//! Nyström test functions for the posterior covariance.
//!
//! From landmarks `X^M` and the eigendecomposition `C(X^M, X^M) = U L U^T`
//! the kernel is approximated by `C~(x, y) = sum_j phi_j(x) phi_j(y) / l_j`
//! with test functions `phi_j(x) = u_j^T C(X^M, x)`. The retained rank never
//! exceeds the number of strictly positive eigenvalues, and the diagonal of
//! the residual kernel `C - C~` drives both the quadrature error bound and
//! the elimination objective in recombination.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::domain::EmpiricalMeasure;
use crate::error::{Result, SoberError};
use crate::gp::GpPosterior;
use crate::linalg::{sample_indices_weighted, sorted_symmetric_eigen};

/// Eigenvalues below `RANK_TOL * l_1` do not count towards the usable rank.
const RANK_TOL: f64 = 1e-12;

/// A positive-semidefinite kernel evaluator.
pub trait CovarianceFn: Sync {
    fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>>;
    fn diag(&self, pts: &DMatrix<f64>) -> Result<DVector<f64>>;
}

impl CovarianceFn for GpPosterior {
    fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.cov(a, b)
    }

    fn diag(&self, pts: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.var_diag(pts)
    }
}

/// Adapter turning a plain closure into a [`CovarianceFn`].
pub struct FnKernel<F>(pub F);

impl<F> CovarianceFn for FnKernel<F>
where
    F: Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64> + Sync,
{
    fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok((self.0)(a, b))
    }

    fn diag(&self, pts: &DMatrix<f64>) -> Result<DVector<f64>> {
        let full = (self.0)(pts, pts);
        Ok(full.diagonal())
    }
}

/// Eigensolver choice for the landmark Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    /// Dense symmetric decomposition (the default).
    Exact,
    /// Randomised sketch with oversampling 10 and 2 power iterations;
    /// worthwhile for landmark counts beyond ~1000.
    Randomized,
}

/// Landmarks, eigenpairs and the retained rank of the Nyström expansion.
pub struct NystromBasis<'a> {
    kernel: &'a dyn CovarianceFn,
    landmarks: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    rank: usize,
    requested_rank: usize,
}

/// Draws `m` landmarks from the measure (with replacement, proportionally to
/// the weights) and eigendecomposes the landmark Gram matrix.
///
/// The retained rank is `min(rank, #positive eigenvalues)`; a silent
/// reduction is visible through [`NystromBasis::rank_was_reduced`].
pub fn build_basis<'a>(
    kernel: &'a dyn CovarianceFn,
    measure: &EmpiricalMeasure,
    m: usize,
    rank: usize,
    seed: u64,
) -> Result<NystromBasis<'a>> {
    build_basis_with(kernel, measure, m, rank, seed, EigenMethod::Exact)
}

pub fn build_basis_with<'a>(
    kernel: &'a dyn CovarianceFn,
    measure: &EmpiricalMeasure,
    m: usize,
    rank: usize,
    seed: u64,
    method: EigenMethod,
) -> Result<NystromBasis<'a>> {
    if m == 0 || m > measure.len() {
        return Err(SoberError::InvalidArgument(format!(
            "landmark count {m} must lie in 1..={}",
            measure.len()
        )));
    }
    if rank > m {
        return Err(SoberError::InvalidArgument(format!(
            "requested rank {rank} exceeds landmark count {m}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let idx = sample_indices_weighted(measure.weights(), m, &mut rng);
    let mut landmarks = DMatrix::zeros(m, measure.dim());
    for (row, &i) in idx.iter().enumerate() {
        landmarks.row_mut(row).copy_from(&measure.points().row(i));
    }
    build_basis_at_with(kernel, landmarks, rank, method, &mut rng)
}

/// Builds the basis at an explicitly chosen landmark set.
pub fn build_basis_at<'a>(
    kernel: &'a dyn CovarianceFn,
    landmarks: DMatrix<f64>,
    rank: usize,
) -> Result<NystromBasis<'a>> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    build_basis_at_with(kernel, landmarks, rank, EigenMethod::Exact, &mut rng)
}

fn build_basis_at_with<'a, R: Rng>(
    kernel: &'a dyn CovarianceFn,
    landmarks: DMatrix<f64>,
    rank: usize,
    method: EigenMethod,
    rng: &mut R,
) -> Result<NystromBasis<'a>> {
    let gram = kernel.cross(&landmarks, &landmarks)?;
    let gram = (&gram + gram.transpose()) * 0.5;
    let (mut values, vectors) = match method {
        EigenMethod::Exact => sorted_symmetric_eigen(&gram),
        EigenMethod::Randomized => randomized_symmetric_eigen(&gram, rank.max(1), rng),
    };
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let lead = values[0];
    let positive = if lead > 0.0 {
        values.iter().take_while(|v| **v > RANK_TOL * lead).count()
    } else {
        0
    };
    let retained = rank.min(positive);
    Ok(NystromBasis {
        kernel,
        landmarks,
        eigenvalues: values,
        eigenvectors: vectors,
        rank: retained,
        requested_rank: rank,
    })
}

/// Sketch-based symmetric eigendecomposition (oversampling 10, 2 power
/// iterations). Returns `rank + 10` leading pairs padded with zeros so the
/// output shape matches the exact path.
fn randomized_symmetric_eigen<R: Rng>(
    gram: &DMatrix<f64>,
    rank: usize,
    rng: &mut R,
) -> (DVector<f64>, DMatrix<f64>) {
    let m = gram.nrows();
    let sketch = (rank + 10).min(m);
    if sketch >= m {
        return sorted_symmetric_eigen(gram);
    }
    let omega = DMatrix::from_fn(m, sketch, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let mut y = gram * omega;
    for _ in 0..2 {
        y = gram * y;
    }
    let q = y.qr().q();
    let small = q.transpose() * gram * &q;
    let (vals, vecs) = sorted_symmetric_eigen(&small);
    let mut values = DVector::zeros(m);
    values.rows_mut(0, sketch).copy_from(&vals);
    let lifted = q * vecs;
    let mut vectors = DMatrix::zeros(m, m);
    vectors.view_mut((0, 0), (m, sketch)).copy_from(&lifted);
    (values, vectors)
}

impl NystromBasis<'_> {
    pub fn landmarks(&self) -> &DMatrix<f64> {
        &self.landmarks
    }

    /// Number of retained eigenpairs.
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn requested_rank(&self) -> usize {
        self.requested_rank
    }

    /// The requested rank exceeded the positive-eigenvalue count.
    pub fn rank_was_reduced(&self) -> bool {
        self.rank < self.requested_rank
    }

    /// Retained eigenvalues, non-increasing and strictly positive.
    pub fn eigenvalues(&self) -> DVector<f64> {
        self.eigenvalues.rows(0, self.rank).into_owned()
    }

    /// Test functions `phi_j(x) = u_j^T C(X^M, x)` as a `points x rank`
    /// matrix.
    pub fn test_functions(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if self.rank == 0 {
            return Ok(DMatrix::zeros(points.nrows(), 0));
        }
        let cross = self.kernel.cross(points, &self.landmarks)?;
        Ok(cross * self.eigenvectors.columns(0, self.rank))
    }

    /// `sqrt((C - C~)(x, x))`, the pointwise Nyström residual, clamped at 0.
    pub fn residual_sqrt_diagonal(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        let diag = self.kernel.diag(points)?;
        let phi = self.test_functions(points)?;
        let mut out = DVector::zeros(points.nrows());
        for i in 0..points.nrows() {
            let mut recon = 0.0;
            for j in 0..self.rank {
                let v = phi[(i, j)];
                recon += v * v / self.eigenvalues[j];
            }
            out[i] = (diag[i] - recon).max(0.0).sqrt();
        }
        Ok(out)
    }

    /// `eps_nys = max_x sqrt(|C~(x,x) - C(x,x)|)` over the given points.
    pub fn eps_nys(&self, points: &DMatrix<f64>) -> Result<f64> {
        let res = self.residual_sqrt_diagonal(points)?;
        Ok(res.iter().cloned().fold(0.0f64, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_posterior, Dataset, Kernel};
    use approx::assert_relative_eq;

    fn rbf_kernel(ell: f64, scale: f64) -> impl Fn(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64> {
        move |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                let d2 = (a.row(i) - b.row(j)).norm_squared();
                scale * (-0.5 * d2 / (ell * ell)).exp()
            })
        }
    }

    fn rand_points(rows: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, dim, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Cyclic Jacobi eigensolver used as an independent oracle.
    fn jacobi_eigenvalues(mat: &DMatrix<f64>) -> Vec<f64> {
        let n = mat.nrows();
        let mut a = mat.clone();
        for _ in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off < 1e-24 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
        vals
    }

    #[test]
    fn full_rank_basis_reproduces_kernel_on_landmarks() {
        let kernel = FnKernel(rbf_kernel(0.5, 1.0));
        let pts = rand_points(20, 2, 3);
        let basis = build_basis_at(&kernel, pts.clone(), 20).unwrap();
        let lead = basis.eigenvalues()[0];
        let phi = basis.test_functions(&pts).unwrap();
        let full = kernel.cross(&pts, &pts).unwrap();
        let lam = basis.eigenvalues();
        for i in 0..20 {
            for j in 0..20 {
                let mut recon = 0.0;
                for r in 0..basis.rank() {
                    recon += phi[(i, r)] * phi[(j, r)] / lam[r];
                }
                assert!(
                    (recon - full[(i, j)]).abs() <= 1e-6 * lead,
                    "entry ({i}, {j}): {recon} vs {}",
                    full[(i, j)]
                );
            }
        }
        let res = basis.residual_sqrt_diagonal(&pts).unwrap();
        for v in res.iter() {
            assert!(*v <= 1e-6 * lead.sqrt());
        }
    }

    #[test]
    fn rank_one_kernel_has_single_eigenvalue_and_zero_residual() {
        // C(x, y) = v(x) v(y) with v(x) = 1 + x0.
        let kernel = FnKernel(|a: &DMatrix<f64>, b: &DMatrix<f64>| {
            DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
                (1.0 + a[(i, 0)]) * (1.0 + b[(j, 0)])
            })
        });
        let pts = rand_points(12, 1, 5);
        let basis = build_basis_at(&kernel, pts.clone(), 12).unwrap();
        assert_eq!(basis.rank(), 1);
        assert!(basis.rank_was_reduced());
        let probe = rand_points(30, 1, 6);
        let res = basis.residual_sqrt_diagonal(&probe).unwrap();
        for v in res.iter() {
            assert!(*v < 1e-7, "residual {v}");
        }
    }

    #[test]
    fn retained_eigenvectors_are_orthonormal() {
        let kernel = FnKernel(rbf_kernel(0.5, 1.2));
        let pts = rand_points(18, 2, 31);
        let basis = build_basis_at(&kernel, pts, 10).unwrap();
        let u = basis.eigenvectors.columns(0, basis.rank()).into_owned();
        let gram = u.transpose() * &u;
        for i in 0..basis.rank() {
            for j in 0..basis.rank() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[(i, j)] - expect).abs() < 1e-8,
                    "U^T U deviates at ({i}, {j}): {}",
                    gram[(i, j)]
                );
            }
        }
        let lam = basis.eigenvalues();
        for w in lam.as_slice().windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
            assert!(w[1] >= 0.0);
        }
    }

    #[test]
    fn eigenvalues_match_jacobi_oracle() {
        let kernel = FnKernel(rbf_kernel(0.7, 1.5));
        let pts = rand_points(15, 2, 9);
        let basis = build_basis_at(&kernel, pts.clone(), 15).unwrap();
        let gram = kernel.cross(&pts, &pts).unwrap();
        let oracle = jacobi_eigenvalues(&gram);
        let lam = basis.eigenvalues();
        for j in 0..basis.rank() {
            assert_relative_eq!(lam[j], oracle[j], max_relative = 1e-8, epsilon = 1e-12);
        }
    }

    #[test]
    fn test_functions_satisfy_eigen_identity_at_landmarks() {
        let kernel = FnKernel(rbf_kernel(0.6, 1.0));
        let pts = rand_points(10, 2, 11);
        let basis = build_basis_at(&kernel, pts.clone(), 6).unwrap();
        let phi = basis.test_functions(&pts).unwrap();
        let lam = basis.eigenvalues();
        for j in 0..basis.rank() {
            for i in 0..10 {
                let expect = lam[j] * basis.eigenvectors[(i, j)];
                assert_relative_eq!(phi[(i, j)], expect, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_kernel_gives_empty_test_functions() {
        let kernel =
            FnKernel(|a: &DMatrix<f64>, b: &DMatrix<f64>| DMatrix::zeros(a.nrows(), b.nrows()));
        let pts = rand_points(5, 1, 2);
        let basis = build_basis_at(&kernel, pts.clone(), 3).unwrap();
        assert_eq!(basis.rank(), 0);
        let phi = basis.test_functions(&pts).unwrap();
        assert_eq!(phi.ncols(), 0);
    }

    #[test]
    fn test_functions_match_direct_product_oracle() {
        let kernel = FnKernel(rbf_kernel(0.4, 0.8));
        let lms = rand_points(8, 2, 13);
        let basis = build_basis_at(&kernel, lms.clone(), 5).unwrap();
        let probe = rand_points(7, 2, 14);
        let phi = basis.test_functions(&probe).unwrap();
        let cross = kernel.cross(&lms, &probe).unwrap();
        for j in 0..basis.rank() {
            for p in 0..7 {
                let mut dot = 0.0;
                for i in 0..8 {
                    dot += basis.eigenvectors[(i, j)] * cross[(i, p)];
                }
                assert_relative_eq!(phi[(p, j)], dot, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn residuals_are_bounded_by_prior_deviation() {
        let gp = fit_posterior(
            Dataset::new(
                rand_points(8, 2, 15),
                DVector::from_fn(8, |i, _| (i as f64 * 0.7).sin()),
                0.01,
            )
            .unwrap(),
            Kernel::rbf_iso(2, 0.5, 1.3).unwrap(),
            0.0,
        )
        .unwrap();
        let measure = EmpiricalMeasure::uniform(rand_points(60, 2, 16)).unwrap();
        let basis = build_basis(&gp, &measure, 20, 8, 7).unwrap();
        let res = basis.residual_sqrt_diagonal(measure.points()).unwrap();
        let cdiag = gp.var_diag(measure.points()).unwrap();
        for i in 0..measure.len() {
            assert!(res[i] >= 0.0);
            assert!(
                res[i] <= cdiag[i].sqrt() + 1e-6,
                "{} > {}",
                res[i],
                cdiag[i].sqrt()
            );
        }
    }

    #[test]
    fn weighted_residual_matches_dense_oracle() {
        let kernel = FnKernel(rbf_kernel(0.5, 1.0));
        let pts = rand_points(40, 2, 17);
        let mut rng = ChaCha12Rng::seed_from_u64(18);
        let raw = DVector::from_fn(40, |_, _| rng.gen_range(0.1..1.0));
        let measure = EmpiricalMeasure::new(pts.clone(), raw.clone() / raw.sum()).unwrap();
        let basis = build_basis(&kernel, &measure, 12, 6, 19).unwrap();
        let res = basis.residual_sqrt_diagonal(&pts).unwrap();
        let weighted: f64 = measure
            .weights()
            .iter()
            .zip(res.iter())
            .map(|(w, r)| w * r)
            .sum();
        // Dense oracle: materialise C~ from the eigenpairs and subtract.
        let phi = basis.test_functions(&pts).unwrap();
        let lam = basis.eigenvalues();
        let cdiag = kernel.diag(&pts).unwrap();
        let mut oracle = 0.0;
        for i in 0..40 {
            let mut recon = 0.0;
            for j in 0..basis.rank() {
                recon += phi[(i, j)] * phi[(i, j)] / lam[j];
            }
            oracle += measure.weights()[i] * (cdiag[i] - recon).max(0.0).sqrt();
        }
        assert_relative_eq!(weighted, oracle, epsilon = 1e-10);
    }

    #[test]
    fn mean_residual_shrinks_with_more_landmarks() {
        let kernel = FnKernel(rbf_kernel(0.4, 1.0));
        let sizes = [8usize, 16, 32];
        let mut med: Vec<Vec<f64>> = vec![Vec::new(); sizes.len()];
        for seed in 0..20u64 {
            let pts = rand_points(200, 2, 100 + seed);
            let measure = EmpiricalMeasure::uniform(pts.clone()).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let order = sample_indices_weighted(measure.weights(), 32, &mut rng);
            for (si, &m) in sizes.iter().enumerate() {
                let mut lms = DMatrix::zeros(m, 2);
                for (row, &i) in order[..m].iter().enumerate() {
                    lms.row_mut(row).copy_from(&pts.row(i));
                }
                let basis = build_basis_at(&kernel, lms, 6).unwrap();
                let res = basis.residual_sqrt_diagonal(&pts).unwrap();
                med[si].push(res.sum() / 200.0);
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let m0 = median(&mut med[0]);
        let m1 = median(&mut med[1]);
        let m2 = median(&mut med[2]);
        assert!(m1 <= m0 + 1e-12, "median residual grew: {m0} -> {m1}");
        assert!(m2 <= m1 + 1e-12, "median residual grew: {m1} -> {m2}");
    }

    #[test]
    fn randomized_eigen_close_to_exact_for_decaying_spectrum() {
        let kernel = FnKernel(rbf_kernel(0.8, 1.0));
        let pts = rand_points(120, 2, 23);
        let measure = EmpiricalMeasure::uniform(pts).unwrap();
        let exact = build_basis_with(&kernel, &measure, 120, 10, 4, EigenMethod::Exact).unwrap();
        let rand =
            build_basis_with(&kernel, &measure, 120, 10, 4, EigenMethod::Randomized).unwrap();
        let le = exact.eigenvalues();
        let lr = rand.eigenvalues();
        for j in 0..6 {
            assert_relative_eq!(le[j], lr[j], max_relative = 1e-4);
        }
    }
}
