//! Exact Gaussian-process regression.
//!
//! The posterior mean and covariance follow the standard conditioning
//! formulas
//!
//! ```text
//! m_t(x)     = m + K(x, X) (K_XX + s2 I)^-1 (Y - m)
//! C_t(x, x') = K(x, x') - K(x, X) (K_XX + s2 I)^-1 K(X, x')
//! ```
//!
//! `C_t` doubles as the quadrature kernel for batch selection, so the
//! cross-covariance path is written for large candidate sets (norm-trick
//! distances plus a single GEMM, elementwise `exp` parallelised per column).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoberError};
use crate::linalg::jittered_cholesky;

const LN_2PI: f64 = 1.8378770664093453;

/// Kernel families supported by the regression model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    RbfArd,
}

/// A stationary covariance function with per-dimension lengthscales.
///
/// `K(x, x') = outputscale * exp(-0.5 * sum_k ((x_k - x'_k) / l_k)^2)`.
/// Discrete coordinates are expected to be embedded as reals before they
/// reach the kernel (0/1 for binary, scaled codes for categorical).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kernel {
    family: KernelFamily,
    lengthscales: Vec<f64>,
    outputscale: f64,
}

impl Kernel {
    pub fn rbf_ard(lengthscales: Vec<f64>, outputscale: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(SoberError::InvalidArgument(
                "kernel needs at least one lengthscale".into(),
            ));
        }
        if lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(SoberError::InvalidArgument(
                "all lengthscales must be positive".into(),
            ));
        }
        if !(outputscale > 0.0) {
            return Err(SoberError::InvalidArgument(
                "outputscale must be positive".into(),
            ));
        }
        Ok(Kernel {
            family: KernelFamily::RbfArd,
            lengthscales,
            outputscale,
        })
    }

    /// Isotropic RBF: the same lengthscale repeated over `dim` coordinates.
    pub fn rbf_iso(dim: usize, lengthscale: f64, outputscale: f64) -> Result<Self> {
        Self::rbf_ard(vec![lengthscale; dim], outputscale)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn outputscale(&self) -> f64 {
        self.outputscale
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("kernel serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let k: Kernel = serde_json::from_str(text)?;
        Kernel::rbf_ard(k.lengthscales, k.outputscale)
    }

    fn check_dim(&self, pts: &DMatrix<f64>, context: &'static str) -> Result<()> {
        if pts.ncols() != self.dim() {
            return Err(SoberError::DimensionMismatch {
                context,
                expected: self.dim(),
                got: pts.ncols(),
            });
        }
        Ok(())
    }

    fn scaled(&self, pts: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = pts.clone();
        for (k, l) in self.lengthscales.iter().enumerate() {
            out.column_mut(k).scale_mut(1.0 / l);
        }
        out
    }

    /// Cross-covariance matrix `K(a, b)` of shape `a.nrows() x b.nrows()`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(a, "kernel cross, left points")?;
        self.check_dim(b, "kernel cross, right points")?;
        let sa = self.scaled(a);
        let sb = self.scaled(b);
        let na: Vec<f64> = sa.row_iter().map(|r| r.norm_squared()).collect();
        let nb: Vec<f64> = sb.row_iter().map(|r| r.norm_squared()).collect();
        let mut out = &sa * sb.transpose();
        let s = self.outputscale;
        let rows = out.nrows();
        let apply = |col_j: usize, col: &mut [f64]| {
            let nbj = nb[col_j];
            for (i, v) in col.iter_mut().enumerate() {
                let d2 = (na[i] + nbj - 2.0 * *v).max(0.0);
                *v = s * (-0.5 * d2).exp();
            }
        };
        if rows * out.ncols() >= 65_536 {
            out.as_mut_slice()
                .par_chunks_mut(rows)
                .enumerate()
                .for_each(|(j, col)| apply(j, col));
        } else {
            for j in 0..out.ncols() {
                let mut col = out.column_mut(j);
                apply(j, col.as_mut_slice());
            }
        }
        Ok(out)
    }

    /// Symmetric Gram matrix with the diagonal pinned to the outputscale.
    pub fn gram(&self, pts: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut g = self.cross(pts, pts)?;
        for i in 0..g.nrows() {
            g[(i, i)] = self.outputscale;
        }
        Ok(g)
    }

    /// `K(x, x)` for each row of `pts`; constant for a stationary kernel.
    pub fn diag(&self, pts: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_dim(pts, "kernel diag")?;
        Ok(DVector::from_element(pts.nrows(), self.outputscale))
    }
}

/// Observed inputs/labels plus the homoscedastic noise variance.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise_variance: f64,
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    #[serde(rename = "X")]
    x: Vec<Vec<f64>>,
    #[serde(rename = "Y")]
    y: Vec<f64>,
    noise_variance: f64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, noise_variance: f64) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(SoberError::DimensionMismatch {
                context: "dataset rows vs labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if !(noise_variance >= 0.0) {
            return Err(SoberError::InvalidArgument(
                "noise variance must be non-negative".into(),
            ));
        }
        Ok(Dataset {
            x,
            y,
            noise_variance,
        })
    }

    pub fn empty(dim: usize, noise_variance: f64) -> Self {
        Dataset {
            x: DMatrix::zeros(0, dim),
            y: DVector::zeros(0),
            noise_variance,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Appends a batch of rows and labels.
    pub fn extend(&mut self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
        if x.nrows() != y.len() {
            return Err(SoberError::DimensionMismatch {
                context: "dataset extend rows vs labels",
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if x.ncols() != self.dim() {
            return Err(SoberError::DimensionMismatch {
                context: "dataset extend dimension",
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let mut nx = DMatrix::zeros(self.x.nrows() + x.nrows(), self.dim());
        nx.view_mut((0, 0), (self.x.nrows(), self.dim()))
            .copy_from(&self.x);
        nx.view_mut((self.x.nrows(), 0), (x.nrows(), self.dim()))
            .copy_from(x);
        let ny = DVector::from_iterator(
            self.y.len() + y.len(),
            self.y.iter().chain(y.iter()).cloned(),
        );
        self.x = nx;
        self.y = ny;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mirror = DatasetJson {
            x: self
                .x
                .row_iter()
                .map(|r| r.iter().cloned().collect())
                .collect(),
            y: self.y.iter().cloned().collect(),
            noise_variance: self.noise_variance,
        };
        serde_json::to_string(&mirror).expect("dataset serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mirror: DatasetJson = serde_json::from_str(text)?;
        let rows = mirror.x.len();
        let dim = mirror.x.first().map(|r| r.len()).unwrap_or(0);
        if mirror.x.iter().any(|r| r.len() != dim) {
            return Err(SoberError::InvalidArgument(
                "dataset rows have inconsistent dimension".into(),
            ));
        }
        let x = DMatrix::from_fn(rows, dim, |i, j| mirror.x[i][j]);
        Dataset::new(x, DVector::from_vec(mirror.y), mirror.noise_variance)
    }
}

/// A conditioned GP: immutable after construction, safe to evaluate from
/// multiple threads.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: Kernel,
    data: Dataset,
    prior_mean: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    alpha: DVector<f64>,
    jitter: f64,
}

/// Conditions the GP on the data, caching the factorisation of
/// `K_XX + noise * I`.
pub fn fit_posterior(data: Dataset, kernel: Kernel, prior_mean: f64) -> Result<GpPosterior> {
    if !data.is_empty() && data.dim() != kernel.dim() {
        return Err(SoberError::DimensionMismatch {
            context: "dataset vs kernel dimension",
            expected: kernel.dim(),
            got: data.dim(),
        });
    }
    if data.is_empty() {
        return Ok(GpPosterior {
            kernel,
            data,
            prior_mean,
            chol: None,
            alpha: DVector::zeros(0),
            jitter: 0.0,
        });
    }
    let mut gram = kernel.gram(data.x())?;
    for i in 0..gram.nrows() {
        gram[(i, i)] += data.noise_variance();
    }
    let (chol, jitter) = jittered_cholesky(&gram)?;
    let resid = data.y().map(|v| v - prior_mean);
    let alpha = chol.solve(&resid);
    Ok(GpPosterior {
        kernel,
        data,
        prior_mean,
        chol: Some(chol),
        alpha,
        jitter,
    })
}

impl GpPosterior {
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    /// Diagonal jitter that was added to make the Gram factorisable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    /// Posterior mean at each row of `pts`.
    pub fn mean(&self, pts: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.kernel.check_dim(pts, "posterior mean")?;
        if self.data.is_empty() {
            return Ok(DVector::from_element(pts.nrows(), self.prior_mean));
        }
        let kxa = self.kernel.cross(pts, self.data.x())?;
        Ok((&kxa * &self.alpha).add_scalar(self.prior_mean))
    }

    /// Posterior cross-covariance `C_t(a, b)`.
    pub fn cov(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let prior = self.kernel.cross(a, b)?;
        if self.data.is_empty() {
            return Ok(prior);
        }
        let chol = self.chol.as_ref().expect("factorisation cached");
        let ka = self.kernel.cross(self.data.x(), a)?;
        let kb = self.kernel.cross(self.data.x(), b)?;
        let v = chol.solve(&kb);
        Ok(prior - ka.transpose() * v)
    }

    /// Posterior mean over `a` and covariance `C_t(a, b)`.
    ///
    /// When `a` and `b` are the same point set the covariance is
    /// symmetrised and its diagonal clamped to be non-negative.
    pub fn mean_cov(
        &self,
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mean = self.mean(a)?;
        let mut cov = self.cov(a, b)?;
        if a == b {
            cov = (&cov + cov.transpose()) * 0.5;
            let floor = -1e-8 * self.kernel.outputscale();
            for i in 0..cov.nrows() {
                let v = cov[(i, i)];
                if v < floor {
                    return Err(SoberError::InvalidArgument(format!(
                        "posterior variance {v:.3e} below the clamping floor {floor:.3e}"
                    )));
                }
                if v < 0.0 {
                    cov[(i, i)] = 0.0;
                }
            }
        }
        Ok((mean, cov))
    }

    /// Posterior variance at each row, clamped per the variance policy.
    pub fn var_diag(&self, pts: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.kernel.check_dim(pts, "posterior variance")?;
        let prior = self.kernel.diag(pts)?;
        if self.data.is_empty() {
            return Ok(prior);
        }
        let chol = self.chol.as_ref().expect("factorisation cached");
        // Solve L w = kxa column-wise, then var = prior - sum w^2.
        let mut v = self.kernel.cross(self.data.x(), pts)?;
        if !chol.l().solve_lower_triangular_mut(&mut v) {
            return Err(SoberError::Factorization {
                size: self.data.len(),
            });
        }
        let floor = -1e-8 * self.kernel.outputscale();
        let mut out = DVector::zeros(pts.nrows());
        for j in 0..pts.nrows() {
            let explained = v.column(j).norm_squared();
            let var = prior[j] - explained;
            if var < floor {
                return Err(SoberError::InvalidArgument(format!(
                    "posterior variance {var:.3e} below the clamping floor {floor:.3e}"
                )));
            }
            out[j] = var.max(0.0);
        }
        Ok(out)
    }

    /// Log marginal likelihood of the conditioned data.
    pub fn log_marginal(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let chol = self.chol.as_ref().expect("factorisation cached");
        let resid = self.data.y().map(|v| v - self.prior_mean);
        let quad = resid.dot(&self.alpha);
        let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * quad - logdet - 0.5 * self.data.len() as f64 * LN_2PI
    }
}

/// Options for the marginal-likelihood ascent.
#[derive(Debug, Clone)]
pub struct MleOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Also profile the constant prior mean (generalised least squares).
    pub fit_prior_mean: bool,
    pub seed: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            restarts: 8,
            max_iters: 120,
            fit_prior_mean: false,
            seed: 0,
        }
    }
}

/// Result of hyperparameter optimisation.
#[derive(Debug, Clone)]
pub struct HyperFit {
    pub kernel: Kernel,
    pub prior_mean: f64,
    pub log_marginal: f64,
    /// All inputs were identical; the initial kernel was returned untouched.
    pub degenerate_data: bool,
}

/// Type-II maximum likelihood for the kernel hyperparameters.
///
/// Multi-start gradient ascent on log-lengthscales and log-outputscale. The
/// returned kernel never scores below the initial one.
pub fn optimize_hyperparameters(
    data: &Dataset,
    init: &Kernel,
    restarts: usize,
) -> Result<HyperFit> {
    optimize_hyperparameters_with(
        data,
        init,
        0.0,
        &MleOptions {
            restarts,
            ..MleOptions::default()
        },
    )
}

pub fn optimize_hyperparameters_with(
    data: &Dataset,
    init: &Kernel,
    prior_mean: f64,
    opts: &MleOptions,
) -> Result<HyperFit> {
    if data.len() < 2 {
        return Err(SoberError::InvalidArgument(
            "hyperparameter fitting needs at least 2 points".into(),
        ));
    }
    if data.dim() != init.dim() {
        return Err(SoberError::DimensionMismatch {
            context: "dataset vs kernel dimension",
            expected: init.dim(),
            got: data.dim(),
        });
    }
    let widths = column_widths(data.x());
    let degenerate = widths.iter().all(|w| *w == 0.0);
    if degenerate {
        let gp = fit_posterior(data.clone(), init.clone(), prior_mean)?;
        return Ok(HyperFit {
            kernel: init.clone(),
            prior_mean,
            log_marginal: gp.log_marginal(),
            degenerate_data: true,
        });
    }
    let widths: Vec<f64> = widths
        .iter()
        .map(|w| if *w > 0.0 { *w } else { 1.0 })
        .collect();
    let d = init.dim();
    let lo: Vec<f64> = widths.iter().map(|w| (1e-3 * w).ln()).collect();
    let hi: Vec<f64> = widths.iter().map(|w| (1e3 * w).ln()).collect();

    let eval = |theta: &[f64]| -> Result<(f64, f64)> { lml_at(data, theta, prior_mean, opts) };
    let eval_grad = |theta: &[f64]| -> Result<(f64, Vec<f64>, f64)> {
        lml_grad_at(data, theta, prior_mean, opts)
    };

    let clamp = |theta: &mut [f64]| {
        for k in 0..d {
            theta[k] = theta[k].clamp(lo[k], hi[k]);
        }
        theta[d] = theta[d].clamp((1e-12f64).ln(), (1e12f64).ln());
    };

    let mut init_theta: Vec<f64> = init
        .lengthscales()
        .iter()
        .map(|l| l.ln())
        .chain(std::iter::once(init.outputscale().ln()))
        .collect();
    clamp(&mut init_theta);
    let (init_lml, init_mean) = eval(&init_theta)?;

    let y_var = {
        let n = data.len() as f64;
        let mean = data.y().sum() / n;
        let var = data.y().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            var
        } else {
            1.0
        }
    };

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut best_theta = init_theta.clone();
    let mut best = (init_lml, init_mean);
    for start in 0..opts.restarts.max(1) {
        let mut theta = if start == 0 {
            init_theta.clone()
        } else {
            let mut t: Vec<f64> = widths
                .iter()
                .map(|w| rng.gen_range((0.05 * w).ln()..(2.0 * w).ln()))
                .collect();
            t.push(rng.gen_range((0.1 * y_var).ln()..(10.0 * y_var).ln()));
            clamp(&mut t);
            t
        };
        let Ok((mut lml, mut grad, mut mean)) = eval_grad(&theta) else {
            continue;
        };
        let mut step = 0.1;
        for _ in 0..opts.max_iters {
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-9 || step < 1e-7 {
                break;
            }
            let mut proposal = theta.clone();
            for (p, g) in proposal.iter_mut().zip(grad.iter()) {
                *p += step * g / gnorm.max(1.0);
            }
            clamp(&mut proposal);
            match eval(&proposal) {
                Ok((cand, _)) if cand > lml => {
                    let improved = cand - lml;
                    theta = proposal;
                    let Ok((l2, g2, m2)) = eval_grad(&theta) else {
                        break;
                    };
                    lml = l2;
                    grad = g2;
                    mean = m2;
                    step *= 1.2;
                    if improved < 1e-10 * (1.0 + lml.abs()) {
                        break;
                    }
                }
                _ => step *= 0.5,
            }
        }
        if lml > best.0 {
            best = (lml, mean);
            best_theta = theta;
        }
    }

    let kernel = Kernel::rbf_ard(
        best_theta[..d].iter().map(|t| t.exp()).collect(),
        best_theta[d].exp(),
    )?;
    Ok(HyperFit {
        kernel,
        prior_mean: best.1,
        log_marginal: best.0,
        degenerate_data: false,
    })
}

fn column_widths(x: &DMatrix<f64>) -> Vec<f64> {
    (0..x.ncols())
        .map(|k| {
            let col = x.column(k);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in col.iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            if hi > lo {
                hi - lo
            } else {
                0.0
            }
        })
        .collect()
}

fn build_noisy_gram(data: &Dataset, theta: &[f64]) -> Result<(DMatrix<f64>, Kernel)> {
    let d = theta.len() - 1;
    let kernel = Kernel::rbf_ard(theta[..d].iter().map(|t| t.exp()).collect(), theta[d].exp())?;
    let mut gram = kernel.gram(data.x())?;
    for i in 0..gram.nrows() {
        gram[(i, i)] += data.noise_variance();
    }
    Ok((gram, kernel))
}

/// Profiled prior mean (GLS estimate) when requested, else the fixed one.
fn profile_mean(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    y: &DVector<f64>,
    fixed: f64,
    fit: bool,
) -> f64 {
    if !fit {
        return fixed;
    }
    let ones = DVector::from_element(y.len(), 1.0);
    let kiy = chol.solve(y);
    let ki1 = chol.solve(&ones);
    let denom = ones.dot(&ki1);
    if denom.abs() < 1e-300 {
        fixed
    } else {
        ones.dot(&kiy) / denom
    }
}

fn lml_at(data: &Dataset, theta: &[f64], prior_mean: f64, opts: &MleOptions) -> Result<(f64, f64)> {
    let (gram, _) = build_noisy_gram(data, theta)?;
    let (chol, _) = jittered_cholesky(&gram)?;
    let mean = profile_mean(&chol, data.y(), prior_mean, opts.fit_prior_mean);
    let resid = data.y().map(|v| v - mean);
    let alpha = chol.solve(&resid);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let lml = -0.5 * resid.dot(&alpha) - logdet - 0.5 * data.len() as f64 * LN_2PI;
    Ok((lml, mean))
}

fn lml_grad_at(
    data: &Dataset,
    theta: &[f64],
    prior_mean: f64,
    opts: &MleOptions,
) -> Result<(f64, Vec<f64>, f64)> {
    let d = theta.len() - 1;
    let (gram, kernel) = build_noisy_gram(data, theta)?;
    let (chol, _) = jittered_cholesky(&gram)?;
    let mean = profile_mean(&chol, data.y(), prior_mean, opts.fit_prior_mean);
    let resid = data.y().map(|v| v - mean);
    let alpha = chol.solve(&resid);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum();
    let lml = -0.5 * resid.dot(&alpha) - logdet - 0.5 * data.len() as f64 * LN_2PI;

    // dLML/dtheta_p = 0.5 tr((alpha alpha^T - Kinv) dK/dtheta_p)
    let kinv = chol.inverse();
    let noise_free = kernel.gram(data.x())?;
    let t = data.len();
    let mut grad = vec![0.0; d + 1];
    for i in 0..t {
        for j in 0..t {
            let a = alpha[i] * alpha[j] - kinv[(i, j)];
            let k = noise_free[(i, j)];
            // d/dlog s: K itself.
            grad[d] += 0.5 * a * k;
            // d/dlog l_k: K .* (x_ik - x_jk)^2 / l_k^2.
            for p in 0..d {
                let diff = (data.x()[(i, p)] - data.x()[(j, p)]) / theta[p].exp();
                grad[p] += 0.5 * a * k * diff * diff;
            }
        }
    }
    Ok((lml, grad, mean))
}
