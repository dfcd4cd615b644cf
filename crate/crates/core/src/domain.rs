//! Domain priors, weighted maximum-likelihood refits and sequential
//! importance resampling.
//!
//! A [`DomainPrior`] is a samplable parametric distribution over the input
//! space. [`sir`] turns an unnormalised log-target into an empirical measure
//! by the classic sample / weight / refit / resample / reweight loop; fully
//! discrete priors with a small support are enumerated exactly instead.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoberError};
use crate::linalg::{jittered_cholesky, log_sum_exp};

const SIMPLEX_TOL: f64 = 1e-12;
/// Fraction of the envelope range added to each side by the uniform refit.
const ENVELOPE_EXPANSION: f64 = 0.005;
/// Relative covariance floor for mixture refits, scaled by squared widths.
const GMM_COV_FLOOR: f64 = 1e-6;

/// A weighted point cloud approximating a probability measure.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    points: DMatrix<f64>,
    weights: DVector<f64>,
}

impl EmpiricalMeasure {
    pub fn new(points: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(SoberError::InvalidArgument(
                "empirical measure needs at least one point".into(),
            ));
        }
        if points.nrows() != weights.len() {
            return Err(SoberError::DimensionMismatch {
                context: "measure points vs weights",
                expected: points.nrows(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(SoberError::InvalidArgument(
                "measure weights must be non-negative".into(),
            ));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(SoberError::InvalidArgument(format!(
                "measure weights sum to {total}, expected 1"
            )));
        }
        Ok(EmpiricalMeasure { points, weights })
    }

    pub fn uniform(points: DMatrix<f64>) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(SoberError::InvalidArgument(
                "empirical measure needs at least one point".into(),
            ));
        }
        let weights = DVector::from_element(n, 1.0 / n as f64);
        EmpiricalMeasure::new(points, weights)
    }

    /// Builds a measure with weights proportional to `exp(log_weights)`.
    pub fn from_log_weights(points: DMatrix<f64>, log_weights: &DVector<f64>) -> Result<Self> {
        let weights = normalise_log_weights(log_weights)?;
        EmpiricalMeasure::new(points, weights)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Effective sample size `(sum w)^2 / sum w^2`.
    pub fn effective_sample_size(&self) -> f64 {
        let s: f64 = self.weights.sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        if s2 > 0.0 {
            s * s / s2
        } else {
            0.0
        }
    }

    /// Weighted barycentre of the point cloud.
    pub fn barycentre(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (i, w) in self.weights.iter().enumerate() {
            out.axpy(*w, &self.points.row(i).transpose(), 1.0);
        }
        out
    }
}

fn normalise_log_weights(log_weights: &DVector<f64>) -> Result<DVector<f64>> {
    let clean: Vec<f64> = log_weights
        .iter()
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { *v })
        .collect();
    let max = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(SoberError::DegenerateWeights);
    }
    let raw: Vec<f64> = clean.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(SoberError::DegenerateWeights);
    }
    Ok(DVector::from_iterator(
        raw.len(),
        raw.iter().map(|v| v / total),
    ))
}

/// Samplable parametric families used as domain priors and SIR proposals.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum DomainPrior {
    ContinuousUniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
        /// Optional box; samples falling outside are rejection-resampled up
        /// to 100 attempts, then clamped.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bounds: Option<(Vec<f64>, Vec<f64>)>,
    },
    Bernoulli {
        p: Vec<f64>,
    },
    Categorical {
        /// One probability table per dimension; codes are 0..table.len().
        tables: Vec<Vec<f64>>,
    },
    /// Independent product: continuous block first, discrete block after.
    MixedProduct {
        continuous: Box<DomainPrior>,
        discrete: Box<DomainPrior>,
    },
}

impl DomainPrior {
    pub fn dim(&self) -> usize {
        match self {
            DomainPrior::ContinuousUniform { lower, .. } => lower.len(),
            DomainPrior::Gaussian { mean, .. } => mean.len(),
            DomainPrior::Gmm { means, .. } => means.first().map(|m| m.len()).unwrap_or(0),
            DomainPrior::Bernoulli { p } => p.len(),
            DomainPrior::Categorical { tables } => tables.len(),
            DomainPrior::MixedProduct {
                continuous,
                discrete,
            } => continuous.dim() + discrete.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DomainPrior::ContinuousUniform { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(SoberError::InvalidArgument(
                        "uniform bounds mismatch".into(),
                    ));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
                    return Err(SoberError::InvalidArgument(
                        "uniform prior requires lower < upper elementwise".into(),
                    ));
                }
            }
            DomainPrior::Gaussian { mean, covariance } => {
                check_covariance(mean.len(), covariance)?;
            }
            DomainPrior::Gmm {
                weights,
                means,
                covariances,
                bounds,
            } => {
                check_simplex(weights)?;
                if means.len() != weights.len() || covariances.len() != weights.len() {
                    return Err(SoberError::InvalidArgument(
                        "mixture component counts disagree".into(),
                    ));
                }
                let d = self.dim();
                for (m, c) in means.iter().zip(covariances) {
                    if m.len() != d {
                        return Err(SoberError::InvalidArgument(
                            "mixture mean dimension mismatch".into(),
                        ));
                    }
                    check_covariance(d, c)?;
                }
                if let Some((lo, hi)) = bounds {
                    if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(l, u)| !(l < u)) {
                        return Err(SoberError::InvalidArgument("mixture bounds invalid".into()));
                    }
                }
            }
            DomainPrior::Bernoulli { p } => {
                if p.is_empty() || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(SoberError::InvalidArgument(
                        "bernoulli probabilities must lie in [0, 1]".into(),
                    ));
                }
            }
            DomainPrior::Categorical { tables } => {
                if tables.is_empty() {
                    return Err(SoberError::InvalidArgument(
                        "empty categorical tables".into(),
                    ));
                }
                for t in tables {
                    check_simplex(t)?;
                }
            }
            DomainPrior::MixedProduct {
                continuous,
                discrete,
            } => {
                continuous.validate()?;
                discrete.validate()?;
            }
        }
        Ok(())
    }

    /// Draws `count` points, deterministically for a given seed.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        self.sample_rng(count, &mut rng)
    }

    pub fn sample_rng<R: Rng>(&self, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
        if count == 0 {
            return Err(SoberError::InvalidArgument(
                "sample count must be >= 1".into(),
            ));
        }
        self.validate()?;
        let d = self.dim();
        let mut out = DMatrix::zeros(count, d);
        match self {
            DomainPrior::ContinuousUniform { lower, upper } => {
                for i in 0..count {
                    for k in 0..d {
                        out[(i, k)] = rng.gen_range(lower[k]..upper[k]);
                    }
                }
            }
            DomainPrior::Gaussian { mean, covariance } => {
                let chol = covariance_factor(covariance)?;
                for i in 0..count {
                    let z = crate::linalg::standard_normal_vector(d, rng);
                    let x = chol.l() * z;
                    for k in 0..d {
                        out[(i, k)] = mean[k] + x[k];
                    }
                }
            }
            DomainPrior::Gmm {
                weights,
                means,
                covariances,
                bounds,
            } => {
                let factors: Vec<_> = covariances
                    .iter()
                    .map(|c| covariance_factor(c))
                    .collect::<Result<_>>()?;
                let w = DVector::from_vec(weights.clone());
                for i in 0..count {
                    let comp = crate::linalg::sample_indices_weighted(&w, 1, rng)[0];
                    let mut x = draw_gaussian(&means[comp], &factors[comp], rng);
                    if let Some((lo, hi)) = bounds {
                        let mut attempts = 0;
                        while !inside_box(&x, lo, hi) && attempts < 100 {
                            let comp = crate::linalg::sample_indices_weighted(&w, 1, rng)[0];
                            x = draw_gaussian(&means[comp], &factors[comp], rng);
                            attempts += 1;
                        }
                        for k in 0..d {
                            x[k] = x[k].clamp(lo[k], hi[k]);
                        }
                    }
                    for k in 0..d {
                        out[(i, k)] = x[k];
                    }
                }
            }
            DomainPrior::Bernoulli { p } => {
                for i in 0..count {
                    for k in 0..d {
                        out[(i, k)] = if rng.gen::<f64>() < p[k] { 1.0 } else { 0.0 };
                    }
                }
            }
            DomainPrior::Categorical { tables } => {
                for i in 0..count {
                    for (k, table) in tables.iter().enumerate() {
                        let w = DVector::from_vec(table.clone());
                        out[(i, k)] = crate::linalg::sample_indices_weighted(&w, 1, rng)[0] as f64;
                    }
                }
            }
            DomainPrior::MixedProduct {
                continuous,
                discrete,
            } => {
                let a = continuous.sample_rng(count, rng)?;
                let b = discrete.sample_rng(count, rng)?;
                out.view_mut((0, 0), (count, a.ncols())).copy_from(&a);
                out.view_mut((0, a.ncols()), (count, b.ncols()))
                    .copy_from(&b);
            }
        }
        Ok(out)
    }

    /// Log-density (or log-mass) at a single point; `-inf` outside support.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        match self {
            DomainPrior::ContinuousUniform { lower, upper } => {
                if x.len() != lower.len() || !inside_box(x, lower, upper) {
                    return f64::NEG_INFINITY;
                }
                -lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| (u - l).ln())
                    .sum::<f64>()
            }
            DomainPrior::Gaussian { mean, covariance } => {
                let Ok(chol) = covariance_factor(covariance) else {
                    return f64::NEG_INFINITY;
                };
                gaussian_log_density(x, mean, &chol)
            }
            DomainPrior::Gmm {
                weights,
                means,
                covariances,
                bounds,
            } => {
                if let Some((lo, hi)) = bounds {
                    if !inside_box(x, lo, hi) {
                        return f64::NEG_INFINITY;
                    }
                }
                let terms: Vec<f64> = weights
                    .iter()
                    .zip(means)
                    .zip(covariances)
                    .map(|((w, m), c)| {
                        if *w <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        match covariance_factor(c) {
                            Ok(chol) => w.ln() + gaussian_log_density(x, m, &chol),
                            Err(_) => f64::NEG_INFINITY,
                        }
                    })
                    .collect();
                log_sum_exp(&terms)
            }
            DomainPrior::Bernoulli { p } => {
                let mut total = 0.0;
                for (v, pk) in x.iter().zip(p) {
                    let bit = match discrete_code(*v, 2) {
                        Some(b) => b,
                        None => return f64::NEG_INFINITY,
                    };
                    let prob = if bit == 1 { *pk } else { 1.0 - *pk };
                    if prob <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    total += prob.ln();
                }
                total
            }
            DomainPrior::Categorical { tables } => {
                let mut total = 0.0;
                for (v, table) in x.iter().zip(tables) {
                    let code = match discrete_code(*v, table.len()) {
                        Some(c) => c,
                        None => return f64::NEG_INFINITY,
                    };
                    let prob = table[code];
                    if prob <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    total += prob.ln();
                }
                total
            }
            DomainPrior::MixedProduct {
                continuous,
                discrete,
            } => {
                let k = continuous.dim();
                continuous.log_density(&x[..k]) + discrete.log_density(&x[k..])
            }
        }
    }

    /// Log-density at every row of `points`.
    pub fn log_density_batch(&self, points: &DMatrix<f64>) -> DVector<f64> {
        DVector::from_iterator(
            points.nrows(),
            points
                .row_iter()
                .map(|r| self.log_density(r.transpose().as_slice())),
        )
    }

    /// The full support of a fully discrete prior, if it has at most
    /// `max_atoms` atoms.
    pub fn enumerate_support(&self, max_atoms: usize) -> Option<DMatrix<f64>> {
        let per_dim: Option<Vec<Vec<f64>>> = self.per_dimension_support();
        let per_dim = per_dim?;
        let mut total: usize = 1;
        for vals in &per_dim {
            total = total.checked_mul(vals.len())?;
            if total > max_atoms {
                return None;
            }
        }
        let d = per_dim.len();
        let mut out = DMatrix::zeros(total, d);
        for i in 0..total {
            let mut rest = i;
            for (k, vals) in per_dim.iter().enumerate() {
                out[(i, k)] = vals[rest % vals.len()];
                rest /= vals.len();
            }
        }
        Some(out)
    }

    fn per_dimension_support(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            DomainPrior::Bernoulli { p } => Some(vec![vec![0.0, 1.0]; p.len()]),
            DomainPrior::Categorical { tables } => Some(
                tables
                    .iter()
                    .map(|t| (0..t.len()).map(|c| c as f64).collect())
                    .collect(),
            ),
            DomainPrior::MixedProduct {
                continuous,
                discrete,
            } => {
                let mut a = continuous.per_dimension_support()?;
                let b = discrete.per_dimension_support()?;
                a.extend(b);
                Some(a)
            }
            _ => None,
        }
    }
}

fn inside_box(x: &[f64], lo: &[f64], hi: &[f64]) -> bool {
    x.iter()
        .zip(lo.iter().zip(hi))
        .all(|(v, (l, u))| *v >= *l && *v <= *u)
}

fn discrete_code(v: f64, arity: usize) -> Option<usize> {
    let r = v.round();
    if (v - r).abs() > 1e-9 || r < 0.0 || r >= arity as f64 {
        None
    } else {
        Some(r as usize)
    }
}

fn check_simplex(w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| !(*v >= 0.0)) {
        return Err(SoberError::InvalidArgument(
            "simplex entries must be non-negative".into(),
        ));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL.max(1e-9 * w.len() as f64) {
        return Err(SoberError::InvalidArgument(format!(
            "simplex sums to {total}, expected 1"
        )));
    }
    Ok(())
}

fn check_covariance(dim: usize, cov: &[Vec<f64>]) -> Result<()> {
    if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
        return Err(SoberError::InvalidArgument(
            "covariance shape mismatch".into(),
        ));
    }
    covariance_factor(cov).map(|_| ())
}

fn covariance_matrix(cov: &[Vec<f64>]) -> DMatrix<f64> {
    let d = cov.len();
    DMatrix::from_fn(d, d, |i, j| cov[i][j])
}

fn covariance_factor(cov: &[Vec<f64>]) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    jittered_cholesky(&covariance_matrix(cov)).map(|(c, _)| c)
}

fn draw_gaussian<R: Rng>(
    mean: &[f64],
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    rng: &mut R,
) -> Vec<f64> {
    let d = mean.len();
    let z = crate::linalg::standard_normal_vector(d, rng);
    let x = chol.l() * z;
    (0..d).map(|k| mean[k] + x[k]).collect()
}

fn gaussian_log_density(
    x: &[f64],
    mean: &[f64],
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
) -> f64 {
    let d = mean.len();
    if x.len() != d {
        return f64::NEG_INFINITY;
    }
    let resid = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let mut v = resid.clone();
    if !chol.l().solve_lower_triangular_mut(&mut v) {
        return f64::NEG_INFINITY;
    }
    let logdet: f64 = chol.l().diagonal().iter().map(|l| l.ln()).sum();
    -0.5 * v.norm_squared() - logdet - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Weighted maximum-likelihood refit within the family of `template`.
///
/// The template supplies the family shape (mixture size, categorical
/// arities, box bounds); its numeric parameters are replaced by the
/// weighted estimates.
pub fn weighted_mle_fit(
    template: &DomainPrior,
    points: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<DomainPrior> {
    if points.nrows() != weights.len() {
        return Err(SoberError::DimensionMismatch {
            context: "mle points vs weights",
            expected: points.nrows(),
            got: weights.len(),
        });
    }
    if points.ncols() != template.dim() {
        return Err(SoberError::DimensionMismatch {
            context: "mle points vs family dimension",
            expected: template.dim(),
            got: points.ncols(),
        });
    }
    check_simplex(weights.as_slice())?;
    let w = weights / weights.sum();
    match template {
        DomainPrior::Bernoulli { .. } => {
            let d = points.ncols();
            let p: Vec<f64> = (0..d)
                .map(|k| {
                    points
                        .column(k)
                        .iter()
                        .zip(w.iter())
                        .map(|(x, wi)| wi * x)
                        .sum::<f64>()
                        .clamp(0.0, 1.0)
                })
                .collect();
            Ok(DomainPrior::Bernoulli { p })
        }
        DomainPrior::Categorical { tables } => {
            let mut out = Vec::with_capacity(tables.len());
            for (k, table) in tables.iter().enumerate() {
                let mut freq = vec![0.0; table.len()];
                for (i, wi) in w.iter().enumerate() {
                    let code = discrete_code(points[(i, k)], table.len()).ok_or_else(|| {
                        SoberError::InvalidArgument(format!(
                            "point {i} has invalid categorical code in dimension {k}"
                        ))
                    })?;
                    freq[code] += wi;
                }
                let total: f64 = freq.iter().sum();
                for f in freq.iter_mut() {
                    *f /= total;
                }
                out.push(freq);
            }
            Ok(DomainPrior::Categorical { tables: out })
        }
        DomainPrior::Gaussian { .. } => {
            let (mean, cov) = weighted_moments(points, &w);
            let d = mean.len();
            let mut cov_vec: Vec<Vec<f64>> = (0..d)
                .map(|i| (0..d).map(|j| cov[(i, j)]).collect())
                .collect();
            // Only floor a covariance the factorisation cannot handle.
            if covariance_factor(&cov_vec).is_err() {
                let scale = cov.diagonal().max().max(1e-12);
                for (i, row) in cov_vec.iter_mut().enumerate() {
                    row[i] += 1e-9 * scale;
                }
            }
            Ok(DomainPrior::Gaussian {
                mean: mean.iter().cloned().collect(),
                covariance: cov_vec,
            })
        }
        DomainPrior::ContinuousUniform { lower, upper } => {
            let d = points.ncols();
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for (i, wi) in w.iter().enumerate() {
                if *wi <= 0.0 {
                    continue;
                }
                for k in 0..d {
                    lo[k] = lo[k].min(points[(i, k)]);
                    hi[k] = hi[k].max(points[(i, k)]);
                }
            }
            for k in 0..d {
                let range = (hi[k] - lo[k]).max(0.0);
                let pad =
                    (ENVELOPE_EXPANSION * range).max(1e-9 * (1.0 + lo[k].abs().max(hi[k].abs())));
                // Expand the support envelope, clipped to the family's own box.
                lo[k] = (lo[k] - pad).max(lower[k]);
                hi[k] = (hi[k] + pad).min(upper[k]);
                if !(lo[k] < hi[k]) {
                    lo[k] = lower[k];
                    hi[k] = upper[k];
                }
            }
            Ok(DomainPrior::ContinuousUniform {
                lower: lo,
                upper: hi,
            })
        }
        DomainPrior::Gmm {
            weights: comp_w,
            bounds,
            ..
        } => weighted_em(points, &w, comp_w.len(), bounds.clone()),
        DomainPrior::MixedProduct {
            continuous,
            discrete,
        } => {
            let k = continuous.dim();
            let left = points.columns(0, k).into_owned();
            let right = points.columns(k, points.ncols() - k).into_owned();
            Ok(DomainPrior::MixedProduct {
                continuous: Box::new(weighted_mle_fit(continuous, &left, &w)?),
                discrete: Box::new(weighted_mle_fit(discrete, &right, &w)?),
            })
        }
    }
}

fn weighted_moments(points: &DMatrix<f64>, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let d = points.ncols();
    let mut mean = DVector::zeros(d);
    for (i, wi) in w.iter().enumerate() {
        mean.axpy(*wi, &points.row(i).transpose(), 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (i, wi) in w.iter().enumerate() {
        let resid = points.row(i).transpose() - &mean;
        cov.syger(*wi, &resid, &resid, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..d {
        for j in (i + 1)..d {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    (mean, cov)
}

/// Weighted expectation-maximisation for a Gaussian mixture.
///
/// Deterministic farthest-point initialisation; at most 50 iterations or a
/// relative log-likelihood change below 1e-6; per-dimension covariance floor
/// of `1e-6 * width^2` to prevent collapse.
fn weighted_em(
    points: &DMatrix<f64>,
    w: &DVector<f64>,
    k: usize,
    bounds: Option<(Vec<f64>, Vec<f64>)>,
) -> Result<DomainPrior> {
    let n = points.nrows();
    let d = points.ncols();
    if k == 0 || n < k {
        return Err(SoberError::InvalidArgument(format!(
            "mixture fit needs at least K={k} points, got {n}"
        )));
    }
    let widths: Vec<f64> = match &bounds {
        Some((lo, hi)) => lo.iter().zip(hi).map(|(l, u)| u - l).collect(),
        None => (0..d)
            .map(|c| {
                let col = points.column(c);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in col.iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                (hi - lo).max(0.0)
            })
            .collect(),
    };
    let floor: Vec<f64> = widths
        .iter()
        .map(|wd| (GMM_COV_FLOOR * wd * wd).max(1e-12))
        .collect();

    // Farthest-point seeding, starting at the heaviest point.
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    let start = (0..n)
        .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap())
        .unwrap();
    centers.push(start);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| (points.row(i) - points.row(start)).norm_squared())
        .collect();
    while centers.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| min_d2[a].partial_cmp(&min_d2[b]).unwrap())
            .unwrap();
        centers.push(next);
        for (i, slot) in min_d2.iter_mut().enumerate() {
            *slot = slot.min((points.row(i) - points.row(next)).norm_squared());
        }
    }

    let (_, global_cov) = weighted_moments(points, w);
    let mut comp_w = vec![1.0 / k as f64; k];
    let mut means: Vec<DVector<f64>> = centers
        .iter()
        .map(|&i| points.row(i).transpose().into_owned())
        .collect();
    let mut covs: Vec<DMatrix<f64>> = (0..k)
        .map(|_| {
            let mut c = global_cov.clone();
            for (i, f) in floor.iter().enumerate() {
                c[(i, i)] += f;
            }
            c
        })
        .collect();

    let mut last_ll = f64::NEG_INFINITY;
    let mut resp = DMatrix::zeros(n, k);
    for _ in 0..50 {
        // E step in log space.
        let factors: Vec<_> = covs
            .iter()
            .map(|c| jittered_cholesky(c).map(|(f, _)| f))
            .collect::<Result<_>>()?;
        let mut ll = 0.0;
        for i in 0..n {
            let x: Vec<f64> = points.row(i).iter().cloned().collect();
            let terms: Vec<f64> = (0..k)
                .map(|j| {
                    comp_w[j].max(1e-300).ln()
                        + gaussian_log_density(&x, means[j].as_slice(), &factors[j])
                })
                .collect();
            let norm = log_sum_exp(&terms);
            ll += w[i] * norm;
            for j in 0..k {
                resp[(i, j)] = (terms[j] - norm).exp();
            }
        }
        // M step with sample weights folded into the responsibilities.
        for j in 0..k {
            let mass: f64 = (0..n).map(|i| w[i] * resp[(i, j)]).sum();
            if mass < 1e-12 {
                comp_w[j] = 1e-12;
                covs[j] = DMatrix::from_diagonal(&DVector::from_vec(floor.clone()));
                continue;
            }
            comp_w[j] = mass;
            let mut mu = DVector::zeros(d);
            for i in 0..n {
                mu.axpy(w[i] * resp[(i, j)] / mass, &points.row(i).transpose(), 1.0);
            }
            let mut cov = DMatrix::zeros(d, d);
            for i in 0..n {
                let r = points.row(i).transpose() - &mu;
                cov.syger(w[i] * resp[(i, j)] / mass, &r, &r, 1.0);
            }
            for a in 0..d {
                for b in (a + 1)..d {
                    cov[(a, b)] = cov[(b, a)];
                }
                cov[(a, a)] += floor[a];
            }
            means[j] = mu;
            covs[j] = cov;
        }
        let total: f64 = comp_w.iter().sum();
        for cw in comp_w.iter_mut() {
            *cw /= total;
        }
        if (ll - last_ll).abs() < 1e-6 * (1.0 + ll.abs()) {
            break;
        }
        last_ll = ll;
    }

    Ok(DomainPrior::Gmm {
        weights: comp_w,
        means: means.iter().map(|m| m.iter().cloned().collect()).collect(),
        covariances: covs
            .iter()
            .map(|c| {
                (0..d)
                    .map(|i| (0..d).map(|j| c[(i, j)]).collect())
                    .collect()
            })
            .collect(),
        bounds,
    })
}

/// Output of [`sir`]: the empirical measure, the refitted proposal and the
/// effective sample sizes of both weighting stages.
#[derive(Debug, Clone)]
pub struct SirOutcome {
    pub measure: EmpiricalMeasure,
    pub refitted: DomainPrior,
    pub ess_first_stage: f64,
    pub ess: f64,
    /// The support was enumerated exactly instead of sampled.
    pub enumerated: bool,
}

/// Sequential importance resampling of an unnormalised log-target.
///
/// Sample `n` points from the prior, weight by `target - log prior`, refit
/// the proposal by weighted MLE, resample, and reweight against the refit.
/// Fully discrete priors whose support fits in `n` atoms are enumerated
/// exactly: the returned weights are then the normalised target masses.
pub fn sir<F>(prior: &DomainPrior, target: F, n: usize, seed: u64) -> Result<SirOutcome>
where
    F: Fn(&DMatrix<f64>) -> DVector<f64>,
{
    sir_with_proposal(prior, None, target, n, seed)
}

/// [`sir`] with an explicit proposal family template for the refit step
/// (e.g. a bounded Gaussian mixture for box-constrained continuous domains).
pub fn sir_with_proposal<F>(
    prior: &DomainPrior,
    proposal_template: Option<&DomainPrior>,
    target: F,
    n: usize,
    seed: u64,
) -> Result<SirOutcome>
where
    F: Fn(&DMatrix<f64>) -> DVector<f64>,
{
    if n == 0 {
        return Err(SoberError::InvalidArgument("sir needs n >= 1".into()));
    }
    prior.validate()?;
    if let Some(atoms) = prior.enumerate_support(n) {
        let logw = target(&atoms);
        let measure = EmpiricalMeasure::from_log_weights(atoms.clone(), &logw)?;
        let refitted = weighted_mle_fit(
            proposal_template.unwrap_or(prior),
            &atoms,
            measure.weights(),
        )?;
        let ess = measure.effective_sample_size();
        return Ok(SirOutcome {
            measure,
            refitted,
            ess_first_stage: ess,
            ess,
            enumerated: true,
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let first = prior.sample_rng(n, &mut rng)?;
    let log_ratio = {
        let lt = target(&first);
        let lp = prior.log_density_batch(&first);
        DVector::from_fn(n, |i, _| diff_log(lt[i], lp[i]))
    };
    let w1 = normalise_log_weights(&log_ratio)?;
    let ess_first = {
        let s2: f64 = w1.iter().map(|v| v * v).sum();
        1.0 / s2
    };
    let template = proposal_template.unwrap_or(prior);
    let refitted = weighted_mle_fit(template, &first, &w1)?;

    let second = refitted.sample_rng(n, &mut rng)?;
    let log_ratio2 = {
        let lt = target(&second);
        let lq = refitted.log_density_batch(&second);
        DVector::from_fn(n, |i, _| diff_log(lt[i], lq[i]))
    };
    let measure = EmpiricalMeasure::from_log_weights(second, &log_ratio2)?;
    let ess = measure.effective_sample_size();
    Ok(SirOutcome {
        measure,
        refitted,
        ess_first_stage: ess_first,
        ess,
        enumerated: false,
    })
}

fn diff_log(target: f64, proposal: f64) -> f64 {
    if target == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if proposal == f64::NEG_INFINITY {
        // The proposal should cover the target; treat escapes as zero weight.
        f64::NEG_INFINITY
    } else {
        target - proposal
    }
}
