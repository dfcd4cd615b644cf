//! Probabilistic lifting: targets over the location of the global optimum.
//!
//! The closed-form target is the synthetic likelihood
//! `pi(x) ∝ Phi((m(x) - y_best) / sqrt(C(x, x)))`, i.e. the probability of
//! improving on the incumbent. The Thompson-sampling variant instead builds
//! an empirical measure from joint posterior draws over a candidate set.
//! Feasibility models tilt either target by the joint probability that all
//! black-box constraints are satisfied.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::domain::EmpiricalMeasure;
use crate::error::{Result, SoberError};
use crate::gp::GpPosterior;
use crate::linalg::jittered_cholesky;

/// Variance floor applied before dividing by the posterior deviation.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Largest candidate set for dense joint Thompson draws.
pub const DENSE_TS_LIMIT: usize = 4096;

const LN_SQRT_2PI: f64 = 0.9189385332046727;

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// `ln Phi(z)`, stable far into the lower tail.
///
/// Below `z = -8` the asymptotic expansion
/// `Phi(z) ~ phi(z)/(-z) * (1 - 1/z^2 + 3/z^4 - ...)` replaces the erfc
/// route, which would otherwise lose all precision by `z ~ -37`.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if z >= -8.0 {
        return normal_cdf(z).ln();
    }
    let inv2 = 1.0 / (z * z);
    let series =
        1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * (105.0 - 945.0 * inv2))));
    -0.5 * z * z - LN_SQRT_2PI - (-z).ln() + series.ln()
}

/// The improvement-probability target `log pi(x)`.
#[derive(Debug, Clone, Copy)]
pub struct LfiTarget<'a> {
    gp: &'a GpPosterior,
    y_best: f64,
}

/// Builds the evaluator `x -> ln Phi((m(x) - y_best) / sqrt(C(x, x)))`.
pub fn lfi_log_pi(gp: &GpPosterior, y_best: f64) -> LfiTarget<'_> {
    LfiTarget { gp, y_best }
}

impl LfiTarget<'_> {
    pub fn y_best(&self) -> f64 {
        self.y_best
    }

    pub fn evaluate(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mean = self.gp.mean(points)?;
        let var = self.gp.var_diag(points)?;
        Ok(DVector::from_fn(points.nrows(), |i, _| {
            let z = (mean[i] - self.y_best) / var[i].max(VARIANCE_FLOOR).sqrt();
            log_normal_cdf(z)
        }))
    }
}

/// GP models of the black-box constraints `g_l(x) >= 0`.
#[derive(Debug, Clone)]
pub struct ConstraintModel {
    models: Vec<GpPosterior>,
}

impl ConstraintModel {
    pub fn new(models: Vec<GpPosterior>) -> Result<Self> {
        if let Some(first) = models.first() {
            let d = first.dim();
            for m in &models {
                if m.dim() != d {
                    return Err(SoberError::DimensionMismatch {
                        context: "constraint model input dimension",
                        expected: d,
                        got: m.dim(),
                    });
                }
            }
        }
        Ok(ConstraintModel { models })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[GpPosterior] {
        &self.models
    }

    fn log_feasibility(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(points.nrows());
        for gp in &self.models {
            let mean = gp.mean(points)?;
            let var = gp.var_diag(points)?;
            let noise = gp.data().noise_variance();
            for i in 0..points.nrows() {
                out[i] += log_normal_cdf(feasibility_z(mean[i], var[i] + noise));
            }
        }
        Ok(out)
    }
}

fn feasibility_z(mean: f64, variance: f64) -> f64 {
    let dev = variance.max(0.0).sqrt();
    if dev > 0.0 {
        mean / dev
    } else if mean > 0.0 {
        f64::INFINITY
    } else if mean < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    }
}

/// Joint probability of feasibility `q~(x) = prod_l Phi(m_l / sqrt(C_l + s2_l))`.
pub fn feasibility(models: &ConstraintModel, points: &DMatrix<f64>) -> Result<DVector<f64>> {
    let log_q = models.log_feasibility(points)?;
    Ok(log_q.map(|v| v.exp().clamp(0.0, 1.0)))
}

/// The LFI target tilted by joint feasibility: `log pi(x) + log q~(x)`.
#[derive(Debug, Clone, Copy)]
pub struct ConstrainedTarget<'a> {
    base: LfiTarget<'a>,
    models: &'a ConstraintModel,
}

pub fn constrained_log_pi<'a>(
    base: LfiTarget<'a>,
    models: &'a ConstraintModel,
) -> ConstrainedTarget<'a> {
    ConstrainedTarget { base, models }
}

impl ConstrainedTarget<'_> {
    pub fn evaluate(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        let base = self.base.evaluate(points)?;
        let tilt = self.models.log_feasibility(points)?;
        Ok(base + tilt)
    }
}

/// Empirical distribution of the posterior argmax over a finite candidate
/// set, estimated from `draws` joint GP samples.
///
/// Candidate sets beyond [`DENSE_TS_LIMIT`] are rejected; use
/// [`ts_empirical_chunked`] for larger sets (approximate: covariance across
/// chunks is ignored).
pub fn ts_empirical(
    gp: &GpPosterior,
    candidates: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    if candidates.nrows() > DENSE_TS_LIMIT {
        return Err(SoberError::InvalidArgument(format!(
            "{} candidates exceed the dense joint-sampling limit {DENSE_TS_LIMIT}",
            candidates.nrows()
        )));
    }
    if draws == 0 {
        return Err(SoberError::InvalidArgument("draws must be >= 1".into()));
    }
    let n = candidates.nrows();
    let (mean, cov) = gp.mean_cov(candidates, candidates)?;
    let max_var = (0..n).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
    let mut counts = vec![0usize; n];
    if max_var <= VARIANCE_FLOOR * gp.kernel().outputscale().max(1.0) {
        counts[argmax(&mean)] = draws;
    } else {
        let (chol, _) = jittered_cholesky(&cov)?;
        let l = chol.l();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sample = DVector::zeros(n);
        for _ in 0..draws {
            let z = crate::linalg::standard_normal_vector(n, &mut rng);
            sample.gemv(1.0, &l, &z, 0.0);
            sample += &mean;
            counts[argmax(&sample)] += 1;
        }
    }
    let weights = DVector::from_iterator(n, counts.iter().map(|c| *c as f64 / draws as f64));
    EmpiricalMeasure::new(candidates.clone(), weights)
}

/// Chunked variant for candidate sets beyond the dense limit. Each chunk is
/// sampled jointly with shared data conditioning; cross-chunk covariance is
/// dropped, so argmax frequencies are approximate.
pub fn ts_empirical_chunked(
    gp: &GpPosterior,
    candidates: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<EmpiricalMeasure> {
    ts_empirical_chunked_with(gp, candidates, draws, seed, DENSE_TS_LIMIT)
}

fn ts_empirical_chunked_with(
    gp: &GpPosterior,
    candidates: &DMatrix<f64>,
    draws: usize,
    seed: u64,
    chunk: usize,
) -> Result<EmpiricalMeasure> {
    let n = candidates.nrows();
    if n <= chunk {
        return ts_empirical(gp, candidates, draws, seed);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let chunk_starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let mut factors = Vec::with_capacity(chunk_starts.len());
    for &start in &chunk_starts {
        let len = chunk.min(n - start);
        let block = candidates.rows(start, len).into_owned();
        let (mean, cov) = gp.mean_cov(&block, &block)?;
        let chol = jittered_cholesky(&cov)?.0;
        factors.push((start, len, mean, chol));
    }
    let mut counts = vec![0usize; n];
    let mut values = DVector::zeros(n);
    for _ in 0..draws {
        for (start, len, mean, chol) in &factors {
            let z = crate::linalg::standard_normal_vector(*len, &mut rng);
            let s = chol.l() * z + mean;
            values.rows_mut(*start, *len).copy_from(&s);
        }
        counts[argmax(&values)] += 1;
    }
    let weights = DVector::from_iterator(n, counts.iter().map(|c| *c as f64 / draws as f64));
    EmpiricalMeasure::new(candidates.clone(), weights)
}

fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
