//! Batch selection by kernel quadrature.
//!
//! Given an empirical measure, a Nyström basis of the posterior covariance
//! and an optional reward/feasibility pair, [`select_batch`] extracts a
//! convex weighted subset: exact moment matching via recombination, or the
//! tolerance LP solved by the bounded simplex when a precision budget or
//! constraints are in play. The worst-case quadrature error of a rule
//! against its parent measure is the MMD quadratic form.

mod recombination;
mod simplex;

pub use recombination::{recombination, recombination_with_objective};
pub use simplex::{solve_bounded_lp, LpSolution};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::EmpiricalMeasure;
use crate::error::{Result, SoberError};
use crate::gp::GpPosterior;
use crate::lifting::{feasibility, normal_cdf, normal_pdf, ConstraintModel};
use crate::nystrom::{CovarianceFn, NystromBasis};

/// Numerical slack used in place of an exactly-zero LP tolerance.
pub const EPS_LP_FLOOR: f64 = 1e-8;
/// Weights below this threshold are pruned from LP solutions.
const WEIGHT_PRUNE: f64 = 1e-12;

/// A convex weighted subset of a parent measure.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    points: DMatrix<f64>,
    weights: DVector<f64>,
    indices: Vec<usize>,
    moment_residual: f64,
    eps_lp: f64,
}

impl QuadratureRule {
    /// Builds a rule from parent-measure indices and weights. Identical
    /// point rows are merged, zero weights pruned, and the total mass
    /// renormalised to 1.
    pub(crate) fn from_measure(
        measure: &EmpiricalMeasure,
        indices: Vec<usize>,
        weights: Vec<f64>,
        eps_lp: f64,
    ) -> Result<Self> {
        if indices.len() != weights.len() || indices.is_empty() {
            return Err(SoberError::InvalidArgument(
                "rule needs matching, non-empty indices and weights".into(),
            ));
        }
        // Merge bit-identical rows, keeping the first index.
        let mut kept: Vec<(usize, f64)> = Vec::with_capacity(indices.len());
        'outer: for (&idx, &w) in indices.iter().zip(weights.iter()) {
            if w <= 0.0 {
                continue;
            }
            let row = measure.points().row(idx);
            for (kidx, kw) in kept.iter_mut() {
                if measure.points().row(*kidx) == row {
                    *kw += w;
                    continue 'outer;
                }
            }
            kept.push((idx, w));
        }
        if kept.is_empty() {
            return Err(SoberError::InvalidArgument(
                "rule has no positive weights".into(),
            ));
        }
        let total: f64 = kept.iter().map(|(_, w)| w).sum();
        let n = kept.len();
        let mut points = DMatrix::zeros(n, measure.dim());
        let mut wvec = DVector::zeros(n);
        let mut idxs = Vec::with_capacity(n);
        for (row, (idx, w)) in kept.into_iter().enumerate() {
            points.row_mut(row).copy_from(&measure.points().row(idx));
            wvec[row] = w / total;
            idxs.push(idx);
        }
        Ok(QuadratureRule {
            points,
            weights: wvec,
            indices: idxs,
            moment_residual: 0.0,
            eps_lp,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// Row indices into the parent measure.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Largest relative moment gap achieved against the parent measure.
    pub fn moment_residual(&self) -> f64 {
        self.moment_residual
    }

    /// The tolerance the solver was run with (0 for exact recombination).
    pub fn eps_lp(&self) -> f64 {
        self.eps_lp
    }

    pub(crate) fn set_moment_residual(&mut self, value: f64) {
        self.moment_residual = value;
    }

    pub fn as_measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.points.clone(), self.weights.clone())
            .expect("rule weights form a valid measure")
    }
}

/// Largest relative moment gap of a rule against its parent measure.
pub fn moment_gap(
    measure: &EmpiricalMeasure,
    moments: &DMatrix<f64>,
    rule: &QuadratureRule,
) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..moments.ncols() {
        let full: f64 = (0..measure.len())
            .map(|i| measure.weights()[i] * moments[(i, c)])
            .sum();
        let reduced: f64 = rule
            .indices
            .iter()
            .zip(rule.weights.iter())
            .map(|(&i, &w)| w * moments[(i, c)])
            .sum();
        worst = worst.max((full - reduced).abs() / (1.0 + full.abs()));
    }
    worst
}

/// Reward functions layered on top of the quadrature objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Zero,
    Ucb,
    Ei,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub reward: RewardKind,
    /// UCB exploration weight; must be positive when `reward` is `Ucb`.
    pub beta: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            reward: RewardKind::Zero,
            beta: 2.0,
        }
    }
}

/// Evaluates the acquisition reward at each point.
pub fn reward(
    gp: &GpPosterior,
    config: &AcquisitionConfig,
    points: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    match config.reward {
        RewardKind::Zero => Ok(DVector::zeros(points.nrows())),
        RewardKind::Ucb => {
            if !(config.beta > 0.0) {
                return Err(SoberError::InvalidArgument("UCB requires beta > 0".into()));
            }
            let mean = gp.mean(points)?;
            let var = gp.var_diag(points)?;
            Ok(DVector::from_fn(points.nrows(), |i, _| {
                mean[i] + config.beta.sqrt() * var[i].sqrt()
            }))
        }
        RewardKind::Ei => {
            let incumbent = if gp.data().is_empty() {
                gp.prior_mean()
            } else {
                gp.mean(gp.data().x())?.max()
            };
            let mean = gp.mean(points)?;
            let var = gp.var_diag(points)?;
            Ok(DVector::from_fn(points.nrows(), |i, _| {
                let sd = var[i].sqrt();
                let gain = mean[i] - incumbent;
                if sd > 0.0 {
                    let z = gain / sd;
                    gain * normal_cdf(z) + sd * normal_pdf(z)
                } else {
                    gain.max(0.0)
                }
            }))
        }
    }
}

/// The MMD quadratic form between a rule and its parent measure, before
/// clamping. The `N x N` term is evaluated in row blocks so large candidate
/// sets never materialise a full Gram matrix.
pub fn mmd_squared_raw(
    rule: &QuadratureRule,
    measure: &EmpiricalMeasure,
    kernel: &dyn CovarianceFn,
) -> Result<f64> {
    let wn = rule.weights();
    let rule_gram = kernel.cross(rule.points(), rule.points())?;
    let rr = (wn.transpose() * rule_gram * wn)[(0, 0)];
    let cross = kernel.cross(rule.points(), measure.points())?;
    let rm = (wn.transpose() * cross * measure.weights())[(0, 0)];
    let mut mm = 0.0;
    let block = 2048usize;
    let mut start = 0;
    while start < measure.len() {
        let len = block.min(measure.len() - start);
        let rows = measure.points().rows(start, len).into_owned();
        let band = kernel.cross(&rows, measure.points())?;
        let wchunk = measure.weights().rows(start, len);
        mm += (wchunk.transpose() * band * measure.weights())[(0, 0)];
        start += len;
    }
    Ok(rr - 2.0 * rm + mm)
}

/// `MMD^2(rule, measure)` clamped at zero; its square root is the worst-case
/// quadrature error.
pub fn mmd_squared(
    rule: &QuadratureRule,
    measure: &EmpiricalMeasure,
    kernel: &dyn CovarianceFn,
) -> Result<f64> {
    Ok(mmd_squared_raw(rule, measure, kernel)?.max(0.0))
}

/// Worst-case error of the rule: `sqrt(mmd_squared)`.
pub fn wce(
    rule: &QuadratureRule,
    measure: &EmpiricalMeasure,
    kernel: &dyn CovarianceFn,
) -> Result<f64> {
    Ok(mmd_squared(rule, measure, kernel)?.sqrt())
}

/// Tolerance policy for the LP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsPolicy {
    Fixed(f64),
    /// Track the expected violation rate (`eps_lp = eps_vio`).
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpMode {
    ExactRecombination,
    ToleranceLp,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LpSettings {
    pub eps: EpsPolicy,
    pub n_max: usize,
    pub mode: LpMode,
}

impl LpSettings {
    pub fn exact(n_max: usize) -> Self {
        LpSettings {
            eps: EpsPolicy::Fixed(0.0),
            n_max,
            mode: LpMode::ExactRecombination,
        }
    }

    pub fn tolerance(eps: f64, n_max: usize) -> Self {
        LpSettings {
            eps: EpsPolicy::Fixed(eps),
            n_max,
            mode: LpMode::ToleranceLp,
        }
    }

    pub fn adaptive(n_max: usize) -> Self {
        LpSettings {
            eps: EpsPolicy::Adaptive,
            n_max,
            mode: LpMode::ToleranceLp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(SoberError::InvalidArgument("n_max must be >= 1".into()));
        }
        if let EpsPolicy::Fixed(v) = self.eps {
            if !(v >= 0.0) {
                return Err(SoberError::InvalidArgument(
                    "eps_lp must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Result of the tolerance LP, with the achieved objective and slacks.
#[derive(Debug, Clone)]
pub struct LpOutcome {
    pub rule: QuadratureRule,
    pub objective: f64,
    pub iterations: usize,
    /// `|(w - w^N)^T phi_j|` per retained test function.
    pub moment_gaps: Vec<f64>,
    /// `(w - w^N)^T q~`, when a feasibility vector was supplied.
    pub feasibility_slack: Option<f64>,
}

/// Solves the tolerance LP
/// `max w^T [alpha .* q~]` subject to
/// `|(w - w^N)^T phi_j| <= eps_lp sqrt(lambda_j / r)`, `(w - w^N)^T q~ >= 0`,
/// `w^T 1 = 1`, `w >= 0`, returning a vertex solution (so the support never
/// exceeds the row count).
///
/// The uniform candidate weights are always feasible; an infeasible report
/// from the simplex is therefore an internal error. The tolerance is floored
/// at 1e-8 to absorb floating-point noise, and `r` (the retained
/// test-function count) replaces the nominal `n - 2` in the per-moment
/// scaling whenever rank truncation leaves fewer functions.
pub fn solve_lp(
    measure: &EmpiricalMeasure,
    moments: &DMatrix<f64>,
    eigenvalues: &DVector<f64>,
    reward_vec: &DVector<f64>,
    feasibility_vec: Option<&DVector<f64>>,
    settings: &LpSettings,
) -> Result<LpOutcome> {
    settings.validate()?;
    let n_candidates = measure.len();
    let r = moments.ncols();
    if moments.nrows() != n_candidates || reward_vec.len() != n_candidates {
        return Err(SoberError::DimensionMismatch {
            context: "LP inputs vs measure size",
            expected: n_candidates,
            got: moments.nrows(),
        });
    }
    if eigenvalues.len() != r {
        return Err(SoberError::DimensionMismatch {
            context: "eigenvalues vs moment columns",
            expected: r,
            got: eigenvalues.len(),
        });
    }
    if feasibility_vec.is_some() && settings.n_max < 3 {
        return Err(SoberError::InvalidArgument(
            "the constrained LP needs n_max >= 3".into(),
        ));
    }

    let q = feasibility_vec.cloned();
    let eps_vio = q
        .as_ref()
        .map(|qv| (1.0 - measure.weights().dot(qv)).clamp(0.0, 1.0))
        .unwrap_or(0.0);
    let eps = match settings.eps {
        EpsPolicy::Fixed(v) => v,
        EpsPolicy::Adaptive => eps_vio,
    }
    .max(EPS_LP_FLOOR);

    let has_q = q.is_some();
    let m = r + usize::from(has_q) + 1;
    let nvars = n_candidates + r + usize::from(has_q);
    let mut a = DMatrix::zeros(m, nvars);
    let mut b = DVector::zeros(m);
    let mut upper = vec![f64::INFINITY; nvars];
    let denom = r.max(1) as f64;
    for j in 0..r {
        let band = eps * (eigenvalues[j].max(0.0) / denom).sqrt();
        for i in 0..n_candidates {
            a[(j, i)] = moments[(i, j)];
        }
        a[(j, n_candidates + j)] = 1.0;
        upper[n_candidates + j] = 2.0 * band;
        let base: f64 = (0..n_candidates)
            .map(|i| measure.weights()[i] * moments[(i, j)])
            .sum();
        b[j] = base + band;
    }
    if let Some(qv) = &q {
        let row = r;
        for i in 0..n_candidates {
            a[(row, i)] = qv[i];
        }
        a[(row, n_candidates + r)] = -1.0;
        b[row] = measure.weights().dot(qv);
    }
    let mass_row = m - 1;
    for i in 0..n_candidates {
        a[(mass_row, i)] = 1.0;
    }
    b[mass_row] = 1.0;

    let mut c = DVector::zeros(nvars);
    for i in 0..n_candidates {
        c[i] = reward_vec[i] * q.as_ref().map(|qv| qv[i]).unwrap_or(1.0);
    }

    let sol = solve_bounded_lp(&a, &b, &c, &upper)?;
    let mut indices = Vec::new();
    let mut weights = Vec::new();
    for i in 0..n_candidates {
        if sol.x[i] > WEIGHT_PRUNE {
            indices.push(i);
            weights.push(sol.x[i]);
        }
    }
    let mut rule = QuadratureRule::from_measure(measure, indices, weights, eps)?;

    let mut moment_gaps = Vec::with_capacity(r);
    for j in 0..r {
        let full: f64 = (0..n_candidates)
            .map(|i| measure.weights()[i] * moments[(i, j)])
            .sum();
        let got: f64 = rule
            .indices()
            .iter()
            .zip(rule.weights().iter())
            .map(|(&i, &w)| w * moments[(i, j)])
            .sum();
        moment_gaps.push((got - full).abs());
    }
    rule.set_moment_residual(moment_gap(measure, moments, &rule));
    let feasibility_slack = q.as_ref().map(|qv| {
        let got: f64 = rule
            .indices()
            .iter()
            .zip(rule.weights().iter())
            .map(|(&i, &w)| w * qv[i])
            .sum();
        got - measure.weights().dot(qv)
    });
    Ok(LpOutcome {
        rule,
        objective: sol.objective,
        iterations: sol.iterations,
        moment_gaps,
        feasibility_slack,
    })
}

/// Diagnostics reported with every batch selection.
#[derive(Debug, Clone, Copy)]
pub struct BatchDiagnostics {
    pub mmd2: f64,
    pub batch_size: usize,
    pub eps_vio: f64,
    pub eps_nys: f64,
    pub eps_lp: f64,
    /// Achieved `w^T [alpha .* q~]`.
    pub objective: f64,
    /// Rank truncation left fewer test functions than the nominal count.
    pub rank_reduced: bool,
}

#[derive(Debug, Clone)]
pub struct BatchSelection {
    pub rule: QuadratureRule,
    pub diagnostics: BatchDiagnostics,
}

/// Orchestrates reward, feasibility, test functions and the chosen solver
/// into a batch: recombination for the exact mode, the tolerance LP
/// otherwise. With constraints and the adaptive policy the tolerance tracks
/// the expected violation rate.
pub fn select_batch(
    gp: &GpPosterior,
    measure: &EmpiricalMeasure,
    basis: &NystromBasis<'_>,
    acquisition: &AcquisitionConfig,
    constraints: Option<&ConstraintModel>,
    settings: &LpSettings,
) -> Result<BatchSelection> {
    settings.validate()?;
    let n = settings.n_max.min(measure.len());
    if n < 2 {
        return Err(SoberError::InvalidArgument(
            "batch selection needs n_max >= 2".into(),
        ));
    }
    let alpha = reward(gp, acquisition, measure.points())?;
    let q = match constraints {
        Some(models) if !models.is_empty() => Some(feasibility(models, measure.points())?),
        _ => None,
    };
    let eps_vio = q
        .as_ref()
        .map(|qv| (1.0 - measure.weights().dot(qv)).clamp(0.0, 1.0))
        .unwrap_or(0.0);

    let residual = basis.residual_sqrt_diagonal(measure.points())?;
    let eps_nys = residual.iter().cloned().fold(0.0f64, f64::max);

    let (rule, eps_lp, objective, rank_reduced) = match settings.mode {
        LpMode::ExactRecombination => {
            let nominal = n - 1;
            let r = nominal.min(basis.rank());
            let phi = basis.test_functions(measure.points())?;
            let moments = phi.columns(0, r).into_owned();
            let mut rule = recombination_with_objective(measure, &moments, n, Some(&residual))?;
            rule.set_moment_residual(moment_gap(measure, &moments, &rule));
            let objective: f64 = rule
                .indices()
                .iter()
                .zip(rule.weights().iter())
                .map(|(&i, &w)| w * alpha[i] * q.as_ref().map(|qv| qv[i]).unwrap_or(1.0))
                .sum();
            (rule, 0.0, objective, r < nominal)
        }
        LpMode::ToleranceLp => {
            let nominal = n.saturating_sub(2).max(1);
            let r = nominal.min(basis.rank());
            let phi = basis.test_functions(measure.points())?;
            let moments = phi.columns(0, r).into_owned();
            let lam = basis.eigenvalues().rows(0, r).into_owned();
            let outcome = solve_lp(measure, &moments, &lam, &alpha, q.as_ref(), settings)?;
            let eps = outcome.rule.eps_lp();
            (outcome.rule, eps, outcome.objective, r < nominal)
        }
    };

    let mmd2 = mmd_squared(&rule, measure, gp)?;
    let batch_size = rule.len();
    Ok(BatchSelection {
        rule,
        diagnostics: BatchDiagnostics {
            mmd2,
            batch_size,
            eps_vio,
            eps_nys,
            eps_lp,
            objective,
            rank_reduced,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_posterior, Dataset, Kernel};
    use crate::nystrom::build_basis;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn toy_gp() -> GpPosterior {
        let kernel = Kernel::rbf_iso(1, 0.4, 1.0).unwrap();
        let x = DMatrix::from_row_slice(4, 1, &[-1.0, -0.2, 0.5, 1.2]);
        let y = DVector::from_vec(vec![0.3, 0.9, -0.4, 0.6]);
        fit_posterior(Dataset::new(x, y, 0.01).unwrap(), kernel, 0.0).unwrap()
    }

    fn grid_measure(n: usize) -> EmpiricalMeasure {
        let pts = DMatrix::from_fn(n, 1, |i, _| -1.5 + 3.0 * i as f64 / (n - 1) as f64);
        EmpiricalMeasure::uniform(pts).unwrap()
    }

    #[test]
    fn zero_reward_is_zero() {
        let gp = toy_gp();
        let cfg = AcquisitionConfig {
            reward: RewardKind::Zero,
            beta: 2.0,
        };
        let pts = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let r = reward(&gp, &cfg, &pts).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ucb_with_vanishing_beta_tends_to_mean() {
        let gp = toy_gp();
        let pts = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let mean = gp.mean(&pts).unwrap();
        let cfg = AcquisitionConfig {
            reward: RewardKind::Ucb,
            beta: 1e-16,
        };
        let r = reward(&gp, &cfg, &pts).unwrap();
        assert_relative_eq!(r, mean, epsilon = 1e-7);
    }

    #[test]
    fn ei_vanishes_at_noiseless_incumbent() {
        let kernel = Kernel::rbf_iso(1, 0.5, 1.0).unwrap();
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DVector::from_vec(vec![0.1, 0.8, 0.4]);
        let gp = fit_posterior(Dataset::new(x, y, 0.0).unwrap(), kernel, 0.0).unwrap();
        let cfg = AcquisitionConfig {
            reward: RewardKind::Ei,
            beta: 2.0,
        };
        // The incumbent point (x = 1) has zero variance and mean equal to
        // the best posterior mean, so improvement is impossible there.
        let at = DMatrix::from_row_slice(1, 1, &[1.0]);
        let r = reward(&gp, &cfg, &at).unwrap();
        assert!(r[0].abs() <= 1e-8, "EI at incumbent {}", r[0]);
    }

    #[test]
    fn mmd_of_measure_against_itself_is_zero() {
        let gp = toy_gp();
        let measure = grid_measure(40);
        let all: Vec<usize> = (0..40).collect();
        let w: Vec<f64> = measure.weights().iter().cloned().collect();
        let rule = QuadratureRule::from_measure(&measure, all, w, 0.0).unwrap();
        let raw = mmd_squared_raw(&rule, &measure, &gp).unwrap();
        assert!(raw.abs() <= 1e-10, "raw mmd2 {raw}");
        assert!(raw >= -1e-10);
        assert!(mmd_squared(&rule, &measure, &gp).unwrap() >= 0.0);
    }

    #[test]
    fn mmd_matches_double_sum_oracle() {
        let gp = toy_gp();
        let measure = grid_measure(25);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let idx: Vec<usize> = (0..6).map(|_| rng.gen_range(0..25)).collect();
        let raw_w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw_w.iter().sum();
        let w: Vec<f64> = raw_w.iter().map(|v| v / total).collect();
        let rule = QuadratureRule::from_measure(&measure, idx, w, 0.0).unwrap();
        let got = mmd_squared_raw(&rule, &measure, &gp).unwrap();

        // O(N^2) double-sum oracle over all pairs.
        let npts = rule.len();
        let mut oracle = 0.0;
        let cov_nn = gp.cov(rule.points(), rule.points()).unwrap();
        for i in 0..npts {
            for j in 0..npts {
                oracle += rule.weights()[i] * rule.weights()[j] * cov_nn[(i, j)];
            }
        }
        let cov_nm = gp.cov(rule.points(), measure.points()).unwrap();
        for i in 0..npts {
            for j in 0..measure.len() {
                oracle -= 2.0 * rule.weights()[i] * measure.weights()[j] * cov_nm[(i, j)];
            }
        }
        let cov_mm = gp.cov(measure.points(), measure.points()).unwrap();
        for i in 0..measure.len() {
            for j in 0..measure.len() {
                oracle += measure.weights()[i] * measure.weights()[j] * cov_mm[(i, j)];
            }
        }
        assert_relative_eq!(got, oracle, epsilon = 1e-10, max_relative = 1e-8);
    }

    #[test]
    fn lp_with_zero_reward_keeps_moments_within_band() {
        let gp = toy_gp();
        let measure = grid_measure(120);
        let basis = build_basis(&gp, &measure, 40, 10, 3).unwrap();
        let phi = basis.test_functions(measure.points()).unwrap();
        let lam = basis.eigenvalues();
        let alpha = DVector::zeros(120);
        let settings = LpSettings::tolerance(1e-3, 12);
        let out = solve_lp(&measure, &phi, &lam, &alpha, None, &settings).unwrap();
        assert!(out.objective.abs() <= 1e-9);
        for (j, gap) in out.moment_gaps.iter().enumerate() {
            let band = 1e-3 * (lam[j] / phi.ncols() as f64).sqrt();
            assert!(*gap <= band + 1e-7, "moment {j}: {gap} > {band}");
        }
        assert!(out.rule.len() <= 12);
    }

    #[test]
    fn lp_objective_dominates_candidate_weights() {
        let gp = toy_gp();
        let measure = grid_measure(80);
        let basis = build_basis(&gp, &measure, 30, 8, 7).unwrap();
        let phi = basis.test_functions(measure.points()).unwrap();
        let lam = basis.eigenvalues();
        let alpha = reward(
            &gp,
            &AcquisitionConfig {
                reward: RewardKind::Ucb,
                beta: 2.0,
            },
            measure.points(),
        )
        .unwrap();
        let q = DVector::from_fn(80, |i, _| 0.5 + 0.4 * (i as f64 * 0.1).sin());
        let settings = LpSettings::tolerance(1e-2, 10);
        let out = solve_lp(&measure, &phi, &lam, &alpha, Some(&q), &settings).unwrap();
        let base: f64 = (0..80)
            .map(|i| measure.weights()[i] * alpha[i] * q[i])
            .sum();
        assert!(
            out.objective >= base - 1e-8,
            "objective {} below candidate value {base}",
            out.objective
        );
        assert!(out.feasibility_slack.unwrap() >= -1e-8);
        assert!(out.rule.len() <= 10);
    }

    #[test]
    fn larger_tolerance_shrinks_batches_in_the_median() {
        let ladder = [1e-4, 1e-3, 1e-2, 1e-1];
        let mut sizes = vec![Vec::new(); ladder.len()];
        for seed in 0..20u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
            let x = DMatrix::from_fn(6, 1, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(6, |i, _| (3.0f64 * x[(i, 0)]).sin());
            let gp = fit_posterior(
                Dataset::new(x, y, 0.01).unwrap(),
                Kernel::rbf_iso(1, 0.4, 1.0).unwrap(),
                0.0,
            )
            .unwrap();
            let pts = DMatrix::from_fn(300, 1, |_, _| rng.gen_range(-1.5..1.5));
            let measure = EmpiricalMeasure::uniform(pts).unwrap();
            let basis = build_basis(&gp, &measure, 60, 10, seed).unwrap();
            let phi = basis.test_functions(measure.points()).unwrap();
            let lam = basis.eigenvalues();
            let alpha = reward(
                &gp,
                &AcquisitionConfig {
                    reward: RewardKind::Ucb,
                    beta: 2.0,
                },
                measure.points(),
            )
            .unwrap();
            for (k, eps) in ladder.iter().enumerate() {
                let settings = LpSettings::tolerance(*eps, 12);
                let out = solve_lp(&measure, &phi, &lam, &alpha, None, &settings).unwrap();
                sizes[k].push(out.rule.len() as f64);
            }
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let medians: Vec<f64> = sizes.iter_mut().map(med).collect();
        for w in medians.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-12,
                "medians not non-increasing: {medians:?}"
            );
        }
    }

    #[test]
    fn exact_mode_returns_full_distinct_batch() {
        let gp = toy_gp();
        let measure = grid_measure(200);
        let basis = build_basis(&gp, &measure, 60, 7, 11).unwrap();
        let sel = select_batch(
            &gp,
            &measure,
            &basis,
            &AcquisitionConfig::default(),
            None,
            &LpSettings::exact(8),
        )
        .unwrap();
        assert_eq!(sel.rule.len(), 8);
        let total: f64 = sel.rule.weights().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-10);
        assert!(sel.rule.weights().iter().all(|w| *w > 0.0));
        // All batch points are distinct rows.
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(sel.rule.points().row(i), sel.rule.points().row(j));
            }
        }
        assert!(sel.diagnostics.mmd2 >= 0.0);
        assert_eq!(sel.diagnostics.eps_vio, 0.0);
    }

    #[test]
    fn constrained_mode_with_unit_feasibility_behaves_exactly() {
        let gp = toy_gp();
        let measure = grid_measure(150);
        // A constraint model whose posterior mean is hugely positive
        // everywhere: q ~ 1.
        let ck = Kernel::rbf_iso(1, 1.0, 1e-4).unwrap();
        let cx = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let cy = DVector::from_vec(vec![100.0, 100.0]);
        let cgp = fit_posterior(Dataset::new(cx, cy, 1e-8).unwrap(), ck, 100.0).unwrap();
        let models = ConstraintModel::new(vec![cgp]).unwrap();
        let basis = build_basis(&gp, &measure, 50, 10, 13).unwrap();
        let sel = select_batch(
            &gp,
            &measure,
            &basis,
            &AcquisitionConfig::default(),
            Some(&models),
            &LpSettings::adaptive(12),
        )
        .unwrap();
        assert!(sel.diagnostics.eps_vio <= 1e-9);
        assert!(sel.diagnostics.eps_lp <= EPS_LP_FLOOR + 1e-12);
        assert!(
            sel.rule.moment_residual() <= 1e-6,
            "residual {}",
            sel.rule.moment_residual()
        );
        assert!(sel.rule.len() <= 12);
    }

    #[test]
    fn duplicate_candidate_rows_merge_in_the_rule() {
        // Two identical rows: a rule selecting both collapses them into one
        // point with the summed weight.
        let pts = DMatrix::from_row_slice(3, 1, &[0.5, 0.5, -1.0]);
        let measure = EmpiricalMeasure::uniform(pts).unwrap();
        let rule =
            QuadratureRule::from_measure(&measure, vec![0, 1, 2], vec![0.25, 0.25, 0.5], 0.0)
                .unwrap();
        assert_eq!(rule.len(), 2);
        assert_relative_eq!(rule.weights()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(rule.weights()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn recombination_support_matches_lp_vertex_bound() {
        // The generic vertex-solution LP on the same constraints also keeps
        // support <= n; recombination must not exceed it.
        let measure = grid_measure(500);
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let moments = DMatrix::from_fn(500, 15, |_, _| rng.gen_range(-1.0..1.0));
        let rule = recombination(&measure, &moments, 16).unwrap();
        assert!(rule.len() <= 16);
        let lam = DVector::from_element(15, 1.0);
        let alpha = DVector::zeros(500);
        let out = solve_lp(
            &measure,
            &moments,
            &lam,
            &alpha,
            None,
            &LpSettings::tolerance(0.0, 16),
        )
        .unwrap();
        assert!(out.rule.len() <= 16, "LP support {}", out.rule.len());
        assert!(moment_gap(&measure, &moments, &rule) < 1e-8);
    }
}
