//! The outer optimisation loop: fit models, update the target measure,
//! select a batch by kernel quadrature, query the oracles, repeat until the
//! measure variance falls below the stopping threshold or the iteration
//! budget runs out.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{sir_with_proposal, DomainPrior, EmpiricalMeasure};
use crate::error::{Result, SoberError};
use crate::gp::{
    fit_posterior, optimize_hyperparameters_with, Dataset, GpPosterior, Kernel, MleOptions,
};
use crate::lifting::{
    constrained_log_pi, lfi_log_pi, ts_empirical, ConstraintModel, DENSE_TS_LIMIT,
};
use crate::nystrom::build_basis;
use crate::quadrature::{
    mmd_squared, select_batch, AcquisitionConfig, EpsPolicy, LpMode, LpSettings, QuadratureRule,
};

/// Per-dimension linear embedding applied before any kernel evaluation:
/// identity for continuous and binary coordinates, `code / (arity - 1)` for
/// categorical codes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding {
    scales: Vec<f64>,
}

impl Embedding {
    pub fn identity(dim: usize) -> Self {
        Embedding {
            scales: vec![1.0; dim],
        }
    }

    pub fn from_scales(scales: Vec<f64>) -> Self {
        Embedding { scales }
    }

    pub fn is_identity(&self) -> bool {
        self.scales.iter().all(|s| *s == 1.0)
    }

    pub fn apply(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = points.clone();
        for (k, s) in self.scales.iter().enumerate() {
            if *s != 1.0 {
                out.column_mut(k).scale_mut(*s);
            }
        }
        out
    }
}

pub type Oracle = dyn Fn(&DMatrix<f64>) -> std::result::Result<DVector<f64>, String> + Sync;

/// A black-box problem: batch-evaluable objective, optional constraint
/// oracles (`g_l(x) >= 0` is feasible), a domain prior, and optional
/// metadata for metrics and pool-based domains.
pub struct Problem {
    pub objective: Box<Oracle>,
    pub constraints: Vec<Box<Oracle>>,
    pub prior: DomainPrior,
    pub noise_variance: f64,
    /// Known optimiser and optimum value, used only for regret metrics.
    pub optimum: Option<(Vec<f64>, f64)>,
    /// Explicit finite candidate pool; queried points leave the pool.
    pub pool: Option<DMatrix<f64>>,
    /// Pre-chosen initial design (labels are obtained from the oracle).
    pub initial_points: Option<DMatrix<f64>>,
    pub embedding: Option<Embedding>,
}

impl Problem {
    pub fn new(
        prior: DomainPrior,
        objective: impl Fn(&DMatrix<f64>) -> std::result::Result<DVector<f64>, String> + Sync + 'static,
    ) -> Self {
        Problem {
            objective: Box::new(objective),
            constraints: Vec::new(),
            prior,
            noise_variance: 1e-6,
            optimum: None,
            pool: None,
            initial_points: None,
            embedding: None,
        }
    }

    fn embedding(&self) -> Embedding {
        self.embedding
            .clone()
            .unwrap_or_else(|| Embedding::identity(self.prior.dim()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    /// Improvement-probability target (the default).
    BoLfi,
    /// Thompson-sampling target over a candidate set.
    BoTs,
    /// Uniform target over the pool (active learning).
    Al,
    /// The prior, held fixed (quadrature).
    Bq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Candidate count N for the empirical measure.
    pub candidates: usize,
    /// Nyström landmark count M.
    pub nystrom_samples: usize,
    /// Batch size cap n.
    pub batch_size: usize,
    /// LP tolerance policy; `adaptive` tracks the expected violation rate.
    pub eps: EpsPolicy,
    /// Solver mode override; `None` picks recombination for exact
    /// unconstrained runs and the tolerance LP otherwise.
    pub lp_mode: Option<LpMode>,
    /// Stop once the measure variance falls to this level.
    pub stop_mv: f64,
    pub max_iterations: usize,
    pub acquisition: AcquisitionConfig,
    pub mode: SolverMode,
    pub seed: u64,
    pub refit_hyperparameters: bool,
    pub mle_restarts: usize,
    /// Ascent iteration budget per MLE restart.
    pub mle_max_iters: usize,
    pub fit_prior_mean: bool,
    /// Multiplicative hyperparameter noise scale (robustness experiments):
    /// after each refit, `theta *= 1 + scale * U(-0.5, 0.5)`.
    pub hyperparameter_noise: f64,
    /// Candidate count for joint Thompson draws (dense limit 4096).
    pub ts_candidates: usize,
    /// Mixture components for the continuous SIR proposal.
    pub gmm_components: usize,
    /// Initial design size; 0 means `max(10, d + 2)`.
    pub initial_design: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            candidates: 20_000,
            nystrom_samples: 500,
            batch_size: 100,
            eps: EpsPolicy::Fixed(0.0),
            lp_mode: None,
            stop_mv: 0.0,
            max_iterations: 15,
            acquisition: AcquisitionConfig::default(),
            mode: SolverMode::BoLfi,
            seed: 0,
            refit_hyperparameters: true,
            mle_restarts: 8,
            mle_max_iters: 80,
            fit_prior_mean: false,
            hyperparameter_noise: 0.0,
            ts_candidates: 1024,
            gmm_components: 10,
            initial_design: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SoberError::InvalidArgument(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.candidates < self.batch_size {
            return Err(SoberError::InvalidArgument(format!(
                "candidates {} must be >= batch_size {}",
                self.candidates, self.batch_size
            )));
        }
        if self.nystrom_samples == 0 || self.nystrom_samples > self.candidates {
            return Err(SoberError::InvalidArgument(format!(
                "nystrom_samples {} must lie in 1..=candidates {}",
                self.nystrom_samples, self.candidates
            )));
        }
        if self.max_iterations == 0 {
            return Err(SoberError::InvalidArgument(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.stop_mv >= 0.0) {
            return Err(SoberError::InvalidArgument(
                "stop_mv must be non-negative (NaN rejected)".into(),
            ));
        }
        if self.ts_candidates == 0 || self.ts_candidates > DENSE_TS_LIMIT {
            return Err(SoberError::InvalidArgument(format!(
                "ts_candidates must lie in 1..={DENSE_TS_LIMIT}"
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SolverConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// One solver iteration, as streamed to CSV.
#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub batch_size: usize,
    pub eps_lp: f64,
    pub eps_vio: f64,
    pub mmd2: f64,
    pub mv: f64,
    pub md: f64,
    pub simple_regret: f64,
    pub z_mean: f64,
    pub z_var: f64,
    pub wall_ms: f64,
    /// Fraction of the queried batch that violated a true constraint
    /// (not part of the CSV schema; kept for the JSON summary).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub violation_fraction: Option<f64>,
    /// Convex weights of the selected rule, aligned with the batch rows
    /// appended to the dataset at this iteration.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub batch_weights: Vec<f64>,
}

pub const CSV_HEADER: &str =
    "iteration,batch_size,eps_lp,eps_vio,mmd2,mv,md,simple_regret,z_mean,z_var,wall_ms";

impl IterationRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.batch_size,
            self.eps_lp,
            self.eps_vio,
            self.mmd2,
            self.mv,
            self.md,
            self.simple_regret,
            self.z_mean,
            self.z_var,
            self.wall_ms
        )
    }
}

/// Full run record: per-iteration rows plus the final dataset and incumbent.
pub struct History {
    pub records: Vec<IterationRecord>,
    pub data_x: DMatrix<f64>,
    pub data_y: DVector<f64>,
    /// Observed values of each constraint oracle, aligned with `data_x`.
    pub data_g: Vec<DVector<f64>>,
    pub incumbent_point: Vec<f64>,
    pub incumbent_value: f64,
    /// Set when an oracle failed; the history up to that point is kept.
    pub aborted: Option<String>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = serde_json::json!({
            "iterations": self.records.len(),
            "evaluations": self.data_y.len(),
            "incumbent_value": self.incumbent_value,
            "incumbent_point": self.incumbent_point,
            "final_mv": self.records.last().map(|r| r.mv),
            "final_simple_regret": self.records.last().map(|r| r.simple_regret),
            "violation_fractions": self.records.iter().map(|r| r.violation_fraction).collect::<Vec<_>>(),
            "aborted": self.aborted,
        });
        serde_json::to_string_pretty(&summary).expect("summary serialises")
    }
}

/// Posterior-mean integral estimate and its variance under the rule:
/// `E = w^T m(X^n)`, `V = mmd^2(rule, measure)`.
pub fn integral_estimates(
    gp: &GpPosterior,
    measure: &EmpiricalMeasure,
    rule: &QuadratureRule,
) -> Result<(f64, f64)> {
    let mean_at = gp.mean(rule.points())?;
    let mean = rule.weights().dot(&mean_at);
    let var = mmd_squared(rule, measure, gp)?;
    Ok((mean, var))
}

/// Barycentre-based convergence metrics: the mean Euclidean distance to a
/// known optimiser (when given) and the mean variance of the measure.
pub fn measure_stats(measure: &EmpiricalMeasure, x_star: Option<&[f64]>) -> (Option<f64>, f64) {
    let centre = measure.barycentre();
    let mut mv = 0.0;
    for (i, w) in measure.weights().iter().enumerate() {
        mv += w * (measure.points().row(i).transpose() - &centre).norm_squared();
    }
    let md = x_star.map(|xs| {
        let target = DVector::from_column_slice(xs);
        (centre - target).norm()
    });
    (md, mv)
}

/// Expected constraint-violation rate `1 - w^T q~`, clamped to `[0, 1]`.
pub fn expected_violation(measure: &EmpiricalMeasure, q: &DVector<f64>) -> Result<f64> {
    if measure.len() != q.len() {
        return Err(SoberError::DimensionMismatch {
            context: "violation weights vs feasibility values",
            expected: measure.len(),
            got: q.len(),
        });
    }
    Ok((1.0 - measure.weights().dot(q)).clamp(0.0, 1.0))
}

pub(crate) struct ModelState {
    pub(crate) kernel: Kernel,
    pub(crate) prior_mean: f64,
}

/// Runs the full loop. Oracle failures abort the run and return the partial
/// history; structural errors (bad configuration, dimension mismatches)
/// surface as `Err`.
pub fn run(problem: &Problem, config: &SolverConfig) -> Result<History> {
    config.validate()?;
    problem.prior.validate()?;
    let d = problem.prior.dim();
    let embedding = problem.embedding();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);

    // Initial design: supplied points or i.i.d. prior draws.
    let n0 = if config.initial_design > 0 {
        config.initial_design
    } else {
        10.max(d + 2)
    };
    let mut pool_taken: Vec<bool> = problem
        .pool
        .as_ref()
        .map(|p| vec![false; p.nrows()])
        .unwrap_or_default();
    let init_x = match &problem.initial_points {
        Some(pts) => {
            if let Some(pool) = &problem.pool {
                mark_pool_rows(pool, pts, &mut pool_taken);
            }
            pts.clone()
        }
        None => match &problem.pool {
            Some(pool) => {
                let take = n0.min(pool.nrows());
                let mut picked = DMatrix::zeros(take, d);
                for row in 0..take {
                    let mut idx = rng.gen_range(0..pool.nrows());
                    while pool_taken[idx] {
                        idx = rng.gen_range(0..pool.nrows());
                    }
                    pool_taken[idx] = true;
                    picked.row_mut(row).copy_from(&pool.row(idx));
                }
                picked
            }
            None => problem.prior.sample_rng(n0, &mut rng)?,
        },
    };

    let mut history = History {
        records: Vec::new(),
        data_x: DMatrix::zeros(0, d),
        data_y: DVector::zeros(0),
        data_g: Vec::new(),
        incumbent_point: vec![f64::NAN; d],
        incumbent_value: f64::NEG_INFINITY,
        aborted: None,
    };

    let init_y = match (problem.objective)(&init_x) {
        Ok(y) => y,
        Err(msg) => {
            history.aborted = Some(msg);
            return Ok(history);
        }
    };
    let mut data = Dataset::new(
        embedding.apply(&init_x),
        init_y.clone(),
        problem.noise_variance,
    )?;
    let mut code_x = init_x.clone();
    let mut observed_y = init_y;

    let mut constraint_data: Vec<Dataset> = Vec::new();
    let mut observed_feasible: Vec<bool> = vec![true; init_x.nrows()];
    for oracle in &problem.constraints {
        let g = match oracle(&init_x) {
            Ok(g) => g,
            Err(msg) => {
                history.aborted = Some(msg);
                return Ok(history);
            }
        };
        for (flag, v) in observed_feasible.iter_mut().zip(g.iter()) {
            *flag &= *v >= 0.0;
        }
        constraint_data.push(Dataset::new(
            embedding.apply(&init_x),
            g,
            problem.noise_variance,
        )?);
    }

    // Lengthscale and scale initialisation from the data envelope.
    let mut objective_model = initial_model(&data);
    let mut constraint_models: Vec<ModelState> =
        constraint_data.iter().map(initial_model).collect();

    for iteration in 1..=config.max_iterations {
        let started = Instant::now();
        let iter_seed = rng.gen::<u64>();

        if config.refit_hyperparameters && data.len() >= 2 {
            objective_model = refit(&data, &objective_model, config, iter_seed)?;
            for (state, cdata) in constraint_models.iter_mut().zip(&constraint_data) {
                *state = refit(cdata, state, config, iter_seed.wrapping_add(1))?;
            }
        }
        if config.hyperparameter_noise > 0.0 {
            objective_model.kernel = perturb_kernel(
                &objective_model.kernel,
                config.hyperparameter_noise,
                &mut rng,
            )?;
            for state in constraint_models.iter_mut() {
                state.kernel =
                    perturb_kernel(&state.kernel, config.hyperparameter_noise, &mut rng)?;
            }
        }

        let gp = fit_posterior(
            data.clone(),
            objective_model.kernel.clone(),
            objective_model.prior_mean,
        )?;
        let constraint_gps: Vec<GpPosterior> = constraint_models
            .iter()
            .zip(&constraint_data)
            .map(|(state, cdata)| {
                fit_posterior(cdata.clone(), state.kernel.clone(), state.prior_mean)
            })
            .collect::<Result<_>>()?;
        let constraint_model = if constraint_gps.is_empty() {
            None
        } else {
            Some(ConstraintModel::new(constraint_gps)?)
        };

        // Incumbent for the LFI threshold: best posterior mean at queried
        // inputs (robust to observation noise). Under constraints only
        // points whose observed constraint values were all feasible count;
        // an infeasible high point must not set the improvement bar.
        let mean_at_data = gp.mean(data.x())?;
        let y_best = if problem.constraints.is_empty() || !observed_feasible.iter().any(|f| *f) {
            mean_at_data.max()
        } else {
            mean_at_data
                .iter()
                .zip(observed_feasible.iter())
                .filter(|(_, ok)| **ok)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max)
        };

        let Some((code_points, measure)) = build_measure(
            problem,
            config,
            &gp,
            constraint_model.as_ref(),
            y_best,
            &embedding,
            &pool_taken,
            iter_seed,
        )?
        else {
            break; // pool exhausted
        };

        let rank = config.batch_size.saturating_sub(1).max(1);
        let m = config.nystrom_samples.min(measure.len());
        let basis = build_basis(&gp, &measure, m, rank.min(m), iter_seed ^ 0x9e37)?;

        let constrained = constraint_model.is_some();
        let lp_mode = config.lp_mode.unwrap_or({
            if constrained || config.eps != EpsPolicy::Fixed(0.0) {
                LpMode::ToleranceLp
            } else {
                LpMode::ExactRecombination
            }
        });
        let eps = if constrained && config.eps == EpsPolicy::Fixed(0.0) {
            EpsPolicy::Adaptive
        } else {
            config.eps
        };
        let settings = LpSettings {
            eps,
            n_max: config.batch_size,
            mode: lp_mode,
        };
        let selection = select_batch(
            &gp,
            &measure,
            &basis,
            &config.acquisition,
            constraint_model.as_ref(),
            &settings,
        )?;

        // Map the rule back to code space and query the oracles.
        let rule = &selection.rule;
        let batch_rows: Vec<usize> = rule.indices().to_vec();
        let mut batch_code = DMatrix::zeros(batch_rows.len(), d);
        for (r, &i) in batch_rows.iter().enumerate() {
            batch_code.row_mut(r).copy_from(&code_points.row(i));
        }
        let batch_y = match (problem.objective)(&batch_code) {
            Ok(y) => y,
            Err(msg) => {
                history.aborted = Some(msg);
                break;
            }
        };
        let mut batch_g: Vec<DVector<f64>> = Vec::new();
        let mut oracle_failed = None;
        for oracle in &problem.constraints {
            match oracle(&batch_code) {
                Ok(g) => batch_g.push(g),
                Err(msg) => {
                    oracle_failed = Some(msg);
                    break;
                }
            }
        }
        if let Some(msg) = oracle_failed {
            history.aborted = Some(msg);
            break;
        }

        // Feasibility-filtered subset: diagnostics only; every queried point
        // enters the dataset.
        let violation_fraction = if batch_g.is_empty() {
            None
        } else {
            let violated = (0..batch_code.nrows())
                .filter(|&i| batch_g.iter().any(|g| g[i] < 0.0))
                .count();
            Some(violated as f64 / batch_code.nrows() as f64)
        };

        let (z_mean, z_var) = integral_estimates(&gp, &measure, rule)?;
        let x_star = problem.optimum.as_ref().map(|(x, _)| x.as_slice());
        // Convergence metrics live in code space, where the optimum is declared.
        let code_measure = EmpiricalMeasure::new(code_points.clone(), measure.weights().clone())?;
        let (md, mv) = measure_stats(&code_measure, x_star);

        // Update the dataset and the pool bookkeeping.
        for i in 0..batch_code.nrows() {
            observed_feasible.push(batch_g.iter().all(|g| g[i] >= 0.0));
        }
        data.extend(&embedding.apply(&batch_code), &batch_y)?;
        for (cdata, g) in constraint_data.iter_mut().zip(&batch_g) {
            cdata.extend(&embedding.apply(&batch_code), g)?;
        }
        if let Some(pool) = &problem.pool {
            mark_pool_rows(pool, &batch_code, &mut pool_taken);
        }
        code_x = stack_rows(&code_x, &batch_code);
        observed_y = DVector::from_iterator(
            observed_y.len() + batch_y.len(),
            observed_y.iter().chain(batch_y.iter()).cloned(),
        );

        let best_idx = (0..observed_y.len())
            .max_by(|&a, &b| observed_y[a].partial_cmp(&observed_y[b]).unwrap())
            .expect("non-empty observations");
        history.incumbent_value = observed_y[best_idx];
        history.incumbent_point = code_x.row(best_idx).iter().cloned().collect();
        let simple_regret = problem
            .optimum
            .as_ref()
            .map(|(_, ystar)| ystar - history.incumbent_value)
            .unwrap_or(f64::NAN);

        history.records.push(IterationRecord {
            iteration,
            batch_size: selection.diagnostics.batch_size,
            eps_lp: selection.diagnostics.eps_lp,
            eps_vio: selection.diagnostics.eps_vio,
            mmd2: selection.diagnostics.mmd2,
            mv,
            md: md.unwrap_or(f64::NAN),
            simple_regret,
            z_mean,
            z_var,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            violation_fraction,
            batch_weights: rule.weights().iter().cloned().collect(),
        });

        if mv <= config.stop_mv {
            break;
        }
    }

    history.data_x = code_x;
    history.data_y = observed_y;
    history.data_g = constraint_data
        .iter()
        .map(|cdata| cdata.y().clone())
        .collect();
    Ok(history)
}

fn gather_rows(points: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), points.ncols());
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).copy_from(&points.row(i));
    }
    out
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

fn mark_pool_rows(pool: &DMatrix<f64>, used: &DMatrix<f64>, taken: &mut [bool]) {
    for r in 0..used.nrows() {
        for (i, slot) in taken.iter_mut().enumerate() {
            if !*slot && pool.row(i) == used.row(r) {
                *slot = true;
                break;
            }
        }
    }
}

pub(crate) fn initial_model(data: &Dataset) -> ModelState {
    let d = data.dim();
    let mut lengthscales = Vec::with_capacity(d);
    for k in 0..d {
        let col = data.x().column(k);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in col.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        let width = if hi > lo { hi - lo } else { 1.0 };
        lengthscales.push(0.2 * width);
    }
    let n = data.len().max(1) as f64;
    let mean = data.y().sum() / n;
    let var = data.y().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let kernel = Kernel::rbf_ard(lengthscales, var.max(1e-4)).expect("positive kernel parameters");
    ModelState {
        kernel,
        prior_mean: 0.0,
    }
}

pub(crate) fn refit(
    data: &Dataset,
    state: &ModelState,
    config: &SolverConfig,
    seed: u64,
) -> Result<ModelState> {
    let opts = MleOptions {
        restarts: config.mle_restarts.max(1),
        max_iters: config.mle_max_iters.max(1),
        fit_prior_mean: config.fit_prior_mean,
        seed,
    };
    let fit = optimize_hyperparameters_with(data, &state.kernel, state.prior_mean, &opts)?;
    Ok(ModelState {
        kernel: fit.kernel,
        prior_mean: fit.prior_mean,
    })
}

pub(crate) fn perturb_kernel<R: Rng>(kernel: &Kernel, scale: f64, rng: &mut R) -> Result<Kernel> {
    let noisy = |v: f64, rng: &mut R| {
        let eps: f64 = rng.gen_range(-0.5..0.5);
        (v * (1.0 + scale * eps)).max(1e-8)
    };
    let ls: Vec<f64> = kernel
        .lengthscales()
        .iter()
        .map(|l| noisy(*l, rng))
        .collect();
    let os = noisy(kernel.outputscale(), rng);
    Kernel::rbf_ard(ls, os)
}

/// Builds the iteration's empirical measure in code space together with the
/// embedded copy used by all kernel evaluations. Returns `None` when a pool
/// is exhausted.
#[allow(clippy::too_many_arguments)]
fn build_measure(
    problem: &Problem,
    config: &SolverConfig,
    gp: &GpPosterior,
    constraints: Option<&ConstraintModel>,
    y_best: f64,
    embedding: &Embedding,
    pool_taken: &[bool],
    seed: u64,
) -> Result<Option<(DMatrix<f64>, EmpiricalMeasure)>> {
    let lfi = lfi_log_pi(gp, y_best);
    let log_target = |code_pts: &DMatrix<f64>| -> DVector<f64> {
        let emb = embedding.apply(code_pts);
        match (config.mode, constraints) {
            (SolverMode::BoLfi, None) => lfi.evaluate(&emb).expect("target evaluation"),
            (SolverMode::BoLfi, Some(models)) => constrained_log_pi(lfi, models)
                .evaluate(&emb)
                .expect("target evaluation"),
            // Uniform over the support (active learning) or the prior itself
            // (quadrature): a constant unnormalised log-density.
            (SolverMode::Al, _) | (SolverMode::Bq, _) => DVector::zeros(code_pts.nrows()),
            (SolverMode::BoTs, _) => unreachable!("TS builds its measure by sampling"),
        }
    };

    if let Some(pool) = &problem.pool {
        // Quadrature keeps integrating against the whole pool; the other
        // modes shrink it as points are queried.
        let remaining: Vec<usize> = if config.mode == SolverMode::Bq {
            (0..pool.nrows()).collect()
        } else {
            (0..pool.nrows()).filter(|&i| !pool_taken[i]).collect()
        };
        if remaining.len() < 2 {
            return Ok(None);
        }
        let code_points = gather_rows(pool, &remaining);
        let measure = match config.mode {
            SolverMode::BoTs => {
                let keep: Vec<usize> = if remaining.len() > config.ts_candidates {
                    let mut r = ChaCha12Rng::seed_from_u64(seed ^ 0x7155);
                    let mut idx: Vec<usize> = (0..remaining.len()).collect();
                    for i in 0..config.ts_candidates {
                        let j = r.gen_range(i..idx.len());
                        idx.swap(i, j);
                    }
                    idx.truncate(config.ts_candidates);
                    idx.sort_unstable();
                    idx
                } else {
                    (0..remaining.len()).collect()
                };
                let sub_code = gather_rows(&code_points, &keep);
                let emb = embedding.apply(&sub_code);
                let ts = ts_empirical(gp, &emb, config.candidates, seed ^ 0x1357)?;
                return Ok(Some((sub_code, ts)));
            }
            _ => {
                let logw = log_target(&code_points);
                EmpiricalMeasure::from_log_weights(embedding.apply(&code_points), &logw)?
            }
        };
        return Ok(Some((code_points, measure)));
    }

    match config.mode {
        SolverMode::BoTs => {
            let count = config.ts_candidates.min(config.candidates);
            let code = problem.prior.sample(count, seed ^ 0x2468)?;
            let emb = embedding.apply(&code);
            let ts = ts_empirical(gp, &emb, config.candidates, seed ^ 0x1357)?;
            Ok(Some((code, ts)))
        }
        SolverMode::Bq | SolverMode::Al => {
            let code = problem.prior.sample(config.candidates, seed ^ 0x2468)?;
            let measure = EmpiricalMeasure::uniform(embedding.apply(&code))?;
            Ok(Some((code, measure)))
        }
        SolverMode::BoLfi => {
            let proposal = continuous_proposal(&problem.prior, config.gmm_components);
            let outcome = sir_with_proposal(
                &problem.prior,
                proposal.as_ref(),
                log_target,
                config.candidates,
                seed ^ 0x4242,
            )?;
            let code = outcome.measure.points().clone();
            let measure =
                EmpiricalMeasure::new(embedding.apply(&code), outcome.measure.weights().clone())?;
            Ok(Some((code, measure)))
        }
    }
}

/// SIR proposal template: box-bounded mixtures take over from uniform
/// priors on continuous blocks; everything else refits within its own
/// family.
fn continuous_proposal(prior: &DomainPrior, components: usize) -> Option<DomainPrior> {
    match prior {
        DomainPrior::ContinuousUniform { lower, upper } => {
            let d = lower.len();
            let centre: Vec<f64> = lower
                .iter()
                .zip(upper)
                .map(|(l, u)| 0.5 * (l + u))
                .collect();
            let cov: Vec<Vec<f64>> = (0..d)
                .map(|i| {
                    (0..d)
                        .map(|j| {
                            if i == j {
                                let w = upper[i] - lower[i];
                                (w / 4.0).powi(2)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            Some(DomainPrior::Gmm {
                weights: vec![1.0 / components as f64; components],
                means: vec![centre; components],
                covariances: vec![cov; components],
                bounds: Some((lower.clone(), upper.clone())),
            })
        }
        DomainPrior::MixedProduct {
            continuous,
            discrete,
        } => continuous_proposal(continuous, components).map(|c| DomainPrior::MixedProduct {
            continuous: Box::new(c),
            discrete: discrete.clone(),
        }),
        _ => None,
    }
}
