//! Suite execution: policies, seeding discipline and result files.
//!
//! Each `(function, policy, seed)` triple is an independent, deterministic
//! run. The initial design depends only on the function and the seed, so
//! policies compete from identical starting data. Runs execute on a worker
//! pool; one failed run is recorded and the rest of the suite continues.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SoberError};
use crate::gp::{fit_posterior, Dataset};
use crate::linalg::jittered_cholesky;
use crate::solver::{
    self, initial_model, perturb_kernel, refit, History, IterationRecord, SolverConfig, SolverMode,
};

use super::functions::lookup;

/// Batch policies the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    SoberLfi,
    SoberTs,
    Random,
    BatchTsBaseline,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::SoberLfi => "sober-lfi",
            Policy::SoberTs => "sober-ts",
            Policy::Random => "random",
            Policy::BatchTsBaseline => "batch-ts-baseline",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub function: String,
    pub policy: Policy,
    #[serde(default)]
    pub config: SolverConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
}

fn default_noise() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub entries: Vec<SuiteEntry>,
}

impl BenchmarkSuite {
    pub fn from_json(text: &str) -> Result<Self> {
        let suite: BenchmarkSuite = serde_json::from_str(text)?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(SoberError::InvalidArgument("suite has no entries".into()));
        }
        for entry in &self.entries {
            lookup(&entry.function)?;
            entry.config.validate()?;
            if entry.seeds.is_empty() {
                return Err(SoberError::InvalidArgument(format!(
                    "entry for {} has no seeds",
                    entry.function
                )));
            }
            let mut seen = entry.seeds.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != entry.seeds.len() {
                return Err(SoberError::InvalidArgument(format!(
                    "entry for {} repeats a seed",
                    entry.function
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of one run within a suite.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub function: String,
    pub policy: Policy,
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub csv_path: PathBuf,
}

/// The initial design depends only on the function and the seed so that all
/// policies start from the same data.
fn design_seed(function: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in function.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

/// Runs a single `(function, policy, seed)` combination.
pub fn run_single(
    function: &str,
    policy: Policy,
    config: &SolverConfig,
    seed: u64,
    noise_variance: f64,
) -> Result<History> {
    let objective = lookup(function)?;
    let d = objective.dim();
    let n0 = if config.initial_design > 0 {
        config.initial_design
    } else {
        10.max(d + 2)
    };
    let prior = objective.prior();
    let init = prior.sample(n0, design_seed(function, seed))?;
    let mut problem = objective.into_problem(noise_variance);
    problem.initial_points = Some(init);

    let mut config = config.clone();
    config.seed = seed;
    match policy {
        Policy::SoberLfi => {
            config.mode = SolverMode::BoLfi;
            solver::run(&problem, &config)
        }
        Policy::SoberTs => {
            config.mode = SolverMode::BoTs;
            solver::run(&problem, &config)
        }
        Policy::Random => random_policy(&problem, &config),
        Policy::BatchTsBaseline => batch_ts_policy(&problem, &config),
    }
}

fn nan_record(
    iteration: usize,
    batch_size: usize,
    simple_regret: f64,
    wall_ms: f64,
) -> IterationRecord {
    IterationRecord {
        iteration,
        batch_size,
        eps_lp: f64::NAN,
        eps_vio: f64::NAN,
        mmd2: f64::NAN,
        mv: f64::NAN,
        md: f64::NAN,
        simple_regret,
        z_mean: f64::NAN,
        z_var: f64::NAN,
        wall_ms,
        violation_fraction: None,
        batch_weights: Vec::new(),
    }
}

struct PolicyState {
    code_x: DMatrix<f64>,
    observed_y: DVector<f64>,
    history: History,
}

fn policy_init(problem: &solver::Problem, config: &SolverConfig) -> Result<Option<PolicyState>> {
    let d = problem.prior.dim();
    let n0 = if config.initial_design > 0 {
        config.initial_design
    } else {
        10.max(d + 2)
    };
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let init_x = match &problem.initial_points {
        Some(p) => p.clone(),
        None => problem.prior.sample_rng(n0, &mut rng)?,
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
            return Ok(None);
        }
    };
    Ok(Some(PolicyState {
        code_x: init_x,
        observed_y: init_y,
        history,
    }))
}

fn record_incumbent(state: &mut PolicyState, optimum: Option<&(Vec<f64>, f64)>) -> f64 {
    let best_idx = (0..state.observed_y.len())
        .max_by(|&a, &b| {
            state.observed_y[a]
                .partial_cmp(&state.observed_y[b])
                .unwrap()
        })
        .expect("non-empty observations");
    state.history.incumbent_value = state.observed_y[best_idx];
    state.history.incumbent_point = state.code_x.row(best_idx).iter().cloned().collect();
    optimum
        .map(|(_, ystar)| ystar - state.history.incumbent_value)
        .unwrap_or(f64::NAN)
}

fn append_batch(state: &mut PolicyState, batch_x: &DMatrix<f64>, batch_y: &DVector<f64>) {
    let mut stacked = DMatrix::zeros(state.code_x.nrows() + batch_x.nrows(), state.code_x.ncols());
    stacked
        .view_mut((0, 0), (state.code_x.nrows(), state.code_x.ncols()))
        .copy_from(&state.code_x);
    stacked
        .view_mut(
            (state.code_x.nrows(), 0),
            (batch_x.nrows(), batch_x.ncols()),
        )
        .copy_from(batch_x);
    state.code_x = stacked;
    state.observed_y = DVector::from_iterator(
        state.observed_y.len() + batch_y.len(),
        state.observed_y.iter().chain(batch_y.iter()).cloned(),
    );
}

/// i.i.d. prior batches; the simplest baseline.
fn random_policy(problem: &solver::Problem, config: &SolverConfig) -> Result<History> {
    config.validate()?;
    let Some(mut state) = policy_init(problem, config)? else {
        return policy_abort(problem, config);
    };
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0xABCD);
    for iteration in 1..=config.max_iterations {
        let started = Instant::now();
        let batch = problem.prior.sample_rng(config.batch_size, &mut rng)?;
        let y = match (problem.objective)(&batch) {
            Ok(y) => y,
            Err(msg) => {
                state.history.aborted = Some(msg);
                break;
            }
        };
        append_batch(&mut state, &batch, &y);
        let regret = record_incumbent(&mut state, problem.optimum.as_ref());
        state.history.records.push(nan_record(
            iteration,
            batch.nrows(),
            regret,
            started.elapsed().as_secs_f64() * 1e3,
        ));
    }
    finish(state)
}

/// Exact joint Thompson sampling over a fresh candidate set each iteration:
/// n independent argmax draws form the batch. Shares the GP machinery with
/// the quadrature solver, so regret differences are attributable to batch
/// selection alone.
fn batch_ts_policy(problem: &solver::Problem, config: &SolverConfig) -> Result<History> {
    config.validate()?;
    let Some(mut state) = policy_init(problem, config)? else {
        return policy_abort(problem, config);
    };
    let embedding = problem
        .embedding
        .clone()
        .unwrap_or_else(|| solver::Embedding::identity(problem.prior.dim()));
    let mut data = Dataset::new(
        embedding.apply(&state.code_x),
        state.observed_y.clone(),
        problem.noise_variance,
    )?;
    let mut model = initial_model(&data);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x7777);

    for iteration in 1..=config.max_iterations {
        let started = Instant::now();
        let iter_seed = rng.gen::<u64>();
        if config.refit_hyperparameters && data.len() >= 2 {
            model = refit(&data, &model, config, iter_seed)?;
        }
        if config.hyperparameter_noise > 0.0 {
            model.kernel = perturb_kernel(&model.kernel, config.hyperparameter_noise, &mut rng)?;
        }
        let gp = fit_posterior(data.clone(), model.kernel.clone(), model.prior_mean)?;

        let candidates = problem.prior.sample_rng(config.ts_candidates, &mut rng)?;
        let emb = embedding.apply(&candidates);
        let (mean, cov) = gp.mean_cov(&emb, &emb)?;
        let max_var = (0..cov.nrows()).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
        let mut picks = Vec::with_capacity(config.batch_size);
        if max_var <= 1e-12 {
            let best = argmax(&mean);
            picks.resize(config.batch_size, best);
        } else {
            let (chol, _) = jittered_cholesky(&cov)?;
            let l = chol.l();
            for _ in 0..config.batch_size {
                let z = crate::linalg::standard_normal_vector(candidates.nrows(), &mut rng);
                let sample = &l * z + &mean;
                picks.push(argmax(&sample));
            }
        }
        let mut batch = DMatrix::zeros(picks.len(), candidates.ncols());
        for (r, &i) in picks.iter().enumerate() {
            batch.row_mut(r).copy_from(&candidates.row(i));
        }
        let y = match (problem.objective)(&batch) {
            Ok(y) => y,
            Err(msg) => {
                state.history.aborted = Some(msg);
                break;
            }
        };
        data.extend(&embedding.apply(&batch), &y)?;
        append_batch(&mut state, &batch, &y);
        let regret = record_incumbent(&mut state, problem.optimum.as_ref());
        state.history.records.push(nan_record(
            iteration,
            batch.nrows(),
            regret,
            started.elapsed().as_secs_f64() * 1e3,
        ));
    }
    finish(state)
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

fn policy_abort(problem: &solver::Problem, _config: &SolverConfig) -> Result<History> {
    Ok(History {
        records: Vec::new(),
        data_x: DMatrix::zeros(0, problem.prior.dim()),
        data_y: DVector::zeros(0),
        data_g: Vec::new(),
        incumbent_point: vec![f64::NAN; problem.prior.dim()],
        incumbent_value: f64::NEG_INFINITY,
        aborted: Some("initial oracle evaluation failed".into()),
    })
}

fn finish(mut state: PolicyState) -> Result<History> {
    state.history.data_x = state.code_x;
    state.history.data_y = state.observed_y;
    Ok(state.history)
}

/// Runs every `(entry, seed)` combination on a worker pool, writing one CSV
/// and one JSON summary per run plus a suite report. Individual failures
/// are recorded and the suite continues.
pub fn run_suite(
    suite: &BenchmarkSuite,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<RunOutcome>> {
    suite.validate()?;
    let runs_dir = out_dir.join("runs");
    std::fs::create_dir_all(&runs_dir)?;

    let mut jobs = Vec::new();
    for entry in &suite.entries {
        for &seed in &entry.seeds {
            jobs.push((entry.clone(), seed));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SoberError::InvalidArgument(format!("worker pool: {e}")))?;
    let outcomes: Vec<RunOutcome> = pool.install(|| {
        jobs.par_iter()
            .map(|(entry, seed)| {
                let stem = format!("{}__{}__s{}", entry.function, entry.policy.name(), seed);
                let csv_path = runs_dir.join(format!("{stem}.csv"));
                let result = run_single(
                    &entry.function,
                    entry.policy,
                    &entry.config,
                    *seed,
                    entry.noise_variance,
                )
                .and_then(|history| {
                    std::fs::write(&csv_path, history.to_csv())?;
                    std::fs::write(
                        runs_dir.join(format!("{stem}.json")),
                        history.summary_json(),
                    )?;
                    match history.aborted {
                        Some(msg) => Err(SoberError::Oracle(msg)),
                        None => Ok(()),
                    }
                });
                match result {
                    Ok(()) => RunOutcome {
                        function: entry.function.clone(),
                        policy: entry.policy,
                        seed: *seed,
                        ok: true,
                        error: None,
                        csv_path: csv_path.clone(),
                    },
                    Err(e) => RunOutcome {
                        function: entry.function.clone(),
                        policy: entry.policy,
                        seed: *seed,
                        ok: false,
                        error: Some(e.to_string()),
                        csv_path: csv_path.clone(),
                    },
                }
            })
            .collect()
    });

    let report = serde_json::to_string_pretty(&outcomes).expect("report serialises");
    std::fs::write(out_dir.join("suite_report.json"), report)?;
    Ok(outcomes)
}
