//! Synthetic objectives in maximisation convention, with optional black-box
//! constraints, declared optima for regret metrics, and matching domain
//! priors.
//!
//! Discrete coordinates travel as codes (0/1 for binary, 0..K-1 for
//! categorical) and are mapped to their numeric values inside the
//! evaluators; the embedding only rescales them for the kernel.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::domain::DomainPrior;
use crate::error::{Result, SoberError};
use crate::solver::{Embedding, Problem};

/// Declared type of one input coordinate.
#[derive(Debug, Clone)]
pub enum VarKind {
    Continuous { lower: f64, upper: f64 },
    Binary,
    Categorical { values: Vec<f64> },
}

type Eval = fn(&[f64]) -> f64;

/// A benchmark objective with its domain declaration.
pub struct TestFunction {
    pub name: &'static str,
    pub dims: Vec<VarKind>,
    eval: Eval,
    constraint_evals: Vec<Eval>,
    /// Optimiser in code space and its objective value.
    pub optimum: Option<(Vec<f64>, f64)>,
}

impl TestFunction {
    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.constraint_evals.len()
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        for (k, kind) in self.dims.iter().enumerate() {
            match kind {
                VarKind::Continuous { .. } => {}
                VarKind::Binary => {
                    if row[k] != 0.0 && row[k] != 1.0 {
                        return Err(SoberError::InvalidArgument(format!(
                            "dimension {k}: {} is not a binary code",
                            row[k]
                        )));
                    }
                }
                VarKind::Categorical { values } => {
                    let code = row[k].round();
                    if (row[k] - code).abs() > 1e-9 || code < 0.0 || code >= values.len() as f64 {
                        return Err(SoberError::InvalidArgument(format!(
                            "dimension {k}: {} is not a categorical code in 0..{}",
                            row[k],
                            values.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Evaluates the objective at each row (code space).
    pub fn evaluate(&self, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        if points.ncols() != self.dim() {
            return Err(SoberError::DimensionMismatch {
                context: "test function input dimension",
                expected: self.dim(),
                got: points.ncols(),
            });
        }
        let mut out = DVector::zeros(points.nrows());
        let mut row = vec![0.0; self.dim()];
        for i in 0..points.nrows() {
            for k in 0..self.dim() {
                row[k] = points[(i, k)];
            }
            self.check_row(&row)?;
            out[i] = (self.eval)(&row);
        }
        Ok(out)
    }

    /// Evaluates constraint `l` at each row; `>= 0` is feasible.
    pub fn constraint(&self, l: usize, points: &DMatrix<f64>) -> Result<DVector<f64>> {
        let eval = self.constraint_evals.get(l).ok_or_else(|| {
            SoberError::InvalidArgument(format!("{} has no constraint {l}", self.name))
        })?;
        let mut out = DVector::zeros(points.nrows());
        for i in 0..points.nrows() {
            let row: Vec<f64> = points.row(i).iter().cloned().collect();
            out[i] = eval(&row);
        }
        Ok(out)
    }

    /// The equal-weight domain prior matching the declared dimensions.
    pub fn prior(&self) -> DomainPrior {
        let mut cont_lower = Vec::new();
        let mut cont_upper = Vec::new();
        let mut bern = Vec::new();
        let mut tables: Vec<Vec<f64>> = Vec::new();
        for kind in &self.dims {
            match kind {
                VarKind::Continuous { lower, upper } => {
                    cont_lower.push(*lower);
                    cont_upper.push(*upper);
                }
                VarKind::Binary => bern.push(0.5),
                VarKind::Categorical { values } => {
                    tables.push(vec![1.0 / values.len() as f64; values.len()]);
                }
            }
        }
        let continuous = if cont_lower.is_empty() {
            None
        } else {
            Some(DomainPrior::ContinuousUniform {
                lower: cont_lower,
                upper: cont_upper,
            })
        };
        let discrete = if !bern.is_empty() {
            Some(DomainPrior::Bernoulli { p: bern })
        } else if !tables.is_empty() {
            Some(DomainPrior::Categorical { tables })
        } else {
            None
        };
        match (continuous, discrete) {
            (Some(c), Some(d)) => DomainPrior::MixedProduct {
                continuous: Box::new(c),
                discrete: Box::new(d),
            },
            (Some(c), None) => c,
            (None, Some(d)) => d,
            (None, None) => unreachable!("functions declare at least one dimension"),
        }
    }

    /// Kernel embedding: categorical codes scaled into `[0, 1]`.
    pub fn embedding(&self) -> Embedding {
        let scales = self
            .dims
            .iter()
            .map(|kind| match kind {
                VarKind::Categorical { values } if values.len() > 1 => {
                    1.0 / (values.len() - 1) as f64
                }
                _ => 1.0,
            })
            .collect();
        Embedding::from_scales(scales)
    }

    /// Packages the function as a solver problem.
    pub fn into_problem(self, noise_variance: f64) -> Problem {
        let prior = self.prior();
        let optimum = self.optimum.clone();
        let embedding = self.embedding();
        let constraint_count = self.constraint_evals.len();
        let shared = std::sync::Arc::new(self);
        let objective = shared.clone();
        let mut problem = Problem::new(prior, move |pts: &DMatrix<f64>| {
            objective.evaluate(pts).map_err(|e| e.to_string())
        });
        for l in 0..constraint_count {
            let handle = shared.clone();
            problem
                .constraints
                .push(Box::new(move |pts: &DMatrix<f64>| {
                    handle.constraint(l, pts).map_err(|e| e.to_string())
                }));
        }
        problem.noise_variance = noise_variance;
        problem.optimum = optimum;
        problem.embedding = Some(embedding);
        problem
    }
}

// --- objective definitions -------------------------------------------------

/// Classical Branin, affinely rescaled from [-5, 10] x [0, 15] onto the
/// [-3, 2]^2 prior box, negated for maximisation.
fn branin_rescaled(u: &[f64]) -> f64 {
    let x1 = 3.0 * u[0] + 4.0;
    let x2 = 3.0 * u[1] + 9.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let t = 1.0 / (8.0 * PI);
    let inner = x2 - b * x1 * x1 + c * x1 - 6.0;
    -(inner * inner + 10.0 * (1.0 - t) * x1.cos() + 10.0)
}

fn branin_g1(u: &[f64]) -> f64 {
    4.0 - (u[0] + 1.0) * (u[0] + 1.0) - u[1] * u[1]
}

fn branin_g2(u: &[f64]) -> f64 {
    u[1] - u[0] - 1.0
}

/// Negated Ackley; the global maximum 0 sits at the origin.
fn ackley_neg(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sum_sq: f64 = x.iter().map(|v| v * v).sum();
    let sum_cos: f64 = x.iter().map(|v| (2.0 * PI * v).cos()).sum();
    -(-20.0 * (-0.2 * (sum_sq / d).sqrt()).exp() - (sum_cos / d).exp() + 20.0 + std::f64::consts::E)
}

fn ackley_mixed_g1(x: &[f64]) -> f64 {
    0.5 - x[..3].iter().map(|v| v * v).sum::<f64>()
}

fn ackley_mixed_g2(x: &[f64]) -> f64 {
    12.0 - x[3..].iter().sum::<f64>()
}

const ROSENBROCK_LEVELS: [f64; 4] = [-4.0, 1.0, 6.0, 11.0];

/// 7-dimensional Rosenbrock: one continuous coordinate and six categorical
/// codes mapped onto {-4, 1, 6, 11}, negated for maximisation.
fn rosenbrock_mixed_neg(x: &[f64]) -> f64 {
    let mut v = [0.0; 7];
    v[0] = x[0];
    for k in 1..7 {
        v[k] = ROSENBROCK_LEVELS[x[k] as usize];
    }
    let mut total = 0.0;
    for k in 0..6 {
        let a = v[k + 1] - v[k] * v[k];
        let b = 1.0 - v[k];
        total += 100.0 * a * a + b * b;
    }
    -total
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

/// Negated 6-dimensional Hartmann; the global maximum is ~3.32237.
fn hartmann6_neg(x: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..4 {
        let mut inner = 0.0;
        for j in 0..6 {
            let diff = x[j] - HARTMANN_P[i][j];
            inner += HARTMANN_A[i][j] * diff * diff;
        }
        total += HARTMANN_ALPHA[i] * (-inner).exp();
    }
    total
}

fn hartmann6_g1(x: &[f64]) -> f64 {
    2.5 - x.iter().sum::<f64>()
}

fn hartmann6_g2(x: &[f64]) -> f64 {
    x[5] - x[0]
}

const SHEKEL_BETA: [f64; 10] = [0.1, 0.2, 0.2, 0.4, 0.4, 0.6, 0.3, 0.7, 0.5, 0.5];
const SHEKEL_C: [[f64; 10]; 4] = [
    [4.0, 1.0, 8.0, 6.0, 3.0, 2.0, 5.0, 8.0, 6.0, 7.0],
    [4.0, 1.0, 8.0, 6.0, 7.0, 9.0, 3.0, 1.0, 2.0, 3.6],
    [4.0, 1.0, 8.0, 6.0, 3.0, 2.0, 5.0, 8.0, 6.0, 7.0],
    [4.0, 1.0, 8.0, 6.0, 7.0, 9.0, 3.0, 1.0, 2.0, 3.6],
];

/// Shekel (m = 10) in maximisation form; the global maximum is ~10.5364
/// near (4, 4, 4, 4).
fn shekel_max(x: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..10 {
        let mut dist = SHEKEL_BETA[i];
        for j in 0..4 {
            let diff = x[j] - SHEKEL_C[j][i];
            dist += diff * diff;
        }
        total += 1.0 / dist;
    }
    total
}

fn cont(lower: f64, upper: f64) -> VarKind {
    VarKind::Continuous { lower, upper }
}

fn categorical4() -> VarKind {
    VarKind::Categorical {
        values: ROSENBROCK_LEVELS.to_vec(),
    }
}

fn with_optimum(mut f: TestFunction, optimiser: Vec<f64>) -> TestFunction {
    let value = (f.eval)(&optimiser);
    f.optimum = Some((optimiser, value));
    f
}

/// All registered benchmark functions.
pub fn registry() -> Vec<TestFunction> {
    let branin_opt = vec![(-PI - 4.0) / 3.0, (12.275 - 9.0) / 3.0];
    let hartmann_opt = vec![0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573];
    let shekel_opt = vec![
        4.000746870041,
        3.999509482384,
        4.000746865273,
        3.999509477615,
    ];
    let mut ackley_mixed_dims: Vec<VarKind> = (0..3).map(|_| cont(-1.0, 1.0)).collect();
    ackley_mixed_dims.extend((0..20).map(|_| VarKind::Binary));
    let mut rosen_dims = vec![cont(-4.0, 11.0)];
    rosen_dims.extend((0..6).map(|_| categorical4()));

    vec![
        with_optimum(
            TestFunction {
                name: "branin",
                dims: vec![cont(-3.0, 2.0), cont(-3.0, 2.0)],
                eval: branin_rescaled,
                constraint_evals: vec![],
                optimum: None,
            },
            branin_opt.clone(),
        ),
        with_optimum(
            TestFunction {
                name: "branin-constrained",
                dims: vec![cont(-3.0, 2.0), cont(-3.0, 2.0)],
                eval: branin_rescaled,
                constraint_evals: vec![branin_g1, branin_g2],
                optimum: None,
            },
            branin_opt,
        ),
        with_optimum(
            TestFunction {
                name: "ackley2",
                dims: vec![cont(-1.0, 1.0), cont(-1.0, 1.0)],
                eval: ackley_neg,
                constraint_evals: vec![],
                optimum: None,
            },
            vec![0.0, 0.0],
        ),
        with_optimum(
            TestFunction {
                name: "ackley-mixed",
                dims: ackley_mixed_dims.clone(),
                eval: ackley_neg,
                constraint_evals: vec![],
                optimum: None,
            },
            vec![0.0; 23],
        ),
        with_optimum(
            TestFunction {
                name: "ackley-mixed-constrained",
                dims: ackley_mixed_dims,
                eval: ackley_neg,
                constraint_evals: vec![ackley_mixed_g1, ackley_mixed_g2],
                optimum: None,
            },
            vec![0.0; 23],
        ),
        with_optimum(
            TestFunction {
                name: "rosenbrock-mixed",
                dims: rosen_dims,
                eval: rosenbrock_mixed_neg,
                constraint_evals: vec![],
                optimum: None,
            },
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        ),
        with_optimum(
            TestFunction {
                name: "hartmann6",
                dims: (0..6).map(|_| cont(0.0, 1.0)).collect(),
                eval: hartmann6_neg,
                constraint_evals: vec![],
                optimum: None,
            },
            hartmann_opt.clone(),
        ),
        with_optimum(
            TestFunction {
                name: "hartmann6-constrained",
                dims: (0..6).map(|_| cont(0.0, 1.0)).collect(),
                eval: hartmann6_neg,
                constraint_evals: vec![hartmann6_g1, hartmann6_g2],
                optimum: None,
            },
            hartmann_opt,
        ),
        with_optimum(
            TestFunction {
                name: "shekel",
                dims: (0..4).map(|_| cont(0.0, 10.0)).collect(),
                eval: shekel_max,
                constraint_evals: vec![],
                optimum: None,
            },
            shekel_opt,
        ),
    ]
}

/// Looks a function up by name.
pub fn lookup(name: &str) -> Result<TestFunction> {
    registry()
        .into_iter()
        .find(|f| f.name == name)
        .ok_or_else(|| SoberError::InvalidArgument(format!("unknown test function '{name}'")))
}

/// Evaluates a registered function by name (code-space points).
pub fn eval_testfn(name: &str, points: &DMatrix<f64>) -> Result<DVector<f64>> {
    lookup(name)?.evaluate(points)
}
