//! Batch Bayesian optimisation and quadrature by measure recombination.
//!
//! The solver lifts global optimisation to a distributional problem: a
//! synthetic-likelihood target over the location of the optimum is
//! approximated by a weighted particle measure, and each batch of queries is
//! the convex quadrature rule that best preserves that measure under the GP
//! posterior covariance. Modules follow the pipeline:
//!
//! * [`gp`] — exact GP regression and hyperparameter fitting;
//! * [`domain`] — priors, weighted refits and sequential importance
//!   resampling;
//! * [`lifting`] — targets over the optimum (improvement probability,
//!   Thompson draws, feasibility tilts);
//! * [`nystrom`] — low-rank test functions of the posterior covariance;
//! * [`quadrature`] — recombination, the tolerance LP and batch selection;
//! * [`solver`] — the outer loop, stopping rule and metrics;
//! * `bench` — synthetic benchmarks, baseline policies and reports.

// `!(v >= 0.0)` style guards are used on purpose: they reject NaN where a
// plain `< 0.0` comparison would let it through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod domain;
pub mod error;
pub mod gp;
pub mod lifting;
pub mod linalg;
pub mod nystrom;
pub mod quadrature;
pub mod solver;

pub use error::{Result, SoberError};
