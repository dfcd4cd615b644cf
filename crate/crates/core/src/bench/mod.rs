//! Benchmark harness: synthetic objectives, competing batch policies, a
//! suite runner and report generation.

pub mod functions;
pub mod report;
pub mod runner;
pub mod svg;

pub use functions::{eval_testfn, lookup, registry, TestFunction, VarKind};
pub use report::emit_report;
pub use runner::{run_single, run_suite, BenchmarkSuite, Policy, RunOutcome, SuiteEntry};
