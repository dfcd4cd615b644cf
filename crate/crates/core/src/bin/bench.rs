//! Benchmark CLI: run suites, aggregate reports, list objectives.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sober::bench::{self, BenchmarkSuite};

/// Default worker count comes from `SOBER_BENCH_WORKERS`, then the
/// available parallelism.
const WORKERS_ENV: &str = "SOBER_BENCH_WORKERS";

#[derive(Parser)]
#[command(name = "bench", about = "Batch-optimisation benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (function, policy, seed) combination in a suite file.
    Run {
        /// Path to the suite JSON.
        suite: PathBuf,
        /// Output directory for run CSVs and the suite report.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for independent runs.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Aggregate run CSVs in a directory into a table and charts.
    Report {
        /// Directory previously passed to `bench run --out`.
        dir: PathBuf,
    },
    /// List the registered test functions.
    ListFunctions,
}

fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            suite,
            out,
            workers,
        } => {
            let text = match std::fs::read_to_string(&suite) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", suite.display());
                    return ExitCode::FAILURE;
                }
            };
            let suite = match BenchmarkSuite::from_json(&text) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: invalid suite: {e}");
                    return ExitCode::FAILURE;
                }
            };
            let workers = workers.unwrap_or_else(default_workers);
            match bench::run_suite(&suite, &out, workers) {
                Ok(outcomes) => {
                    let failed: Vec<_> = outcomes.iter().filter(|o| !o.ok).collect();
                    for o in &outcomes {
                        let status = if o.ok { "ok" } else { "FAILED" };
                        println!(
                            "{status:6} {} {} seed {}",
                            o.function,
                            o.policy.name(),
                            o.seed
                        );
                    }
                    println!(
                        "{} runs, {} failed; results in {}",
                        outcomes.len(),
                        failed.len(),
                        out.display()
                    );
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for o in failed {
                            eprintln!(
                                "failed: {} {} seed {}: {}",
                                o.function,
                                o.policy.name(),
                                o.seed,
                                o.error.as_deref().unwrap_or("unknown error")
                            );
                        }
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Report { dir } => match bench::emit_report(&dir) {
            Ok(written) => {
                for path in written {
                    println!("wrote {}", path.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::ListFunctions => {
            for f in bench::registry() {
                let kinds: Vec<String> = f
                    .dims
                    .iter()
                    .map(|k| match k {
                        bench::VarKind::Continuous { lower, upper } => {
                            format!("cont[{lower}, {upper}]")
                        }
                        bench::VarKind::Binary => "binary".into(),
                        bench::VarKind::Categorical { values } => {
                            format!("cat({})", values.len())
                        }
                    })
                    .collect();
                println!(
                    "{:28} d={:2} constraints={}  {}",
                    f.name,
                    f.dim(),
                    f.constraint_count(),
                    kinds.join(" ")
                );
            }
            ExitCode::SUCCESS
        }
    }
}
