//! Aggregation of run CSVs into a summary table and per-function charts.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, SoberError};

use super::svg::LineChart;

/// One parsed run row (only the fields the report needs).
#[derive(Debug, Clone)]
pub struct RunRow {
    pub function: String,
    pub policy: String,
    pub seed: u64,
    pub iteration: usize,
    pub batch_size: f64,
    pub mv: f64,
    pub simple_regret: f64,
}

/// Parses every `runs/*.csv` file under `dir`.
pub fn load_rows(dir: &Path) -> Result<Vec<RunRow>> {
    let runs = dir.join("runs");
    let mut rows = Vec::new();
    let entries = std::fs::read_dir(&runs)
        .map_err(|e| SoberError::InvalidArgument(format!("cannot read {}: {e}", runs.display())))?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    files.sort();
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let parts: Vec<&str> = stem.split("__").collect();
        if parts.len() != 3 || !parts[2].starts_with('s') {
            continue;
        }
        let function = parts[0].to_string();
        let policy = parts[1].to_string();
        let seed: u64 = parts[2][1..]
            .parse()
            .map_err(|_| SoberError::InvalidArgument(format!("bad seed in file name {stem}")))?;
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 11 {
                continue;
            }
            rows.push(RunRow {
                function: function.clone(),
                policy: policy.clone(),
                seed,
                iteration: cols[0].parse().unwrap_or(0),
                batch_size: cols[1].parse().unwrap_or(f64::NAN),
                mv: cols[5].parse().unwrap_or(f64::NAN),
                simple_regret: cols[7].parse().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(rows)
}

/// Aggregated statistics per (function, policy, iteration).
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub function: String,
    pub policy: String,
    pub iteration: usize,
    pub runs: usize,
    pub median_regret: f64,
    pub stderr_regret: f64,
    pub median_mv: f64,
    pub mean_batch_size: f64,
}

pub fn median(values: &mut Vec<f64>) -> f64 {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn std_error(values: &[f64]) -> f64 {
    let clean: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if clean.len() < 2 {
        return f64::NAN;
    }
    let n = clean.len() as f64;
    let mean = clean.iter().sum::<f64>() / n;
    let var = clean.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, usize), Vec<&RunRow>> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.function.clone(), row.policy.clone(), row.iteration))
            .or_default()
            .push(row);
    }
    groups
        .into_iter()
        .map(|((function, policy, iteration), members)| {
            let mut regrets: Vec<f64> = members.iter().map(|r| r.simple_regret).collect();
            let regrets_copy = regrets.clone();
            let mut mvs: Vec<f64> = members.iter().map(|r| r.mv).collect();
            let batches: Vec<f64> = members
                .iter()
                .map(|r| r.batch_size)
                .filter(|v| v.is_finite())
                .collect();
            AggregateRow {
                function,
                policy,
                iteration,
                runs: members.len(),
                median_regret: median(&mut regrets),
                stderr_regret: std_error(&regrets_copy),
                median_mv: median(&mut mvs),
                mean_batch_size: if batches.is_empty() {
                    f64::NAN
                } else {
                    batches.iter().sum::<f64>() / batches.len() as f64
                },
            }
        })
        .collect()
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "function,policy,iteration,runs,median_regret,stderr_regret,median_mv,mean_batch_size\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.function,
            r.policy,
            r.iteration,
            r.runs,
            r.median_regret,
            r.stderr_regret,
            r.median_mv,
            r.mean_batch_size
        ));
    }
    out
}

/// Writes `aggregate.csv` and one `<function>.svg` regret chart per
/// function (one series per policy).
pub fn emit_report(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rows = load_rows(dir)?;
    if rows.is_empty() {
        return Err(SoberError::InvalidArgument(
            "no run CSVs found to aggregate".into(),
        ));
    }
    let agg = aggregate(&rows);
    let mut written = Vec::new();
    let csv_path = dir.join("aggregate.csv");
    std::fs::write(&csv_path, aggregate_csv(&agg))?;
    written.push(csv_path);

    let mut functions: Vec<String> = agg.iter().map(|r| r.function.clone()).collect();
    functions.sort();
    functions.dedup();
    for function in functions {
        let mut policies: Vec<String> = agg
            .iter()
            .filter(|r| r.function == function)
            .map(|r| r.policy.clone())
            .collect();
        policies.sort();
        policies.dedup();
        let series: Vec<(String, Vec<(f64, f64)>)> = policies
            .iter()
            .map(|policy| {
                let pts: Vec<(f64, f64)> = agg
                    .iter()
                    .filter(|r| r.function == function && &r.policy == policy)
                    .map(|r| (r.iteration as f64, r.median_regret))
                    .collect();
                (policy.clone(), pts)
            })
            .collect();
        let chart = LineChart {
            title: format!("{function}: simple regret"),
            x_label: "iteration".into(),
            y_label: "median simple regret".into(),
            series,
        };
        let path = dir.join(format!("{function}.svg"));
        std::fs::write(&path, chart.render())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_rows() -> Vec<RunRow> {
        // 10-row fixture: two policies, five iterations of one seed each.
        let mut rows = Vec::new();
        for (policy, base) in [("sober-lfi", 1.0), ("random", 2.0)] {
            for it in 1..=5usize {
                rows.push(RunRow {
                    function: "branin".into(),
                    policy: policy.into(),
                    seed: 0,
                    iteration: it,
                    batch_size: 4.0,
                    mv: 0.5 / it as f64,
                    simple_regret: base / it as f64,
                });
            }
        }
        rows
    }

    #[test]
    fn aggregate_medians_match_hand_recomputation() {
        let mut rows = fixture_rows();
        // A second seed with shifted regrets so the median is non-trivial.
        let more: Vec<RunRow> = fixture_rows()
            .into_iter()
            .map(|mut r| {
                r.seed = 1;
                r.simple_regret += 0.4;
                r
            })
            .collect();
        rows.extend(more);
        let agg = aggregate(&rows);
        let lfi_it1 = agg
            .iter()
            .find(|r| r.policy == "sober-lfi" && r.iteration == 1)
            .unwrap();
        // Median of {1.0, 1.4} = 1.2; sample std sqrt(0.08), so SE = 0.2.
        assert!((lfi_it1.median_regret - 1.2).abs() < 1e-12);
        assert!((lfi_it1.stderr_regret - 0.2).abs() < 1e-12);
        assert_eq!(lfi_it1.runs, 2);
    }

    #[test]
    fn report_writes_csv_and_chart() {
        let dir = tempfile::tempdir().unwrap();
        let runs = dir.path().join("runs");
        std::fs::create_dir_all(&runs).unwrap();
        let mut csv = String::from(crate::solver::CSV_HEADER);
        csv.push('\n');
        csv.push_str("1,4,0,0,0.1,0.5,NaN,1.25,0.2,0.01,3.5\n");
        std::fs::write(runs.join("branin__sober-lfi__s0.csv"), &csv).unwrap();
        std::fs::write(runs.join("branin__random__s0.csv"), &csv).unwrap();
        let written = emit_report(dir.path()).unwrap();
        assert!(written.iter().any(|p| p.ends_with("aggregate.csv")));
        let svg = std::fs::read_to_string(dir.path().join("branin.svg")).unwrap();
        assert!(svg.contains("sober-lfi"));
        assert!(svg.contains("random"));
    }
}
