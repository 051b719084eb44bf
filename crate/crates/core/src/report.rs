//! CSV and JSON reports of experiment results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::pipeline::{AccuracyMatrix, ExperimentResult, SeedRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Structured,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "structured" | "json" => Ok(ReportFormat::Structured),
            other => Err(Error::InvalidConfig(format!("unknown report format {other}"))),
        }
    }
}

pub const AGGREGATE_HEADER: &str = "variant,A_bar_mean,A_bar_std,A_B_mean,A_B_std";

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// One row per stage `k` with `R_k_1..R_k_K` (blank above the diagonal) and
/// the stage average, followed by `A_B` and `A_bar` summary rows.
pub fn seed_csv(variant: &str, run: &SeedRun) -> String {
    let k = run.matrix.num_tasks();
    let mut out = String::from("task,seed,variant,");
    for i in 1..=k {
        let _ = write!(out, "R_k_{i},");
    }
    out.push_str("A_b\n");
    for (stage, row) in run.matrix.rows().iter().enumerate() {
        let _ = write!(out, "{},{},{variant},", stage + 1, run.seed);
        for i in 0..k {
            if let Some(v) = row.get(i) {
                out.push_str(&fmt2(*v));
            }
            out.push(',');
        }
        out.push_str(&fmt2(run.matrix.stage_average(stage)));
        out.push('\n');
    }
    let blanks = ",".repeat(k);
    let _ = writeln!(out, "A_B,{},{variant},{blanks}{}", run.seed, fmt2(run.final_accuracy));
    let _ = writeln!(out, "A_bar,{},{variant},{blanks}{}", run.seed, fmt2(run.average_accuracy));
    out
}

pub fn aggregate_csv(results: &[ExperimentResult]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.variant,
            fmt2(r.a_bar_mean),
            fmt2(r.a_bar_std),
            fmt2(r.a_b_mean),
            fmt2(r.a_b_std)
        );
    }
    out
}

#[derive(Serialize)]
struct RunRecord<'a> {
    seed: u64,
    matrix: &'a AccuracyMatrix,
    a_b: f64,
    a_bar: f64,
}

#[derive(Serialize)]
struct VariantRecord<'a> {
    variant: String,
    a_bar_mean: f64,
    a_bar_std: f64,
    a_b_mean: f64,
    a_b_std: f64,
    runs: Vec<RunRecord<'a>>,
}

pub fn structured_report(results: &[ExperimentResult]) -> Result<String> {
    let records: Vec<VariantRecord<'_>> = results
        .iter()
        .map(|r| VariantRecord {
            variant: r.variant.to_string(),
            a_bar_mean: r.a_bar_mean,
            a_bar_std: r.a_bar_std,
            a_b_mean: r.a_b_mean,
            a_b_std: r.a_b_std,
            runs: r
                .runs
                .iter()
                .map(|run| RunRecord {
                    seed: run.seed,
                    matrix: &run.matrix,
                    a_b: run.final_accuracy,
                    a_bar: run.average_accuracy,
                })
                .collect(),
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&records).map_err(|e| Error::Checkpoint(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

/// Writes the report files under `dir` and returns their paths.
///
/// CSV: `<variant>_seed<seed>.csv` per run plus `aggregate.csv`.
/// Structured: `report.json` holding every matrix and metric.
pub fn emit_report(results: &[ExperimentResult], format: ReportFormat, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            for r in results {
                for run in &r.runs {
                    let path = dir.join(format!("{}_seed{}.csv", r.variant, run.seed));
                    write_atomic(&path, seed_csv(r.variant.name(), run).as_bytes())?;
                    written.push(path);
                }
            }
            let path = dir.join("aggregate.csv");
            write_atomic(&path, aggregate_csv(results).as_bytes())?;
            written.push(path);
        }
        ReportFormat::Structured => {
            let path = dir.join("report.json");
            write_atomic(&path, structured_report(results)?.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
