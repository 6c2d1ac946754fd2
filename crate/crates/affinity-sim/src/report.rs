//! Result tables: CSV output, CSV parsing for plotting, and run summaries.
//!
//! Floats are written with the shortest round-trip formatting, so a file is
//! a pure function of (scenario, seed) and byte-identical across runs.

use std::fmt::Write as _;

use crate::error::Error;
use crate::model::LocalityStructure;
use crate::sim::{mean_and_std, MetricsReport};

pub const RESULTS_HEADER: &str =
    "policy,lambda,replication,mean_completion_time,completed,backlog_slope,invariant_violations,seed";
pub const ESTIMATES_HEADER: &str =
    "policy,lambda,replication,server,level,alpha_hat,count,true_alpha";

/// One parsed line of a results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub policy: String,
    pub lambda: f64,
    pub replication: u32,
    pub mean_completion_time: Option<f64>,
    pub completed: u64,
    pub backlog_slope: f64,
    pub invariant_violations: u64,
    pub seed: u64,
}

pub fn results_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in reports {
        let mean = r.mean_completion_time.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.policy,
            r.lambda_total,
            r.replication,
            mean,
            r.completed,
            r.backlog_slope,
            r.invariant_violations,
            r.seed
        )
        .expect("string write");
    }
    out
}

/// Final per-(server, level) rate estimates of blind runs, one row per cell,
/// with the true rate alongside. Server and level indices are 1-based.
pub fn estimates_to_csv(reports: &[MetricsReport], loc: &LocalityStructure) -> String {
    let mut out = String::from(ESTIMATES_HEADER);
    out.push('\n');
    for r in reports {
        let Some(est) = &r.final_estimates else { continue };
        for m in 0..loc.num_servers() {
            for n in 0..loc.num_levels(m) {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.policy,
                    r.lambda_total,
                    r.replication,
                    m + 1,
                    n + 1,
                    est.estimate(m, n),
                    est.count(m, n),
                    loc.level_rate(m, n)
                )
                .expect("string write");
            }
        }
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, Error> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == RESULTS_HEADER => {}
        _ => return Err(Error::config("results file is missing the expected header")),
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::config(format!("line {}: expected 8 fields", k + 2)));
        }
        let bad = |what: &str| Error::config(format!("line {}: bad {what}", k + 2));
        rows.push(ResultRow {
            policy: fields[0].to_string(),
            lambda: fields[1].parse().map_err(|_| bad("lambda"))?,
            replication: fields[2].parse().map_err(|_| bad("replication"))?,
            mean_completion_time: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse().map_err(|_| bad("mean_completion_time"))?)
            },
            completed: fields[4].parse().map_err(|_| bad("completed"))?,
            backlog_slope: fields[5].parse().map_err(|_| bad("backlog_slope"))?,
            invariant_violations: fields[6].parse().map_err(|_| bad("invariant_violations"))?,
            seed: fields[7].parse().map_err(|_| bad("seed"))?,
        });
    }
    Ok(rows)
}

/// Human-readable per-cell summary: replication mean and spread of the
/// completion time, plus the backlog slope verdict.
pub fn summarize(reports: &[MetricsReport]) -> String {
    let mut cells: Vec<(String, f64)> = Vec::new();
    for r in reports {
        let key = (r.policy.clone(), r.lambda_total);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    let mut out = String::new();
    writeln!(out, "{:<22} {:>8} {:>16} {:>12} {:>10}", "policy", "lambda", "mean +/- std", "slope", "status")
        .unwrap();
    for (policy, lambda) in cells {
        let group: Vec<&MetricsReport> = reports
            .iter()
            .filter(|r| r.policy == policy && r.lambda_total == lambda)
            .collect();
        let means: Vec<f64> = group.iter().filter_map(|r| r.mean_completion_time).collect();
        let slopes: Vec<f64> = group.iter().map(|r| r.backlog_slope).collect();
        let (slope_mean, _) = mean_and_std(&slopes);
        let status = if slope_mean > 0.01 { "diverging" } else { "stable" };
        let mean_text = if means.is_empty() {
            "-".to_string()
        } else {
            let (m, s) = mean_and_std(&means);
            format!("{m:.4} +/- {s:.4}")
        };
        writeln!(out, "{policy:<22} {lambda:>8} {mean_text:>16} {slope_mean:>12.6} {status:>10}")
            .unwrap();
    }
    out
}
