//! Per-seed CSV metrics and the versioned `summary.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use discover_core::engine::{RunRow, RunSummary};
use discover_core::theory::{ConvexityConstants, RecursionReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

pub const RUN_COLUMNS: [&str; 10] = [
    "step",
    "lr",
    "train_loss",
    "msd",
    "in_var",
    "between_var",
    "noise_mean_norm",
    "gbar_drift",
    "g_t",
    "val_acc",
];

#[derive(Debug, thiserror::Error)]
pub enum OutputError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed csv: {0}")]
    Malformed(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>, OutputError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| OutputError::Malformed(format!("not a number: `{s}`")))
}

fn parse_req(s: &str) -> Result<f64, OutputError> {
    parse_opt(s)?.ok_or_else(|| OutputError::Malformed("empty required cell".into()))
}

pub fn write_run_csv(path: &Path, rows: &[RunRow]) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(RUN_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            fmt_real(r.lr),
            fmt_real(r.train_loss),
            fmt_opt(r.msd),
            fmt_real(r.in_var),
            fmt_opt(r.between_var),
            fmt_opt(r.noise_mean_norm),
            fmt_opt(r.gbar_drift),
            fmt_opt(r.g_t),
            fmt_opt(r.val_acc),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_run_csv(path: &Path) -> Result<Vec<RunRow>, OutputError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RUN_COLUMNS {
        return Err(OutputError::Malformed(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let c = |i: usize| rec.get(i).unwrap_or("");
        rows.push(RunRow {
            step: c(0)
                .parse()
                .map_err(|_| OutputError::Malformed(format!("bad step `{}`", c(0))))?,
            lr: parse_req(c(1))?,
            train_loss: parse_req(c(2))?,
            msd: parse_opt(c(3))?,
            in_var: parse_req(c(4))?,
            between_var: parse_opt(c(5))?,
            noise_mean_norm: parse_opt(c(6))?,
            gbar_drift: parse_opt(c(7))?,
            g_t: parse_opt(c(8))?,
            val_acc: parse_opt(c(9))?,
        });
    }
    Ok(rows)
}

/// Seed-aggregated curve: mean, min and max at each step.
pub fn write_band_csv(path: &Path, band: &[(f64, f64, f64, f64)]) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["step", "mean", "min", "max"])?;
    for (x, mean, lo, hi) in band {
        w.write_record([fmt_real(*x), fmt_real(*mean), fmt_real(*lo), fmt_real(*hi)])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_band_csv(path: &Path) -> Result<Vec<(f64, f64, f64, f64)>, OutputError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = rec.iter().map(parse_req).collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(OutputError::Malformed(format!("expected 4 cells, got {}", v.len())));
        }
        out.push((v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub constants: ConvexityConstants,
    pub mu: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub mu_max: Option<f64>,
    pub out_of_regime: bool,
    pub n_seeds: usize,
    pub n_steps: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    /// `None` when no claim is made (out of regime or too few seeds).
    pub passed: Option<bool>,
    pub steady_state_bound: Option<f64>,
    /// Seed-mean MSD averaged over the second half of the run.
    pub empirical_steady_state: f64,
    pub gt_recursion: Option<RecursionReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub variant: String,
    pub window: u64,
    pub initial: f64,
    pub final_value: f64,
    /// First window start whose seed-mean falls below 10% of the first window.
    pub decay_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub mu: f64,
    pub alpha: f64,
    pub alpha_n: Option<f64>,
    pub beta: f64,
    pub mean_final_loss: f64,
    pub mean_final_msd: Option<f64>,
    pub mean_final_val_acc: Option<f64>,
    pub n_diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub subcommand: String,
    pub config: RunConfig,
    pub wall_time_seconds: f64,
    pub runs: Vec<RunSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerifySummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<Vec<VarianceSummary>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<SweepPoint>>,
}

pub fn write_summary(path: &Path, s: &Summary) -> Result<(), OutputError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, s)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary, OutputError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
