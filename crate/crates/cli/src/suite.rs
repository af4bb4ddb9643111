//! The four experiment subcommands.
//!
//! Seeds (and sweep points) run as independent parallel jobs, each writing
//! only its own CSV; aggregation, plots and `summary.json` happen after all
//! jobs have returned.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use discover_core::engine::{run_seeds, OptimizerConfig, RunRecord, RunRow};
use discover_core::metrics::window_means;
use discover_core::problems::ClusteredProblem;
use discover_core::theory::{
    certify, check_gt_recursion, compute_constants, seed_average, theorem_bound_curve,
};
use discover_core::Error as CoreError;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{ConfigError, Problem, RunConfig};
use crate::output::{
    write_band_csv, write_run_csv, write_summary, OutputError, Summary, SweepPoint,
    VarianceSummary, VerifySummary, SUMMARY_SCHEMA_VERSION,
};
use crate::plot::{band, render, Chart, PlotError, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Train,
    Variance,
    VerifyBound,
    Sweep,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Train => "train",
            Subcommand::Variance => "variance",
            Subcommand::VerifyBound => "verify-bound",
            Subcommand::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcommand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            Subcommand::Train,
            Subcommand::Variance,
            Subcommand::VerifyBound,
            Subcommand::Sweep,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown subcommand `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Success,
    Diverged,
    VerificationFailed,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Success => 0,
            Verdict::Diverged => 2,
            Verdict::VerificationFailed => 3,
        }
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub verdict: Verdict,
    pub summary: Summary,
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("plot {path}: {source}")]
    Plot { path: PathBuf, source: PlotError },
    #[error("cannot create {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn run_suite(cfg: &RunConfig, cmd: Subcommand, out: &Path) -> Result<Outcome, SuiteError> {
    let cfg = cfg.clone().validated()?;
    mkdir(out)?;
    let start = Instant::now();
    let problem = cfg.problem.build()?;
    let mut summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        subcommand: cmd.name().into(),
        config: cfg.clone(),
        wall_time_seconds: 0.0,
        runs: Vec::new(),
        verification: None,
        variance: None,
        sweep: None,
    };
    let verdict = match cmd {
        Subcommand::Train => train(&cfg, &problem, out, &mut summary)?,
        Subcommand::Variance => variance(&cfg, &problem, out, &mut summary)?,
        Subcommand::VerifyBound => verify_bound(&cfg, &problem, out, &mut summary)?,
        Subcommand::Sweep => sweep(&cfg, &problem, out, &mut summary)?,
    };
    summary.wall_time_seconds = start.elapsed().as_secs_f64();
    write_summary(&out.join("summary.json"), &summary)?;
    info!("{cmd}: {verdict:?} in {:.1}s", summary.wall_time_seconds);
    Ok(Outcome { verdict, summary })
}

fn mkdir(p: &Path) -> Result<(), SuiteError> {
    std::fs::create_dir_all(p).map_err(|source| SuiteError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn run(cfg: &RunConfig, problem: &dyn ClusteredProblem, opt: &OptimizerConfig) -> Result<Vec<RunRecord>, SuiteError> {
    let plan = cfg.loop_.plan()?;
    Ok(run_seeds(problem, opt, &cfg.loop_.train_loop(), &plan, &cfg.seeds)?)
}

fn write_runs(dir: &Path, records: &[RunRecord]) -> Result<(), SuiteError> {
    mkdir(dir)?;
    records.par_iter().try_for_each(|r| {
        write_run_csv(&dir.join(format!("run-{}.csv", r.summary.seed)), &r.rows)
    })?;
    Ok(())
}

fn curves(records: &[RunRecord], f: impl Fn(&RunRow) -> Option<f64>) -> Vec<Vec<(f64, f64)>> {
    records
        .iter()
        .map(|r| r.column(&f).into_iter().map(|(s, v)| (s as f64, v)).collect::<Vec<_>>())
        .filter(|c| !c.is_empty())
        .collect()
}

fn windowed(records: &[RunRecord], window: u64) -> Vec<Vec<(f64, f64)>> {
    records
        .iter()
        .map(|r| {
            let pts = if r.between_trace.is_empty() {
                r.column(|row| row.between_var)
            } else {
                r.between_trace.clone()
            };
            window_means(&pts, window)
                .into_iter()
                .map(|(s, v)| (s as f64, v))
                .collect::<Vec<_>>()
        })
        .filter(|c| !c.is_empty())
        .collect()
}

fn chart(path: &Path, title: &str, y_label: &str, log_y: bool, series: Vec<Series>) -> Result<(), SuiteError> {
    let c = Chart {
        title: title.into(),
        x_label: "step".into(),
        y_label: y_label.into(),
        log_y,
        series,
    };
    let svg = render(&c).map_err(|source| SuiteError::Plot {
        path: path.to_path_buf(),
        source,
    })?;
    std::fs::write(path, svg).map_err(|source| SuiteError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn verdict_of(records: &[RunRecord]) -> Verdict {
    if records.iter().any(RunRecord::diverged) {
        Verdict::Diverged
    } else {
        Verdict::Success
    }
}

fn train(cfg: &RunConfig, problem: &Problem, out: &Path, summary: &mut Summary) -> Result<Verdict, SuiteError> {
    let opt = cfg.optimizer.to_optimizer();
    let records = run(cfg, problem.as_dyn(), &opt)?;
    write_runs(out, &records)?;
    let label = opt.variant.name().to_string();
    chart(
        &out.join("loss.svg"),
        "training loss",
        "loss",
        false,
        vec![Series {
            label: label.clone(),
            curves: curves(&records, |r| Some(r.train_loss)),
        }],
    )?;
    let msd = curves(&records, |r| r.msd);
    if !msd.is_empty() {
        let mut series = vec![Series {
            label: label.clone(),
            curves: msd.clone(),
        }];
        if let Some(b) = bound_overlay(cfg, problem, &msd) {
            series.push(Series {
                label: "bound".into(),
                curves: vec![b],
            });
        }
        chart(&out.join("msd.svg"), "squared distance to optimum", "MSD", true, series)?;
    }
    let between = windowed(&records, cfg.variance.window);
    if !between.is_empty() {
        chart(
            &out.join("variance.svg"),
            &format!("between-cluster variance (mean per {} steps)", cfg.variance.window),
            "variance",
            true,
            vec![Series { label, curves: between }],
        )?;
    }
    summary.runs = records.iter().map(|r| r.summary.clone()).collect();
    Ok(verdict_of(&records))
}

/// Theorem bound sampled at the recorded steps, when it applies.
fn bound_overlay(cfg: &RunConfig, problem: &Problem, msd: &[Vec<(f64, f64)>]) -> Option<Vec<(f64, f64)>> {
    let Problem::Quadratic(q) = problem else {
        return None;
    };
    if !cfg.optimizer.variant.is_discover() {
        return None;
    }
    let c = compute_constants(q).ok()?;
    let msd0 = msd.iter().map(|c| c[0].1).sum::<f64>() / msd.len() as f64;
    let steps = cfg.loop_.total_steps as usize;
    let b = theorem_bound_curve(&c, cfg.optimizer.mu, cfg.optimizer.alpha, cfg.loop_.batch_size, msd0, steps).ok()?;
    Some(
        msd[0]
            .iter()
            .filter_map(|(s, _)| b.bound_curve.get(*s as usize).map(|v| (*s, *v)))
            .collect(),
    )
}

fn variance(cfg: &RunConfig, problem: &Problem, out: &Path, summary: &mut Summary) -> Result<Verdict, SuiteError> {
    let mut cfg = cfg.clone();
    cfg.loop_.trace_between_var = true;
    let window = cfg.variance.window;
    let mut series = Vec::new();
    let mut reports = Vec::new();
    let mut verdict = Verdict::Success;
    for &variant in &cfg.variance.variants {
        let opt = OptimizerConfig {
            variant,
            hp: cfg.optimizer.hyper_params(),
        };
        let records = run(&cfg, problem.as_dyn(), &opt)?;
        write_runs(&out.join(variant.name()), &records)?;
        if verdict_of(&records) == Verdict::Diverged {
            verdict = Verdict::Diverged;
        }
        summary.runs.extend(records.iter().map(|r| r.summary.clone()));
        let w = windowed(&records, window);
        if w.is_empty() {
            warn!("{variant}: no between-cluster variance recorded");
            continue;
        }
        let b = band(&w);
        write_band_csv(&out.join(format!("variance-{}.csv", variant.name())), &b)?;
        let initial = b[0].1;
        reports.push(VarianceSummary {
            variant: variant.name().into(),
            window,
            initial,
            final_value: b[b.len() - 1].1,
            decay_step: b.iter().find(|p| p.1 < 0.1 * initial).map(|p| p.0 as u64),
        });
        series.push(Series {
            label: variant.name().into(),
            curves: w,
        });
    }
    chart(
        &out.join("variance.svg"),
        &format!("between-cluster variance (mean per {window} steps)"),
        "variance",
        true,
        series,
    )?;
    summary.variance = Some(reports);
    Ok(verdict)
}

fn verify_bound(cfg: &RunConfig, problem: &Problem, out: &Path, summary: &mut Summary) -> Result<Verdict, SuiteError> {
    let Problem::Quadratic(q) = problem else {
        return Err(ConfigError::Invalid(vec![crate::config::Violation {
            path: "problem.family".into(),
            message: "verify-bound needs the quadratic family".into(),
        }])
        .into());
    };
    if !cfg.optimizer.variant.is_discover() {
        return Err(ConfigError::Invalid(vec![crate::config::Violation {
            path: "optimizer.variant".into(),
            message: format!("verify-bound needs a Discover variant, got {}", cfg.optimizer.variant),
        }])
        .into());
    }
    let mut cfg = cfg.clone();
    cfg.loop_.eval_every = 1;
    let opt = cfg.optimizer.to_optimizer();
    let records = run(&cfg, q, &opt)?;
    write_runs(out, &records)?;
    summary.runs = records.iter().map(|r| r.summary.clone()).collect();
    if verdict_of(&records) == Verdict::Diverged {
        return Ok(Verdict::Diverged);
    }
    let msd: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.rows.iter().map(|row| row.msd.unwrap_or(f64::NAN)).collect())
        .collect();
    let gt: Vec<Vec<f64>> = records
        .iter()
        .map(|r| r.rows.iter().map(|row| row.g_t.unwrap_or(f64::NAN)).collect())
        .collect();
    let c = compute_constants(q)?;
    let (mu, alpha, b) = (cfg.optimizer.mu, cfg.optimizer.alpha, cfg.loop_.batch_size);
    let (bound, report) = certify(&msd, &c, mu, alpha, b)?;
    let mean_msd = seed_average(&msd);
    let mean_gt = seed_average(&gt);
    let recursion = check_gt_recursion(&mean_gt, &mean_msd, &c, alpha);
    let half = &mean_msd[mean_msd.len() / 2..];
    let empirical_steady_state = half.iter().sum::<f64>() / half.len() as f64;

    let band_rows: Vec<(f64, f64, f64, f64)> = mean_msd
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let bv = bound
                .as_ref()
                .and_then(|b| b.bound_curve.get(t).copied())
                .unwrap_or(f64::NAN);
            (t as f64, *m, bv, mean_gt[t])
        })
        .collect();
    write_bound_csv(&out.join("bound.csv"), &band_rows)?;

    let msd_curves: Vec<Vec<(f64, f64)>> = msd
        .iter()
        .map(|m| m.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect())
        .collect();
    let mut series = vec![Series {
        label: opt.variant.name().into(),
        curves: msd_curves,
    }];
    if let Some(bd) = &bound {
        series.push(Series {
            label: "bound".into(),
            curves: vec![bd.bound_curve.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect()],
        });
    }
    chart(&out.join("msd_bound.svg"), "MSD vs convergence bound", "MSD", true, series)?;
    chart(
        &out.join("loss.svg"),
        "training loss",
        "loss",
        false,
        vec![Series {
            label: opt.variant.name().into(),
            curves: curves(&records, |r| Some(r.train_loss)),
        }],
    )?;

    let recursion_ok = recursion.violation_fraction <= discover_core::theory::MAX_VIOLATION_FRACTION;
    let passed = report.passed.map(|p| p && recursion_ok);
    summary.verification = Some(VerifySummary {
        constants: c,
        mu,
        alpha,
        batch_size: b,
        mu_max: bound.as_ref().map(|b| b.mu_max),
        out_of_regime: report.out_of_regime,
        n_seeds: report.n_seeds,
        n_steps: report.n_steps,
        violations: report.violations,
        violation_fraction: report.violation_fraction,
        passed,
        steady_state_bound: bound.as_ref().map(|b| b.steady_state),
        empirical_steady_state,
        gt_recursion: Some(recursion),
    });
    if report.out_of_regime {
        warn!("mu = {mu} is outside the admissible window; no claim is made");
    }
    Ok(if passed == Some(true) {
        Verdict::Success
    } else {
        Verdict::VerificationFailed
    })
}

fn write_bound_csv(path: &Path, rows: &[(f64, f64, f64, f64)]) -> Result<(), SuiteError> {
    let mut w = csv::Writer::from_path(path).map_err(OutputError::from)?;
    let wr = |w: &mut csv::Writer<std::fs::File>, r: &[String]| w.write_record(r).map_err(OutputError::from);
    wr(&mut w, &["step".into(), "mean_msd".into(), "bound".into(), "mean_g_t".into()])?;
    for (t, m, b, g) in rows {
        let b = if b.is_nan() { String::new() } else { crate::output::fmt_real(*b) };
        wr(&mut w, &[(*t as u64).to_string(), crate::output::fmt_real(*m), b, crate::output::fmt_real(*g)])?;
    }
    w.flush().map_err(|source| SuiteError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct GridPoint {
    mu: f64,
    alpha: f64,
    alpha_n: Option<f64>,
    beta: f64,
}

fn grid(cfg: &RunConfig) -> Vec<GridPoint> {
    let o = &cfg.optimizer;
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let alpha_n: Vec<Option<f64>> = if cfg.sweep.alpha_n.is_empty() {
        vec![None]
    } else {
        cfg.sweep.alpha_n.iter().copied().map(Some).collect()
    };
    let mut out = Vec::new();
    for mu in or(&cfg.sweep.mu, o.mu) {
        for alpha in or(&cfg.sweep.alpha, o.alpha) {
            for an in &alpha_n {
                for beta in or(&cfg.sweep.beta, o.beta) {
                    out.push(GridPoint {
                        mu,
                        alpha,
                        alpha_n: *an,
                        beta,
                    });
                }
            }
        }
    }
    out
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

fn sweep(cfg: &RunConfig, problem: &Problem, out: &Path, summary: &mut Summary) -> Result<Verdict, SuiteError> {
    let points = grid(cfg);
    let n_clusters = problem.as_dyn().spec().n_clusters();
    let results: Vec<Result<Vec<RunRecord>, SuiteError>> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut hp = cfg.optimizer.hyper_params();
            hp.mu = p.mu;
            hp.alpha = p.alpha;
            hp.beta = p.beta;
            if let Some(a) = p.alpha_n {
                hp.alpha_n = Some(vec![a; n_clusters]);
            }
            let opt = OptimizerConfig {
                variant: cfg.optimizer.variant,
                hp,
            };
            if cfg.optimizer.variant.is_discover() {
                opt.hp.validate(opt.variant, problem.as_dyn().spec())?;
            }
            let records = run(cfg, problem.as_dyn(), &opt)?;
            write_runs(&out.join(format!("point-{i}")), &records)?;
            Ok(records)
        })
        .collect();
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut verdict = Verdict::Success;
    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(OutputError::from)?;
    w.write_record([
        "index", "mu", "alpha", "alpha_n", "beta", "mean_final_loss", "mean_final_msd",
        "mean_final_val_acc", "n_diverged",
    ])
    .map_err(OutputError::from)?;
    for (i, (p, res)) in points.iter().zip(results).enumerate() {
        let records = res?;
        if verdict_of(&records) == Verdict::Diverged {
            verdict = Verdict::Diverged;
        }
        let s: Vec<_> = records.iter().map(|r| &r.summary).collect();
        let point = SweepPoint {
            index: i,
            mu: p.mu,
            alpha: p.alpha,
            alpha_n: p.alpha_n,
            beta: p.beta,
            mean_final_loss: s.iter().map(|x| x.final_loss).sum::<f64>() / s.len() as f64,
            mean_final_msd: mean_opt(s.iter().map(|x| x.final_msd)),
            mean_final_val_acc: mean_opt(s.iter().map(|x| x.final_val_acc)),
            n_diverged: records.iter().filter(|r| r.diverged()).count(),
        };
        let f = crate::output::fmt_real;
        let fo = |x: Option<f64>| x.map(f).unwrap_or_default();
        w.write_record([
            i.to_string(),
            f(point.mu),
            f(point.alpha),
            fo(point.alpha_n),
            f(point.beta),
            f(point.mean_final_loss),
            fo(point.mean_final_msd),
            fo(point.mean_final_val_acc),
            point.n_diverged.to_string(),
        ])
        .map_err(OutputError::from)?;
        let c = curves(&records, |r| Some(r.train_loss));
        if !c.is_empty() {
            series.push(Series {
                label: format!("#{i} mu={}", p.mu),
                curves: c,
            });
        }
        summary.runs.extend(s.into_iter().cloned());
        rows.push(point);
    }
    w.flush().map_err(|source| SuiteError::Io {
        path: out.join("sweep.csv"),
        source,
    })?;
    chart(&out.join("loss.svg"), "training loss per grid point", "loss", false, series)?;
    summary.sweep = Some(rows);
    Ok(verdict)
}
