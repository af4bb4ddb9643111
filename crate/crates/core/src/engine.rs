//! Deterministic training loop over simulated data-parallel shards.
//!
//! A step composes a minibatch, splits it across shards, evaluates each
//! shard's gradients at the transport point, reduces the shard partials in a
//! fixed order and applies the optimizer. Everything random is derived from
//! `(seed, step)` so a run is a pure function of its configuration.

use log::{debug, info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{BatchGradients, BatchItem, ClusterSpec, MiniBatch};
use crate::error::{Error, Result};
use crate::metrics::{between_var, noise_moments, sigma_in_sq_at};
use crate::optim::discover::gbar_drift;
use crate::optim::{HyperParams, Optimizer, Variant};
use crate::problems::ClusteredProblem;
use crate::rng::{Purpose, RngStream, StreamRng};
use crate::theory::track_gt;
use crate::vector::ParamVector;

/// MSD above this aborts a run as diverged.
pub const DIVERGENCE_MSD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Every shard draws one cluster and fills its sub-batch from it.
    SingleClusterPerShard,
    /// Cluster counts `p_n·|B|` with largest-remainder rounding.
    Proportional,
    /// Each sample draws its cluster independently.
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardingPlan {
    pub n_shards: usize,
    pub samples_per_shard: usize,
    pub composition: Composition,
}

impl ShardingPlan {
    pub fn new(n_shards: usize, samples_per_shard: usize, composition: Composition) -> Result<Self> {
        let plan = Self {
            n_shards,
            samples_per_shard,
            composition,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// One shard holding the whole batch.
    pub fn single(batch_size: usize, composition: Composition) -> Result<Self> {
        Self::new(1, batch_size, composition)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_shards == 0 || self.samples_per_shard == 0 {
            return Err(Error::InvalidPlan(
                "n_shards and samples_per_shard must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_shards * self.samples_per_shard
    }

    /// Same batch stream split over `n_shards` shards. Fails when the batch
    /// size does not divide evenly.
    pub fn resharded(&self, n_shards: usize) -> Result<Self> {
        let b = self.batch_size();
        if n_shards == 0 || b % n_shards != 0 {
            return Err(Error::InvalidPlan(format!(
                "batch size {b} is not divisible into {n_shards} shards"
            )));
        }
        Self::new(n_shards, b / n_shards, self.composition)
    }
}

/// Per-cluster counts `round(p_n·total)` with largest-remainder rounding;
/// ties go to the lower cluster id.
pub fn proportional_counts(spec: &ClusterSpec, total: usize) -> Vec<usize> {
    let exact: Vec<f64> = spec.probs().iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        if (ra - rb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    for &n in order.iter().take(total.saturating_sub(assigned)) {
        counts[n] += 1;
    }
    counts
}

/// Draws one minibatch, laid out shard after shard.
pub fn compose_batch(spec: &ClusterSpec, plan: &ShardingPlan, rng: &mut StreamRng) -> Result<MiniBatch> {
    plan.validate()?;
    let b = plan.batch_size();
    let mut items = Vec::with_capacity(b);
    match plan.composition {
        Composition::SingleClusterPerShard => {
            for _ in 0..plan.n_shards {
                let cluster = spec.sample(rng);
                for _ in 0..plan.samples_per_shard {
                    items.push(BatchItem {
                        cluster,
                        sample: rng.random(),
                    });
                }
            }
        }
        Composition::Proportional => {
            for (cluster, count) in proportional_counts(spec, b).into_iter().enumerate() {
                for _ in 0..count {
                    items.push(BatchItem {
                        cluster,
                        sample: rng.random(),
                    });
                }
            }
        }
        Composition::Iid => {
            for _ in 0..b {
                let cluster = spec.sample(rng);
                items.push(BatchItem {
                    cluster,
                    sample: rng.random(),
                });
            }
        }
    }
    MiniBatch::new(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainLoopConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    /// Decoupled decay `θ ← θ·(1 − λ·lr)` after each update.
    pub weight_decay: f64,
    pub eval_every: u64,
    /// Fresh batches per noise-moment probe; 0 disables the probe.
    pub noise_probe_batches: usize,
    /// Record the between-cluster variance after every step, independently
    /// of `eval_every`.
    pub trace_between_var: bool,
}

impl Default for TrainLoopConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            warmup_steps: 0,
            lr_schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            eval_every: 1,
            noise_probe_batches: 0,
            trace_between_var: false,
        }
    }
}

impl TrainLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidPlan(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidPlan("eval_every must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidPlan(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Learning rate used at step `t` (0-based) for peak rate `peak`.
    pub fn lr_at(&self, t: u64, peak: f64) -> f64 {
        let w = self.warmup_steps;
        if t < w {
            return peak * (t + 1) as f64 / w as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => peak,
            LrSchedule::Cosine => {
                let span = self.total_steps.saturating_sub(w).max(1) as f64;
                let frac = ((t - w) as f64 / span).min(1.0);
                0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// `θ ← θ·(1 − λ·lr)`; exactly a no-op for `λ = 0`.
pub fn apply_weight_decay(theta: &mut ParamVector, weight_decay: f64, lr: f64) {
    if weight_decay != 0.0 {
        theta.scale_in_place(1.0 - weight_decay * lr);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub msd: Option<f64>,
    pub in_var: f64,
    pub between_var: Option<f64>,
    pub noise_mean_norm: Option<f64>,
    pub gbar_drift: Option<f64>,
    pub g_t: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: Variant,
    pub status: RunStatus,
    pub steps_run: u64,
    pub final_loss: f64,
    pub final_msd: Option<f64>,
    pub final_val_acc: Option<f64>,
    /// Fraction of steps whose batch missed at least one cluster.
    pub missing_cluster_fraction: f64,
    /// Per-cluster buffer rates in effect (Discover family).
    pub alpha_n: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    /// `(step, between_var)` after every step when tracing is enabled.
    pub between_trace: Vec<(u64, f64)>,
    pub summary: RunSummary,
    pub final_theta: ParamVector,
}

impl RunRecord {
    pub fn diverged(&self) -> bool {
        matches!(self.summary.status, RunStatus::Diverged { .. })
    }

    pub fn column(&self, f: impl Fn(&RunRow) -> Option<f64>) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| f(r).map(|v| (r.step, v)))
            .collect()
    }
}

/// Optimizer choice for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub variant: Variant,
    #[serde(flatten)]
    pub hp: HyperParams,
}

/// Gradients of one shard's items, accumulated in item order.
fn shard_gradients<P: ClusteredProblem + ?Sized>(
    problem: &P,
    items: &[BatchItem],
    point: &ParamVector,
    seed: u64,
) -> Result<BatchGradients> {
    let mut out = BatchGradients::empty(problem.dim(), problem.spec().n_clusters());
    for item in items {
        out.push(item.cluster, &problem.sample_gradient(item, point, seed))?;
    }
    Ok(out)
}

pub fn evaluate_shards<P: ClusteredProblem + ?Sized>(
    problem: &P,
    batch: &MiniBatch,
    plan: &ShardingPlan,
    point: &ParamVector,
    seed: u64,
) -> Result<Vec<BatchGradients>> {
    let chunks: Vec<&[BatchItem]> = batch.items().chunks(plan.samples_per_shard).collect();
    if chunks.len() == 1 {
        return Ok(vec![shard_gradients(problem, chunks[0], point, seed)?]);
    }
    chunks
        .par_iter()
        .map(|items| shard_gradients(problem, items, point, seed))
        .collect()
}

struct Evaluator<'a, P: ?Sized> {
    problem: &'a P,
    cfg: &'a TrainLoopConfig,
    batch_size: usize,
    seed: u64,
}

impl<P: ClusteredProblem + ?Sized> Evaluator<'_, P> {
    fn row(&self, step: u64, lr: f64, theta: &ParamVector, opt: &Optimizer) -> Result<RunRow> {
        let p = self.problem;
        let state = opt.state();
        let noise_mean_norm = if self.cfg.noise_probe_batches >= 2 {
            let probe_seed = RngStream::for_purpose(self.seed, Purpose::Probe)
                .substream(step)
                .rng()
                .random();
            Some(
                noise_moments(
                    p,
                    state,
                    theta,
                    self.batch_size,
                    self.cfg.noise_probe_batches,
                    probe_seed,
                )?
                .mean_norm,
            )
        } else {
            None
        };
        let g_t = if state.clusters.is_some() && p.minimizer().is_some() {
            Some(track_gt(p, state)?)
        } else {
            None
        };
        Ok(RunRow {
            step,
            lr,
            train_loss: p.loss(theta),
            msd: p.minimizer().map(|opt| theta.dist_sq(opt)),
            in_var: sigma_in_sq_at(p, theta),
            between_var: between_var(p, state, theta, self.batch_size),
            noise_mean_norm,
            gbar_drift: state
                .clusters
                .is_some()
                .then(|| gbar_drift(state, p.spec()))
                .transpose()?,
            g_t,
            val_acc: p.validation_accuracy(theta),
        })
    }
}

fn divergence(row: &RunRow) -> Option<String> {
    if !row.train_loss.is_finite() {
        return Some(format!("non-finite training loss {}", row.train_loss));
    }
    match row.msd {
        Some(m) if !(m <= DIVERGENCE_MSD) => Some(format!("squared distance {m:e} exceeds bound")),
        _ => None,
    }
}

/// Runs `loop_cfg.total_steps` steps from the problem's initial point.
pub fn run_training<P: ClusteredProblem + ?Sized>(
    problem: &P,
    optimizer: &OptimizerConfig,
    loop_cfg: &TrainLoopConfig,
    plan: &ShardingPlan,
    seed: u64,
) -> Result<RunRecord> {
    loop_cfg.validate()?;
    plan.validate()?;
    let spec = problem.spec().clone();
    let dim = problem.dim();
    let mut opt = Optimizer::new(
        optimizer.variant,
        optimizer.hp.clone(),
        spec.clone(),
        dim,
        loop_cfg.total_steps,
    )?;
    let alpha_n = optimizer
        .variant
        .is_discover()
        .then(|| optimizer.hp.alpha_n_for(&spec))
        .transpose()?;
    if let Some(rates) = &alpha_n {
        debug!("seed {seed}: per-cluster buffer rates {rates:?} over {} shards", plan.n_shards);
    }
    let eval = Evaluator {
        problem,
        cfg: loop_cfg,
        batch_size: plan.batch_size(),
        seed,
    };
    let peak = optimizer.hp.mu;
    let mut theta = problem.initial_point();
    let mut rows = vec![eval.row(0, loop_cfg.lr_at(0, peak), &theta, &opt)?];
    let mut status = divergence(&rows[0]).map_or(RunStatus::Completed, |reason| {
        RunStatus::Diverged { step: 0, reason }
    });
    let batch_size = plan.batch_size();
    let mut between_trace = Vec::new();
    let mut trace = |step: u64, theta: &ParamVector, opt: &Optimizer| {
        if loop_cfg.trace_between_var {
            if let Some(v) = between_var(problem, opt.state(), theta, batch_size) {
                between_trace.push((step, v));
            }
        }
    };
    trace(0, &theta, &opt);
    let data = RngStream::for_purpose(seed, Purpose::Data);
    let mut missing_steps = 0u64;
    let mut steps_run = 0u64;

    if status == RunStatus::Completed {
        for t in 0..loop_cfg.total_steps {
            let lr = loop_cfg.lr_at(t, peak);
            let mut rng = data.substream(t).rng();
            let batch = compose_batch(&spec, plan, &mut rng)?;
            if batch.cluster_set().len() < spec.n_clusters() {
                missing_steps += 1;
            }
            let point = opt.transport_point(&theta);
            let shards = evaluate_shards(problem, &batch, plan, &point, seed)?;
            match opt.step_sharded(&mut theta, &shards, lr) {
                Ok(()) => {}
                Err(Error::NonFinite(what)) => {
                    status = RunStatus::Diverged {
                        step: t + 1,
                        reason: format!("non-finite {what}"),
                    };
                    steps_run = t + 1;
                    break;
                }
                Err(e) => return Err(e),
            }
            apply_weight_decay(&mut theta, loop_cfg.weight_decay, lr);
            steps_run = t + 1;
            trace(t + 1, &theta, &opt);
            let last = t + 1 == loop_cfg.total_steps;
            if (t + 1) % loop_cfg.eval_every == 0 || last || !theta.is_finite() {
                let row = eval.row(t + 1, loop_cfg.lr_at(t + 1, peak), &theta, &opt)?;
                let reason = divergence(&row);
                rows.push(row);
                if let Some(reason) = reason {
                    status = RunStatus::Diverged { step: t + 1, reason };
                    break;
                }
            }
        }
    }
    let missing_cluster_fraction = if steps_run == 0 {
        0.0
    } else {
        missing_steps as f64 / steps_run as f64
    };
    if missing_cluster_fraction > 0.5 && optimizer.variant.is_discover() {
        warn!(
            "seed {seed}: {:.0}% of batches missed at least one cluster",
            100.0 * missing_cluster_fraction
        );
    }
    if let RunStatus::Diverged { step, reason } = &status {
        info!("seed {seed}: diverged at step {step}: {reason}");
    }
    let last = rows.last().expect("initial row is always present");
    let summary = RunSummary {
        seed,
        variant: optimizer.variant,
        status,
        steps_run,
        final_loss: last.train_loss,
        final_msd: last.msd,
        final_val_acc: last.val_acc,
        missing_cluster_fraction,
        alpha_n,
    };
    Ok(RunRecord {
        rows,
        between_trace,
        summary,
        final_theta: theta,
    })
}

/// Independent runs over `seeds`, executed in parallel; results keep the
/// order of `seeds`.
pub fn run_seeds<P: ClusteredProblem + ?Sized>(
    problem: &P,
    optimizer: &OptimizerConfig,
    loop_cfg: &TrainLoopConfig,
    plan: &ShardingPlan,
    seeds: &[u64],
) -> Result<Vec<RunRecord>> {
    seeds
        .par_iter()
        .map(|&s| run_training(problem, optimizer, loop_cfg, plan, s))
        .collect()
}
