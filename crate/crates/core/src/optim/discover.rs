//! Multi-momentum optimizers with one gradient buffer per cluster.
//!
//! Each sample's gradient is corrected by the control variate
//! `ḡ − g^(n)`, where `g^(n)` tracks the mean gradient of the sample's
//! cluster and `ḡ` tracks their probability-weighted average:
//!
//! ```text
//! θ ← θ − μ/|B| · Σ_i ( g_i − g^(n_i) + ḡ )
//! g^(n) ← g^(n) + α_n·( mean_{B^n}(g) − g^(n) )     n ∈ C
//! ḡ     ← ḡ + α/|B| · Σ_i ( g_i − g^(n_i) )
//! ```
//!
//! The θ-step uses the buffers from before the update. `ḡ` has its own
//! recursion and is not recomputed from the cluster buffers; it coincides
//! with `Σ p_n g^(n)` only when every batch holds a single cluster and
//! `α_n = α/p_n`. [`gbar_drift`] measures the gap.
//!
//! Buffer updates are expressed as per-shard [`ShardDelta`]s reduced by
//! [`sync_buffers`], so a sequential step is the one-shard case of the
//! data-parallel scheme.

use std::collections::BTreeMap;

use super::igt::update_tail_average;
use super::{checked_mean, merge_shards, missing, HyperParams, OptimizerState, Variant};
use crate::cluster::{BatchGradients, ClusterId, ClusterSpec};
use crate::error::{Error, Result};
use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBuffers {
    /// `g^(n)`, one per cluster.
    pub buffers: Vec<ParamVector>,
    /// `ḡ`
    pub gbar: ParamVector,
}

impl ClusterBuffers {
    pub fn zeros(n_clusters: usize, dim: usize) -> Self {
        Self {
            buffers: vec![ParamVector::zeros(dim); n_clusters],
            gbar: ParamVector::zeros(dim),
        }
    }

    /// `Σ_n p_n g^(n)`
    pub fn weighted_average(&self, spec: &ClusterSpec) -> ParamVector {
        let mut out = ParamVector::zeros(self.gbar.dim());
        for (b, p) in self.buffers.iter().zip(spec.probs()) {
            out.axpy_in_place(*p, b);
        }
        out
    }

    /// `(1/|B|)·Σ_i g^(n_i)` over the samples of `grads`.
    fn batch_control(&self, grads: &BatchGradients) -> ParamVector {
        let size = grads.batch_size() as f64;
        let mut out = ParamVector::zeros(self.gbar.dim());
        for (n, part) in grads.iter() {
            out.axpy_in_place(part.count as f64 / size, &self.buffers[n]);
        }
        out
    }
}

/// One shard's buffer corrections: per present cluster, the sample count and
/// `Σ_i (target_i − g^(n))` against the pre-step buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardDelta {
    pub clusters: BTreeMap<ClusterId, (usize, ParamVector)>,
}

impl ShardDelta {
    /// Targets are the per-sample gradients (Discover, Discover-QHM).
    pub fn from_grads(part: &BatchGradients, buffers: &ClusterBuffers) -> Self {
        let clusters = part
            .iter()
            .map(|(n, c)| {
                let mut delta = c.sum.clone();
                delta.axpy_in_place(-(c.count as f64), &buffers.buffers[n]);
                (n, (c.count, delta))
            })
            .collect();
        Self { clusters }
    }

    /// Every sample's target is the shared vector `target` (Discover-IGT).
    pub fn towards(target: &ParamVector, part: &BatchGradients, buffers: &ClusterBuffers) -> Self {
        let clusters = part
            .iter()
            .map(|(n, c)| {
                let mut delta = target.sub(&buffers.buffers[n]);
                delta.scale_in_place(c.count as f64);
                (n, (c.count, delta))
            })
            .collect();
        Self { clusters }
    }
}

/// Applies the reduced shard corrections to the cluster buffers and `ḡ`.
///
/// Same-cluster corrections from several shards are pooled per sample, which
/// is the plain average `(δ₁+δ₂)/2` when the shards hold equally many
/// samples of that cluster. Clusters are applied in id order and every sum
/// runs in shard order.
pub fn sync_buffers(
    buffers: &mut ClusterBuffers,
    reports: &[Option<ShardDelta>],
    alpha: f64,
    alpha_n: &[f64],
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let dim = buffers.gbar.dim();
    let mut pooled: BTreeMap<ClusterId, (usize, ParamVector)> = BTreeMap::new();
    let mut gbar_sum = ParamVector::zeros(dim);
    let mut total = 0usize;
    for (s, report) in reports.iter().enumerate() {
        let report = report.as_ref().ok_or(Error::MissingShard(s))?;
        for (&n, (count, delta)) in &report.clusters {
            if n >= buffers.buffers.len() {
                return Err(Error::ClusterOutOfRange {
                    id: n,
                    n_clusters: buffers.buffers.len(),
                });
            }
            let entry = pooled
                .entry(n)
                .or_insert_with(|| (0, ParamVector::zeros(dim)));
            entry.0 += count;
            entry.1.axpy_in_place(1.0, delta);
            gbar_sum.axpy_in_place(1.0, delta);
            total += count;
        }
    }
    if total == 0 {
        return Err(Error::EmptyBatch);
    }
    for (n, (count, delta)) in &pooled {
        buffers.buffers[*n].axpy_in_place(alpha_n[*n] / *count as f64, delta);
    }
    buffers.gbar.axpy_in_place(alpha / total as f64, &gbar_sum);
    Ok(())
}

/// `ν·g^(n) + (1−ν)·mean`
pub fn qhm_mix(buffer: &ParamVector, sub_batch_mean: &ParamVector, nu: f64) -> ParamVector {
    let mut out = buffer.scaled(nu);
    out.axpy_in_place(1.0 - nu, sub_batch_mean);
    out
}

/// `‖ḡ − Σ_n p_n g^(n)‖₂`
pub fn gbar_drift(state: &OptimizerState, spec: &ClusterSpec) -> Result<f64> {
    let buffers = state.clusters.as_ref().ok_or(Error::WrongVariant {
        variant: state.variant.name(),
        operation: "report gbar drift",
    })?;
    Ok(buffers.gbar.dist_sq(&buffers.weighted_average(spec)).sqrt())
}

fn apply_control_variate_step(
    theta: &mut ParamVector,
    lead: &ParamVector,
    control: &ParamVector,
    gbar: &ParamVector,
    mu: f64,
) {
    for (((t, l), c), g) in theta
        .as_mut_slice()
        .iter_mut()
        .zip(lead.iter())
        .zip(control.iter())
        .zip(gbar.iter())
    {
        *t -= mu * ((l - c) + g);
    }
}

pub fn step_discover(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<()> {
    step_discover_sharded(state, theta, std::slice::from_ref(grads), hp, spec)
}

pub fn step_discover_sharded(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    shards: &[BatchGradients],
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<()> {
    state.expect(Variant::Discover, "step_discover")?;
    discover_core(state, theta, shards, hp, spec).map(|_| ())
}

/// θ-step with the pre-step buffers, then the buffer recursions. Returns the
/// merged minibatch aggregate.
fn discover_core(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    shards: &[BatchGradients],
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<BatchGradients> {
    let alpha_n = hp.alpha_n_for(spec)?;
    let merged = merge_shards(shards)?;
    let mean = checked_mean(&merged, theta)?;
    let variant = state.variant;
    let buffers = state
        .clusters
        .as_mut()
        .ok_or_else(|| missing(variant, "find its cluster buffers"))?;
    let control = buffers.batch_control(&merged);
    apply_control_variate_step(theta, &mean, &control, &buffers.gbar, hp.mu);

    let deltas: Vec<_> = shards
        .iter()
        .map(|s| Some(ShardDelta::from_grads(s, buffers)))
        .collect();
    sync_buffers(buffers, &deltas, hp.alpha, &alpha_n)?;
    state.step += 1;
    Ok(merged)
}

pub fn step_discover_qhm(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<()> {
    step_discover_qhm_sharded(state, theta, std::slice::from_ref(grads), hp, spec)
}

/// Discover step followed by the ν-mix of each present cluster's buffer with
/// its fresh sub-batch mean; the mixed buffer is what the next step sees.
pub fn step_discover_qhm_sharded(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    shards: &[BatchGradients],
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<()> {
    state.expect(Variant::DiscoverQhm, "step_discover_qhm")?;
    let merged = discover_core(state, theta, shards, hp, spec)?;
    if hp.nu_mix != 1.0 {
        let buffers = state
            .clusters
            .as_mut()
            .ok_or_else(|| missing(Variant::DiscoverQhm, "find its cluster buffers"))?;
        for (n, part) in merged.iter() {
            buffers.buffers[n] = qhm_mix(&buffers.buffers[n], &part.mean(), hp.nu_mix);
        }
    }
    Ok(())
}

pub fn step_discover_igt(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<()> {
    step_discover_igt_sharded(state, theta, std::slice::from_ref(grads), hp, spec)
}

/// Tail-averaged transported gradient `v_t` replaces each sample gradient in
/// the control-variate step and in both buffer recursions.
pub fn step_discover_igt_sharded(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    shards: &[BatchGradients],
    hp: &HyperParams,
    spec: &ClusterSpec,
) -> Result<()> {
    state.expect(Variant::DiscoverIgt, "step_discover_igt")?;
    let alpha_n = hp.alpha_n_for(spec)?;
    let merged = merge_shards(shards)?;
    let mean = checked_mean(&merged, theta)?;
    let igt = state
        .igt
        .as_mut()
        .ok_or_else(|| missing(Variant::DiscoverIgt, "find its transport state"))?;
    let v = state
        .momentum
        .as_mut()
        .ok_or_else(|| missing(Variant::DiscoverIgt, "find its tail average"))?;
    update_tail_average(v, &mean, igt.gamma());
    let buffers = state
        .clusters
        .as_mut()
        .ok_or_else(|| missing(Variant::DiscoverIgt, "find its cluster buffers"))?;
    let control = buffers.batch_control(&merged);
    igt.advance(theta);
    apply_control_variate_step(theta, v, &control, &buffers.gbar, hp.mu);

    let deltas: Vec<_> = shards
        .iter()
        .map(|s| Some(ShardDelta::towards(v, s, buffers)))
        .collect();
    sync_buffers(buffers, &deltas, hp.alpha, &alpha_n)?;
    state.step += 1;
    Ok(())
}
