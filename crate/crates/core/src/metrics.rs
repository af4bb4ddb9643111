//! Variance and gradient-noise estimators.
//!
//! Between-cluster variance is measured at the next iterate `θ_{t+1}` in
//! place of the unknown optimum. Single-momentum methods (Momentum, QHM,
//! IGT) are measured with their one buffer standing in for every cluster
//! buffer. Adam has no such decomposition and reports `None`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{BatchItem, ClusterSpec};
use crate::error::{Error, Result};
use crate::optim::{OptimizerState, Variant};
use crate::problems::ClusteredProblem;
use crate::rng::{Purpose, RngStream};
use crate::vector::ParamVector;

/// Steps per window when averaging per-step reports for plotting.
pub const DEFAULT_WINDOW: u64 = 100;

const MC_CHUNKS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub step: u64,
    pub in_cluster: f64,
    pub between_cluster: f64,
    pub noise_mean_norm: f64,
    pub msd: f64,
    pub gbar_drift: f64,
}

impl VarianceReport {
    pub fn is_valid(&self) -> bool {
        [
            self.in_cluster,
            self.between_cluster,
            self.noise_mean_norm,
            self.msd,
            self.gbar_drift,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// `Σ_n p_n ‖g_n(θ)‖²`
pub fn between_var_sgd<P: ClusteredProblem + ?Sized>(problem: &P, theta_next: &ParamVector) -> f64 {
    problem
        .spec()
        .probs()
        .iter()
        .enumerate()
        .map(|(n, p)| p * problem.cluster_mean_gradient(n, theta_next).norm_sq())
        .sum()
}

/// `(2/|B|)·Σ_n p_n ‖g^(n) − g_n(θ)‖²`, with `buffer(n)` supplying `g^(n)`.
pub fn between_var_buffers<P, F>(
    problem: &P,
    buffer: F,
    theta_next: &ParamVector,
    batch_size: usize,
) -> f64
where
    P: ClusteredProblem + ?Sized,
    F: Fn(usize) -> ParamVector,
{
    let total: f64 = problem
        .spec()
        .probs()
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let g = problem.cluster_mean_gradient(n, theta_next);
            p * buffer(n).dist_sq(&g)
        })
        .sum();
    2.0 * total / batch_size as f64
}

/// Between-cluster term of the control-variate noise bound for any state
/// that carries a gradient buffer; `None` for SGD and Adam.
pub fn between_var_discover<P: ClusteredProblem + ?Sized>(
    problem: &P,
    state: &OptimizerState,
    theta_next: &ParamVector,
    batch_size: usize,
) -> Option<f64> {
    if let Some(c) = &state.clusters {
        return Some(between_var_buffers(
            problem,
            |n| c.buffers[n].clone(),
            theta_next,
            batch_size,
        ));
    }
    state
        .shared_buffer()
        .map(|v| between_var_buffers(problem, |_| v.clone(), theta_next, batch_size))
}

/// The between-cluster quantity logged for each variant: the plain value
/// for SGD, the buffer form for every buffered method, nothing for Adam.
pub fn between_var<P: ClusteredProblem + ?Sized>(
    problem: &P,
    state: &OptimizerState,
    theta_next: &ParamVector,
    batch_size: usize,
) -> Option<f64> {
    match state.variant {
        Variant::Sgd => Some(between_var_sgd(problem, theta_next)),
        Variant::Adam => None,
        _ => between_var_discover(problem, state, theta_next, batch_size),
    }
}

/// `Σ_n p_n σ_n²` at `θ` from exact quantities:
/// `2·Σ_n p_n (‖g_n(θ)‖² + E‖g(θ, x^n) − g_n(θ)‖²)`.
pub fn sigma_in_sq_at<P: ClusteredProblem + ?Sized>(problem: &P, theta: &ParamVector) -> f64 {
    2.0 * (between_var_sgd(problem, theta) + problem.in_cluster_variance(theta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InClusterVar {
    pub estimate: f64,
    pub std_error: f64,
    pub closed_form: f64,
}

/// Monte-Carlo estimate of `Σ_n p_n·2E‖g(x^n, θ)‖²`, stratified with
/// `n_samples` draws per cluster.
pub fn in_cluster_var<P: ClusteredProblem + ?Sized>(
    problem: &P,
    theta: &ParamVector,
    n_samples: usize,
    seed: u64,
) -> Result<InClusterVar> {
    if n_samples < 1000 {
        return Err(Error::InvalidHyperParam {
            name: "n_samples",
            reason: format!("{n_samples} is below the minimum of 1000"),
        });
    }
    let spec = problem.spec();
    let per_cluster: Vec<(f64, f64)> = (0..spec.n_clusters())
        .into_par_iter()
        .map(|n| {
            let mut rng = RngStream::for_purpose(seed, Purpose::Probe)
                .substream(n as u64)
                .rng();
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n_samples {
                let item = BatchItem {
                    cluster: n,
                    sample: rng.random(),
                };
                let v = problem.sample_gradient(&item, theta, seed).norm_sq();
                s += v;
                s2 += v * v;
            }
            let m = n_samples as f64;
            let mean = s / m;
            (mean, (s2 / m - mean * mean).max(0.0) / m)
        })
        .collect();
    let mut estimate = 0.0;
    let mut var = 0.0;
    for ((mean, var_of_mean), p) in per_cluster.iter().zip(spec.probs()) {
        estimate += 2.0 * p * mean;
        var += 4.0 * p * p * var_of_mean;
    }
    Ok(InClusterVar {
        estimate,
        std_error: var.sqrt(),
        closed_form: sigma_in_sq_at(problem, theta),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMoments {
    /// Monte-Carlo mean of the noise vector.
    pub mean: ParamVector,
    pub mean_norm: f64,
    /// Monte-Carlo `E‖noise‖²`.
    pub second_moment: f64,
    /// `sqrt(tr Cov / n_batches)`, the standard error scale of `mean_norm`.
    pub std_error: f64,
}

struct Accum {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    norm_sq: f64,
}

/// Gradient noise of a frozen state over `n_batches` fresh batches whose
/// samples draw their cluster i.i.d. from `p_n`.
///
/// Buffered Discover-family states yield
/// `u = (1/|B|)Σ_i (g_i − g^(n_i)) + ḡ − g(θ)`; every other variant yields the
/// plain minibatch noise `s = (1/|B|)Σ_i g_i − g(θ)`.
pub fn noise_moments<P: ClusteredProblem + ?Sized>(
    problem: &P,
    state: &OptimizerState,
    theta: &ParamVector,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<NoiseMoments> {
    if batch_size == 0 || n_batches < 2 {
        return Err(Error::InvalidHyperParam {
            name: "n_batches",
            reason: "need a non-empty batch and at least two batches".into(),
        });
    }
    let dim = problem.dim();
    let spec: &ClusterSpec = problem.spec();
    let full = problem.full_gradient(theta);
    let mut offset = full.scaled(-1.0);
    if let Some(c) = &state.clusters {
        offset.axpy_in_place(1.0, &c.gbar);
    }
    let chunks = MC_CHUNKS.min(n_batches as u64);
    let parts: Vec<Accum> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let lo = n_batches as u64 * chunk / chunks;
            let hi = n_batches as u64 * (chunk + 1) / chunks;
            let mut rng = RngStream::for_purpose(seed, Purpose::Probe)
                .substream(chunk)
                .rng();
            let mut acc = Accum {
                sum: vec![0.0; dim],
                sum_sq: vec![0.0; dim],
                norm_sq: 0.0,
            };
            let mut u = ParamVector::zeros(dim);
            let scale = 1.0 / batch_size as f64;
            for _ in lo..hi {
                u.as_mut_slice().copy_from_slice(offset.as_slice());
                for _ in 0..batch_size {
                    let item = BatchItem {
                        cluster: spec.sample(&mut rng),
                        sample: rng.random(),
                    };
                    let g = problem.sample_gradient(&item, theta, seed);
                    u.axpy_in_place(scale, &g);
                    if let Some(c) = &state.clusters {
                        u.axpy_in_place(-scale, &c.buffers[item.cluster]);
                    }
                }
                for ((s, s2), x) in acc.sum.iter_mut().zip(&mut acc.sum_sq).zip(u.iter()) {
                    *s += x;
                    *s2 += x * x;
                }
                acc.norm_sq += u.norm_sq();
            }
            acc
        })
        .collect();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut norm_sq = 0.0;
    for part in &parts {
        for (a, b) in sum.iter_mut().zip(&part.sum) {
            *a += b;
        }
        for (a, b) in sum_sq.iter_mut().zip(&part.sum_sq) {
            *a += b;
        }
        norm_sq += part.norm_sq;
    }
    let m = n_batches as f64;
    let mean = ParamVector::from_vec(sum.iter().map(|s| s / m).collect());
    let trace_cov: f64 = sum_sq
        .iter()
        .zip(mean.iter())
        .map(|(s2, mu)| (s2 / m - mu * mu).max(0.0))
        .sum::<f64>()
        * m
        / (m - 1.0);
    Ok(NoiseMoments {
        mean_norm: mean.norm(),
        mean,
        second_moment: norm_sq / m,
        std_error: (trace_cov / m).sqrt(),
    })
}

/// Mean of `(step, value)` pairs per window of `window` steps, keyed by the
/// window's first step. Windows without samples are skipped.
pub fn window_means(points: &[(u64, f64)], window: u64) -> Vec<(u64, f64)> {
    let window = window.max(1);
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for &(step, value) in points {
        let start = step / window * window;
        match out.last_mut() {
            Some(last) if last.0 == start => {
                last.1 += value;
                last.2 += 1;
            }
            _ => out.push((start, value, 1)),
        }
    }
    out.into_iter()
        .map(|(s, v, c)| (s, v / c as f64))
        .collect()
}
