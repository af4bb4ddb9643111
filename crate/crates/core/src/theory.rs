//! Convergence constants, step-size window and bound certification.
//!
//! Constants are exact only for the quadratic family. Other problems get
//! [`Error::Unavailable`] rather than heuristic estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::problems::{ClusteredProblem, ClusteredQuadratic};
use crate::vector::ParamVector;

/// Seeds required before a bound verification may claim a pass.
pub const MIN_VERIFY_SEEDS: usize = 50;
/// Largest tolerated fraction of steps above the bound.
pub const MAX_VIOLATION_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexityConstants {
    pub nu: f64,
    pub delta: f64,
    pub sigma_in_sq: f64,
    /// `4δ²`
    pub c1: f64,
    /// `Σ_n p_n σ_n²`
    pub c2: f64,
    /// `Σ_n p_n ‖g_n(θ*)‖²`
    pub g0: f64,
    pub p_min: f64,
}

pub fn compute_constants(problem: &ClusteredQuadratic) -> Result<ConvexityConstants> {
    let (nu, delta) = problem.curvature_bounds();
    if nu <= 0.0 || !nu.is_finite() {
        return Err(Error::NotSpd(format!("smallest curvature {nu} is not positive")));
    }
    let sigma_in_sq = problem.sigma_in_sq();
    Ok(ConvexityConstants {
        nu,
        delta,
        sigma_in_sq,
        c1: 4.0 * delta * delta,
        c2: sigma_in_sq,
        g0: problem.between_cluster_variance(),
        p_min: problem.spec().p_min(),
    })
}

/// `min{ν|B|/(3δ²(|B|+5)), α/(6ν)}`, defined for `α ∈ (0, p_min)`.
pub fn step_size_window(c: &ConvexityConstants, batch_size: usize, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < c.p_min) {
        return Err(Error::InvalidHyperParam {
            name: "alpha",
            reason: format!("{alpha} must lie in (0, p_min = {})", c.p_min),
        });
    }
    if batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let b = batch_size as f64;
    let first = c.nu * b / (3.0 * c.delta * c.delta * (b + 5.0));
    let second = alpha / (6.0 * c.nu);
    Ok(first.min(second))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremBound {
    pub mu_max: f64,
    /// `3μ²/(α|B|)`
    pub gamma: f64,
    /// `1 − μν`
    pub q: f64,
    /// Bound on the mean squared distance for `t = 0..=T`.
    pub bound_curve: Vec<f64>,
    /// `4μσ_in²/(ν|B|)`
    pub steady_state: f64,
}

pub fn theorem_bound_curve(
    c: &ConvexityConstants,
    mu: f64,
    alpha: f64,
    batch_size: usize,
    msd0: f64,
    total_steps: usize,
) -> Result<TheoremBound> {
    let mu_max = step_size_window(c, batch_size, alpha)?;
    if !(mu > 0.0) || mu > mu_max {
        return Err(Error::OutOfRegime { mu, mu_max });
    }
    let b = batch_size as f64;
    let gamma = 3.0 * mu * mu / (alpha * b);
    let q = 1.0 - mu * c.nu;
    let steady_state = 4.0 * mu * c.sigma_in_sq / (c.nu * b);
    let head = msd0 + gamma * c.g0;
    let mut bound_curve = Vec::with_capacity(total_steps + 1);
    let mut qt = 1.0;
    for _ in 0..=total_steps {
        bound_curve.push(qt * head + steady_state);
        qt *= q;
    }
    Ok(TheoremBound {
        mu_max,
        gamma,
        q,
        bound_curve,
        steady_state,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n_seeds: usize,
    pub n_steps: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    /// Set when the configuration lies outside the step-size window.
    pub out_of_regime: bool,
    /// `None` when no claim is made (out of regime or too few seeds).
    pub passed: Option<bool>,
}

impl BoundReport {
    fn gated() -> Self {
        Self {
            n_seeds: 0,
            n_steps: 0,
            violations: 0,
            violation_fraction: 0.0,
            out_of_regime: true,
            passed: None,
        }
    }
}

/// Mean over seeds at every step; trajectories are truncated to the
/// shortest one.
pub fn seed_average(trajectories: &[Vec<f64>]) -> Vec<f64> {
    let len = trajectories.iter().map(Vec::len).min().unwrap_or(0);
    let s = trajectories.len() as f64;
    (0..len)
        .map(|t| trajectories.iter().map(|tr| tr[t]).sum::<f64>() / s)
        .collect()
}

/// Compares the seed-averaged MSD against the bound at every step.
pub fn verify_bound(trajectories: &[Vec<f64>], bound: &TheoremBound) -> BoundReport {
    let mean = seed_average(trajectories);
    let n_steps = mean.len().min(bound.bound_curve.len());
    let violations = mean
        .iter()
        .zip(&bound.bound_curve)
        .filter(|(m, b)| !(*m <= *b))
        .count();
    let violation_fraction = if n_steps == 0 {
        0.0
    } else {
        violations as f64 / n_steps as f64
    };
    let passed = (trajectories.len() >= MIN_VERIFY_SEEDS && n_steps > 0)
        .then_some(violation_fraction <= MAX_VIOLATION_FRACTION);
    BoundReport {
        n_seeds: trajectories.len(),
        n_steps,
        violations,
        violation_fraction,
        out_of_regime: false,
        passed,
    }
}

/// Builds the bound and verifies it, or returns an out-of-regime report
/// when `μ` exceeds the window.
pub fn certify(
    trajectories: &[Vec<f64>],
    c: &ConvexityConstants,
    mu: f64,
    alpha: f64,
    batch_size: usize,
) -> Result<(Option<TheoremBound>, BoundReport)> {
    let msd0 = seed_average(trajectories).first().copied().unwrap_or(0.0);
    let steps = trajectories.iter().map(Vec::len).min().unwrap_or(1).max(1) - 1;
    match theorem_bound_curve(c, mu, alpha, batch_size, msd0, steps) {
        Ok(bound) => {
            let report = verify_bound(trajectories, &bound);
            Ok((Some(bound), report))
        }
        Err(Error::OutOfRegime { .. }) => Ok((None, BoundReport::gated())),
        Err(e) => Err(e),
    }
}

/// `G_t = Σ_n p_n ‖g^(n)_t − g_n(θ*)‖²` for a Discover-family state.
pub fn track_gt<P: ClusteredProblem + ?Sized>(problem: &P, state: &OptimizerState) -> Result<f64> {
    let opt = problem.minimizer().ok_or(Error::Unavailable("exact minimizer"))?;
    let buffers = state.clusters.as_ref().ok_or(Error::WrongVariant {
        variant: state.variant.name(),
        operation: "track G_t",
    })?;
    Ok(problem
        .spec()
        .probs()
        .iter()
        .enumerate()
        .map(|(n, p)| p * buffers.buffers[n].dist_sq(&problem.cluster_mean_gradient(n, opt)))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionReport {
    pub n_steps: usize,
    pub violations: usize,
    pub violation_fraction: f64,
}

/// Checks `G_{t+1} ≤ (1−α)G_t + 3αδ²·MSD_t + αC_2` on seed-averaged series.
pub fn check_gt_recursion(
    gt: &[f64],
    msd: &[f64],
    c: &ConvexityConstants,
    alpha: f64,
) -> RecursionReport {
    let n = gt.len().min(msd.len()).saturating_sub(1);
    let violations = (0..n)
        .filter(|&t| {
            let rhs = (1.0 - alpha) * gt[t] + 3.0 * alpha * c.delta * c.delta * msd[t] + alpha * c.c2;
            !(gt[t + 1] <= rhs)
        })
        .count();
    RecursionReport {
        n_steps: n,
        violations,
        violation_fraction: if n == 0 { 0.0 } else { violations as f64 / n as f64 },
    }
}

/// Right-hand side of the control-variate noise bound at `θ`:
/// `(C_1‖θ−θ*‖² + C_2)/|B| + (2/|B|)·Σ_n p_n‖g^(n) − g_n(θ*)‖²`.
pub fn noise_second_moment_bound(
    problem: &ClusteredQuadratic,
    c: &ConvexityConstants,
    state: &OptimizerState,
    theta: &ParamVector,
    batch_size: usize,
) -> Result<f64> {
    let opt = problem.minimizer().ok_or(Error::Unavailable("exact minimizer"))?;
    let b = batch_size as f64;
    let gt = track_gt(problem, state)?;
    Ok((c.c1 * theta.dist_sq(opt) + c.c2) / b + 2.0 * gt / b)
}
