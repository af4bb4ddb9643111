//! Implicit gradient transport.
//!
//! The tail average `v` weights the newest gradient by `1 − γ_t` with
//! `γ_t = t/(t+1)`, `t` counted from the last anchor reset. Gradients are
//! evaluated at the extrapolated point `θ_t + t·(θ_t − θ_{t−1})`
//! (`γ/(1−γ) = t`).

use super::{checked_mean, missing, HyperParams, OptimizerState, Variant};
use crate::cluster::BatchGradients;
use crate::error::Result;
use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct IgtState {
    /// Heavy-ball velocity `w`; absent for Discover-IGT.
    pub velocity: Option<ParamVector>,
    pub theta_prev: ParamVector,
    /// Steps since the last anchor reset.
    pub since_reset: u64,
    pub reset_period: Option<u64>,
}

impl IgtState {
    pub fn gamma(&self) -> f64 {
        let t = self.since_reset as f64;
        t / (t + 1.0)
    }

    pub(crate) fn advance(&mut self, theta: &ParamVector) {
        self.theta_prev.clone_from(theta);
        self.since_reset += 1;
        if self.reset_period == Some(self.since_reset) {
            self.since_reset = 0;
        }
    }
}

/// Anchor reset period for a run of `total_steps` steps.
pub fn igt_reset_period(total_steps: u64, tail_fraction: f64) -> u64 {
    ((total_steps as f64 / tail_fraction).ceil() as u64).max(1)
}

/// Gradient-evaluation point; the iterate itself for non-transport variants.
pub fn transport_point(state: &OptimizerState, theta: &ParamVector) -> ParamVector {
    match &state.igt {
        Some(igt) if igt.since_reset > 0 => {
            let ratio = igt.since_reset as f64;
            let mut point = theta.clone();
            for ((p, t), prev) in point
                .as_mut_slice()
                .iter_mut()
                .zip(theta.iter())
                .zip(igt.theta_prev.iter())
            {
                *p += ratio * (t - prev);
            }
            point
        }
        _ => theta.clone(),
    }
}

/// Folds the transported minibatch gradient into the tail average.
pub(crate) fn update_tail_average(v: &mut ParamVector, mean: &ParamVector, gamma: f64) {
    for (vi, gi) in v.as_mut_slice().iter_mut().zip(mean.iter()) {
        *vi = gamma * *vi + (1.0 - gamma) * gi;
    }
}

/// `grads` must have been evaluated at [`transport_point`].
pub fn step_igt(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
) -> Result<()> {
    state.expect(Variant::Igt, "step_igt")?;
    let mean = checked_mean(grads, theta)?;
    let igt = state
        .igt
        .as_mut()
        .ok_or_else(|| missing(Variant::Igt, "find its transport state"))?;
    let v = state
        .momentum
        .as_mut()
        .ok_or_else(|| missing(Variant::Igt, "find its tail average"))?;
    update_tail_average(v, &mean, igt.gamma());
    let mut w = igt
        .velocity
        .take()
        .ok_or_else(|| missing(Variant::Igt, "find its velocity"))?;
    for (wi, vi) in w.as_mut_slice().iter_mut().zip(v.iter()) {
        *wi = hp.beta * *wi - hp.mu * vi;
    }
    igt.advance(theta);
    theta.axpy_in_place(1.0, &w);
    igt.velocity = Some(w);
    state.step += 1;
    Ok(())
}
