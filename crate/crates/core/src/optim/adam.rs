//! Adam with bias-corrected moments.

use super::{checked_mean, missing, HyperParams, OptimizerState, Variant};
use crate::cluster::BatchGradients;
use crate::error::Result;
use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: ParamVector,
    pub v: ParamVector,
}

pub fn step_adam(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
) -> Result<()> {
    state.expect(Variant::Adam, "step_adam")?;
    let g = checked_mean(grads, theta)?;
    let moments = state
        .adam
        .as_mut()
        .ok_or_else(|| missing(Variant::Adam, "find its moments"))?;
    let a = hp.adam;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - a.beta1.powi(t);
    let bc2 = 1.0 - a.beta2.powi(t);
    let m = moments.m.as_mut_slice();
    let v = moments.v.as_mut_slice();
    for (i, th) in theta.as_mut_slice().iter_mut().enumerate() {
        m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * g[i];
        v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *th -= hp.mu * m_hat / (v_hat.sqrt() + a.eps);
    }
    state.step += 1;
    Ok(())
}
