//! SGD, heavy-ball momentum and quasi-hyperbolic momentum.

use super::{checked_mean, missing, HyperParams, OptimizerState, Variant};
use crate::cluster::BatchGradients;
use crate::error::Result;
use crate::vector::ParamVector;

/// `θ ← θ − μ·mean(g)`
pub fn step_sgd(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
) -> Result<()> {
    state.expect(Variant::Sgd, "step_sgd")?;
    let mean = checked_mean(grads, theta)?;
    theta.axpy_in_place(-hp.mu, &mean);
    state.step += 1;
    Ok(())
}

fn update_buffer(v: &mut ParamVector, mean: &ParamVector, beta: f64) {
    for (vi, gi) in v.as_mut_slice().iter_mut().zip(mean.iter()) {
        *vi = beta * *vi + (1.0 - beta) * gi;
    }
}

/// `v ← βv + (1−β)·mean(g)`, `θ ← θ − μv`
pub fn step_momentum(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
) -> Result<()> {
    state.expect(Variant::Momentum, "step_momentum")?;
    let mean = checked_mean(grads, theta)?;
    let v = state
        .momentum
        .as_mut()
        .ok_or_else(|| missing(Variant::Momentum, "find its momentum buffer"))?;
    update_buffer(v, &mean, hp.beta);
    theta.axpy_in_place(-hp.mu, v);
    state.step += 1;
    Ok(())
}

/// Momentum buffer as above; the step mixes buffer and fresh gradient,
/// `θ ← θ − μ[νv + (1−ν)·mean(g)]`.
pub fn step_qhm(
    state: &mut OptimizerState,
    theta: &mut ParamVector,
    grads: &BatchGradients,
    hp: &HyperParams,
) -> Result<()> {
    state.expect(Variant::Qhm, "step_qhm")?;
    let mean = checked_mean(grads, theta)?;
    let v = state
        .momentum
        .as_mut()
        .ok_or_else(|| missing(Variant::Qhm, "find its momentum buffer"))?;
    update_buffer(v, &mean, hp.beta);
    let nu = hp.nu_mix;
    for ((t, vi), gi) in theta.as_mut_slice().iter_mut().zip(v.iter()).zip(mean.iter()) {
        *t -= hp.mu * (nu * vi + (1.0 - nu) * gi);
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterSpec;

    fn grads(values: &[f64]) -> BatchGradients {
        let mut g = BatchGradients::empty(1, 1);
        for &v in values {
            g.push(0, &ParamVector::from_vec(vec![v])).unwrap();
        }
        g
    }

    fn hp(mu: f64, beta: f64, nu: f64) -> HyperParams {
        HyperParams {
            mu,
            beta,
            nu_mix: nu,
            ..HyperParams::default()
        }
    }

    #[test]
    fn sgd_examples() {
        let mut s = OptimizerState::new(Variant::Sgd, 1, 1, None);
        let mut theta = ParamVector::from_vec(vec![1.0]);
        step_sgd(&mut s, &mut theta, &grads(&[0.0]), &hp(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(theta[0], 1.0);
        step_sgd(&mut s, &mut theta, &grads(&[2.0]), &hp(0.1, 0.0, 0.0)).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);
        let mut theta = ParamVector::from_vec(vec![1.0]);
        step_sgd(&mut s, &mut theta, &grads(&[2.0, 0.0]), &hp(0.1, 0.0, 0.0)).unwrap();
        assert!((theta[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn sgd_rejects_non_finite_and_wrong_state() {
        let mut s = OptimizerState::new(Variant::Momentum, 1, 1, None);
        let mut theta = ParamVector::from_vec(vec![1.0]);
        assert!(step_sgd(&mut s, &mut theta, &grads(&[1.0]), &hp(0.1, 0.0, 0.0)).is_err());
        let mut bad = BatchGradients::empty(1, 1);
        assert!(bad.push(0, &ParamVector::from_vec(vec![f64::NAN])).is_err());
        let spec = ClusterSpec::uniform(1).unwrap();
        let _ = spec;
    }

    #[test]
    fn momentum_first_step() {
        let mut s = OptimizerState::new(Variant::Momentum, 1, 1, None);
        let mut theta = ParamVector::from_vec(vec![0.0]);
        step_momentum(&mut s, &mut theta, &grads(&[1.0]), &hp(1.0, 0.9, 0.0)).unwrap();
        assert!((s.momentum.as_ref().unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((theta[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_zero_gradients_keep_theta() {
        let mut s = OptimizerState::new(Variant::Momentum, 1, 1, None);
        let mut theta = ParamVector::from_vec(vec![3.0]);
        for _ in 0..10 {
            step_momentum(&mut s, &mut theta, &grads(&[0.0]), &hp(0.5, 0.9, 0.0)).unwrap();
        }
        assert_eq!(theta[0], 3.0);
        assert_eq!(s.momentum.as_ref().unwrap()[0], 0.0);
    }

    #[test]
    fn qhm_first_step() {
        let mut s = OptimizerState::new(Variant::Qhm, 1, 1, None);
        let mut theta = ParamVector::from_vec(vec![0.0]);
        step_qhm(&mut s, &mut theta, &grads(&[1.0]), &hp(0.1, 0.9, 0.7)).unwrap();
        assert!((s.momentum.as_ref().unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((theta[0] + 0.037).abs() < 1e-15);
    }
}
