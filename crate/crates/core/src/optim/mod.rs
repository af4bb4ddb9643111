//! Optimizers behind one two-phase stepping interface.
//!
//! A step is: [`Optimizer::transport_point`] gives the point at which
//! gradients must be evaluated (it differs from the iterate only for the
//! gradient-transport variants), the caller evaluates and reduces the
//! gradients into a [`BatchGradients`], then [`Optimizer::step`] updates the
//! iterate and the optimizer buffers.
//!
//! The single-momentum baselines live in [`basic`], [`igt`] and [`adam`];
//! the multi-momentum family with one buffer per cluster lives in
//! [`discover`].

pub mod adam;
pub mod basic;
pub mod discover;
pub mod igt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{BatchGradients, ClusterSpec};
use crate::error::{Error, Result};
use crate::vector::ParamVector;

pub use adam::{step_adam, AdamMoments};
pub use basic::{step_momentum, step_qhm, step_sgd};
pub use discover::{
    gbar_drift, qhm_mix, step_discover, step_discover_igt, step_discover_qhm, sync_buffers,
    ClusterBuffers, ShardDelta,
};
pub use igt::{igt_reset_period, step_igt, transport_point, IgtState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sgd,
    Momentum,
    Qhm,
    Igt,
    Adam,
    Discover,
    DiscoverQhm,
    DiscoverIgt,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Sgd,
        Variant::Momentum,
        Variant::Qhm,
        Variant::Igt,
        Variant::Adam,
        Variant::Discover,
        Variant::DiscoverQhm,
        Variant::DiscoverIgt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sgd => "sgd",
            Variant::Momentum => "momentum",
            Variant::Qhm => "qhm",
            Variant::Igt => "igt",
            Variant::Adam => "adam",
            Variant::Discover => "discover",
            Variant::DiscoverQhm => "discover_qhm",
            Variant::DiscoverIgt => "discover_igt",
        }
    }

    pub fn is_discover(self) -> bool {
        matches!(
            self,
            Variant::Discover | Variant::DiscoverQhm | Variant::DiscoverIgt
        )
    }

    pub fn uses_transport(self) -> bool {
        matches!(self, Variant::Igt | Variant::DiscoverIgt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or(Error::InvalidHyperParam {
                name: "variant",
                reason: format!("unknown optimizer `{s}`"),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameters shared by all variants; each variant reads what it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Learning rate μ.
    pub mu: f64,
    /// Momentum coefficient β (Momentum, QHM, IGT velocity).
    pub beta: f64,
    /// QHM interpolation ν between buffer and fresh gradient.
    pub nu_mix: f64,
    /// Global control-variate rate α of the Discover family.
    pub alpha: f64,
    /// Per-cluster buffer rates. `None` means `α / p_n`.
    pub alpha_n: Option<Vec<f64>>,
    /// IGT anchor control; the tail average restarts every
    /// `ceil(T / tail_fraction)` steps.
    pub tail_fraction: Option<f64>,
    pub adam: AdamParams,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            mu: 0.01,
            beta: 0.9,
            nu_mix: 0.7,
            alpha: 0.1,
            alpha_n: None,
            tail_fraction: None,
            adam: AdamParams::default(),
        }
    }
}

impl HyperParams {
    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    /// Per-cluster rates, validated to lie in (0, 1].
    pub fn alpha_n_for(&self, spec: &ClusterSpec) -> Result<Vec<f64>> {
        let rates = match &self.alpha_n {
            Some(rates) => {
                if rates.len() != spec.n_clusters() {
                    return Err(Error::InvalidHyperParam {
                        name: "alpha_n",
                        reason: format!(
                            "expected {} rates, got {}",
                            spec.n_clusters(),
                            rates.len()
                        ),
                    });
                }
                rates.clone()
            }
            None => spec.probs().iter().map(|p| self.alpha / p).collect(),
        };
        if let Some((i, a)) = rates
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0 && **a <= 1.0))
        {
            return Err(Error::InvalidHyperParam {
                name: "alpha_n",
                reason: format!("alpha_n[{i}] = {a} is outside (0, 1]"),
            });
        }
        Ok(rates)
    }

    /// Range checks for the fields `variant` reads.
    pub fn validate(&self, variant: Variant, spec: &ClusterSpec) -> Result<()> {
        fn bad(name: &'static str, reason: String) -> Error {
            Error::InvalidHyperParam { name, reason }
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(bad("mu", format!("{} must be a finite non-negative rate", self.mu)));
        }
        if matches!(variant, Variant::Momentum | Variant::Qhm | Variant::Igt)
            && !(0.0..1.0).contains(&self.beta)
        {
            return Err(bad("beta", format!("{} is outside [0, 1)", self.beta)));
        }
        if matches!(variant, Variant::Qhm | Variant::DiscoverQhm)
            && !(0.0..=1.0).contains(&self.nu_mix)
        {
            return Err(bad("nu_mix", format!("{} is outside [0, 1]", self.nu_mix)));
        }
        if variant == Variant::Adam {
            let a = &self.adam;
            if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
                return Err(bad("adam", format!("{a:?} is not a valid Adam setting")));
            }
        }
        if variant.is_discover() {
            if !(self.alpha > 0.0 && self.alpha <= 1.0) {
                return Err(bad("alpha", format!("{} is outside (0, 1]", self.alpha)));
            }
            self.alpha_n_for(spec)?;
        }
        if let Some(tf) = self.tail_fraction {
            if !(tf.is_finite() && tf > 0.0) {
                return Err(bad("tail_fraction", format!("{tf} must be positive")));
            }
        }
        Ok(())
    }
}

/// Buffers of one optimizer; only the fields its variant uses are populated.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub variant: Variant,
    pub step: u64,
    /// Momentum buffer `v` (Momentum, QHM, IGT, Discover-IGT).
    pub momentum: Option<ParamVector>,
    pub igt: Option<IgtState>,
    pub adam: Option<AdamMoments>,
    pub clusters: Option<ClusterBuffers>,
}

impl OptimizerState {
    /// Zero-initialised state. `reset_period` is the IGT anchor period.
    pub fn new(variant: Variant, dim: usize, n_clusters: usize, reset_period: Option<u64>) -> Self {
        let zeros = || ParamVector::zeros(dim);
        let momentum = matches!(
            variant,
            Variant::Momentum | Variant::Qhm | Variant::Igt | Variant::DiscoverIgt
        )
        .then(zeros);
        let igt = variant.uses_transport().then(|| IgtState {
            velocity: (variant == Variant::Igt).then(zeros),
            theta_prev: zeros(),
            since_reset: 0,
            reset_period,
        });
        let adam = (variant == Variant::Adam).then(|| AdamMoments {
            m: zeros(),
            v: zeros(),
        });
        let clusters = variant
            .is_discover()
            .then(|| ClusterBuffers::zeros(n_clusters, dim));
        Self {
            variant,
            step: 0,
            momentum,
            igt,
            adam,
            clusters,
        }
    }

    pub(crate) fn expect(&self, variant: Variant, operation: &'static str) -> Result<()> {
        if self.variant == variant {
            Ok(())
        } else {
            Err(Error::WrongVariant {
                variant: self.variant.name(),
                operation,
            })
        }
    }

    /// The buffer that plays the role of the shared cluster-gradient
    /// estimate for single-momentum methods.
    pub fn shared_buffer(&self) -> Option<&ParamVector> {
        match self.variant {
            Variant::Momentum | Variant::Qhm | Variant::Igt => self.momentum.as_ref(),
            _ => None,
        }
    }
}

pub(crate) fn missing(variant: Variant, what: &'static str) -> Error {
    Error::WrongVariant {
        variant: variant.name(),
        operation: what,
    }
}

/// An optimizer variant bound to its hyperparameters and cluster layout.
#[derive(Debug, Clone)]
pub struct Optimizer {
    hp: HyperParams,
    spec: ClusterSpec,
    state: OptimizerState,
}

impl Optimizer {
    /// `total_steps` is only used to turn `tail_fraction` into a reset period.
    pub fn new(
        variant: Variant,
        hp: HyperParams,
        spec: ClusterSpec,
        dim: usize,
        total_steps: u64,
    ) -> Result<Self> {
        hp.validate(variant, &spec)?;
        let reset_period = hp
            .tail_fraction
            .map(|tf| igt_reset_period(total_steps, tf));
        let state = OptimizerState::new(variant, dim, spec.n_clusters(), reset_period);
        Ok(Self { hp, spec, state })
    }

    pub fn variant(&self) -> Variant {
        self.state.variant
    }

    pub fn hyper_params(&self) -> &HyperParams {
        &self.hp
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut OptimizerState {
        &mut self.state
    }

    pub fn transport_point(&self, theta: &ParamVector) -> ParamVector {
        transport_point(&self.state, theta)
    }

    /// One update with learning rate `lr` (overrides `hp.mu`).
    pub fn step(&mut self, theta: &mut ParamVector, grads: &BatchGradients, lr: f64) -> Result<()> {
        self.step_sharded(theta, std::slice::from_ref(grads), lr)
    }

    /// One update from per-shard partial aggregates.
    ///
    /// The minibatch aggregate is the shard partials merged in shard order.
    /// Discover-family buffers are synchronised from per-shard deltas through
    /// [`sync_buffers`].
    pub fn step_sharded(
        &mut self,
        theta: &mut ParamVector,
        shards: &[BatchGradients],
        lr: f64,
    ) -> Result<()> {
        let hp = self.hp.with_mu(lr);
        let merged = merge_shards(shards)?;
        match self.state.variant {
            Variant::Sgd => step_sgd(&mut self.state, theta, &merged, &hp),
            Variant::Momentum => step_momentum(&mut self.state, theta, &merged, &hp),
            Variant::Qhm => step_qhm(&mut self.state, theta, &merged, &hp),
            Variant::Igt => step_igt(&mut self.state, theta, &merged, &hp),
            Variant::Adam => step_adam(&mut self.state, theta, &merged, &hp),
            Variant::Discover => {
                discover::step_discover_sharded(&mut self.state, theta, shards, &hp, &self.spec)
            }
            Variant::DiscoverQhm => {
                discover::step_discover_qhm_sharded(&mut self.state, theta, shards, &hp, &self.spec)
            }
            Variant::DiscoverIgt => {
                discover::step_discover_igt_sharded(&mut self.state, theta, shards, &hp, &self.spec)
            }
        }
    }
}

/// Fixed-order pairwise tree reduction of shard partials.
pub fn merge_shards(shards: &[BatchGradients]) -> Result<BatchGradients> {
    match shards {
        [] => Err(Error::EmptyBatch),
        [one] => Ok(one.clone()),
        _ => {
            let mid = shards.len().div_ceil(2);
            let mut left = merge_shards(&shards[..mid])?;
            let right = merge_shards(&shards[mid..])?;
            left.merge(&right)?;
            Ok(left)
        }
    }
}

pub(crate) fn checked_mean(grads: &BatchGradients, theta: &ParamVector) -> Result<ParamVector> {
    if grads.dim() != theta.dim() {
        return Err(Error::DimensionMismatch {
            expected: theta.dim(),
            found: grads.dim(),
        });
    }
    let mean = grads.mean()?;
    mean.check_finite("gradient")?;
    Ok(mean)
}
