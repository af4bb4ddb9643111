//! Synthetic clustered objectives.
//!
//! Both families expose exact cluster-mean gradients `g_n(θ)`, which the
//! variance estimators in [`crate::metrics`] need. Only the quadratic family
//! has exactly known convexity constants and minimizer.

mod logistic;
mod quadratic;

pub use logistic::{
    noisy_label, softmax_ce_gradient, softmax_ce_loss, ClusterPolicy, ClusteredLogistic, Example,
    LogisticConfig,
};
pub use quadratic::{ClusteredQuadratic, QuadraticConfig};

use crate::cluster::{BatchItem, ClusterId, ClusterSpec, GradResponse, MiniBatch};
use crate::vector::ParamVector;

/// An objective `Σ_n p_n E_{x∼P_n} ℓ(θ; x)` with known cluster structure.
pub trait ClusteredProblem: Sync {
    fn dim(&self) -> usize;

    fn spec(&self) -> &ClusterSpec;

    /// Stochastic gradient of one drawn sample. All randomness is keyed by
    /// `(seed, item.sample)`, so the result does not depend on which worker
    /// evaluates it.
    fn sample_gradient(&self, item: &BatchItem, theta: &ParamVector, seed: u64) -> ParamVector;

    /// Exact `g_n(θ) = E g(θ, x^n)`.
    fn cluster_mean_gradient(&self, n: ClusterId, theta: &ParamVector) -> ParamVector;

    /// Exact objective value.
    fn loss(&self, theta: &ParamVector) -> f64;

    /// Exact in-cluster variance `Σ_n p_n E‖g(θ, x^n) − g_n(θ)‖²`.
    fn in_cluster_variance(&self, theta: &ParamVector) -> f64;

    fn minimizer(&self) -> Option<&ParamVector> {
        None
    }

    fn validation_accuracy(&self, _theta: &ParamVector) -> Option<f64> {
        None
    }

    fn initial_point(&self) -> ParamVector {
        ParamVector::zeros(self.dim())
    }

    /// Exact full gradient `Σ_n p_n g_n(θ)`.
    fn full_gradient(&self, theta: &ParamVector) -> ParamVector {
        let mut out = ParamVector::zeros(self.dim());
        for (n, p) in self.spec().probs().iter().enumerate() {
            out.axpy_in_place(*p, &self.cluster_mean_gradient(n, theta));
        }
        out
    }

    fn batch_gradients(&self, batch: &MiniBatch, theta: &ParamVector, seed: u64) -> GradResponse {
        GradResponse {
            grads: batch
                .items()
                .iter()
                .map(|it| (it.cluster, self.sample_gradient(it, theta, seed)))
                .collect(),
        }
    }
}

/// Maps a uniform 64-bit handle onto `0..len` without modulo bias.
pub(crate) fn handle_index(handle: u64, len: usize) -> usize {
    ((handle as u128 * len as u128) >> 64) as usize
}
