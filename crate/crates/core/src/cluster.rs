//! Cluster specifications, minibatches and per-cluster gradient aggregates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParamVector;

pub type ClusterId = usize;

const PROB_SUM_TOL: f64 = 1e-12;

/// Cluster count and sampling probabilities `p_n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSpec {
    probs: Vec<f64>,
    p_min: f64,
}

impl ClusterSpec {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidProbs("at least one cluster is required".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p <= 0.0)
        {
            return Err(Error::InvalidProbs(format!("p[{i}] = {p} is not positive")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidProbs(format!("probabilities sum to {total}, not 1")));
        }
        let p_min = probs.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { probs, p_min })
    }

    pub fn uniform(n_clusters: usize) -> Result<Self> {
        if n_clusters == 0 {
            return Err(Error::InvalidProbs("at least one cluster is required".into()));
        }
        let p = 1.0 / n_clusters as f64;
        let mut probs = vec![p; n_clusters];
        // absorb rounding in the last entry so the sum is exactly representable
        let head: f64 = probs[..n_clusters - 1].iter().sum();
        probs[n_clusters - 1] = 1.0 - head;
        Self::new(probs)
    }

    /// Probabilities from cluster sizes, `p_n = count_n / total`.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::InvalidProbs("all clusters are empty".into()));
        }
        Self::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
    }

    pub fn n_clusters(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, n: ClusterId) -> f64 {
        self.probs[n]
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    /// Draws a cluster id with probability `p_n`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ClusterId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (n, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return n;
            }
        }
        self.probs.len() - 1
    }

    pub fn check_id(&self, id: ClusterId) -> Result<()> {
        if id < self.n_clusters() {
            Ok(())
        } else {
            Err(Error::ClusterOutOfRange {
                id,
                n_clusters: self.n_clusters(),
            })
        }
    }
}

impl<'de> Deserialize<'de> for ClusterSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let probs = Vec::<f64>::deserialize(d)?;
        ClusterSpec::new(probs).map_err(serde::de::Error::custom)
    }
}

/// One drawn example: its cluster and an opaque sample handle.
///
/// The handle is a uniformly random 64-bit value drawn by the batch composer;
/// problems map it to a concrete example and use it to key per-presentation
/// randomness (gradient noise, label flips).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchItem {
    pub cluster: ClusterId,
    pub sample: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    items: Vec<BatchItem>,
}

impl MiniBatch {
    pub fn new(items: Vec<BatchItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[BatchItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sorted set `C` of clusters present in the batch.
    pub fn cluster_set(&self) -> Vec<ClusterId> {
        let mut ids: Vec<_> = self.items.iter().map(|it| it.cluster).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Splits a batch into its per-cluster sub-batches `B_t^n`.
pub fn partition_batch(
    batch: &MiniBatch,
    spec: &ClusterSpec,
) -> Result<BTreeMap<ClusterId, Vec<BatchItem>>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut parts: BTreeMap<ClusterId, Vec<BatchItem>> = BTreeMap::new();
    for item in batch.items() {
        spec.check_id(item.cluster)?;
        parts.entry(item.cluster).or_default().push(*item);
    }
    Ok(parts)
}

/// Per-sample gradients for a requested batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResponse {
    pub grads: Vec<(ClusterId, ParamVector)>,
}

/// Sum and count of the gradients of one sub-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSum {
    pub count: usize,
    pub sum: ParamVector,
}

impl ClusterSum {
    pub fn mean(&self) -> ParamVector {
        self.sum.scaled(1.0 / self.count as f64)
    }
}

/// Minibatch gradients reduced per cluster.
///
/// Every optimizer consumes this form: the minibatch mean, the per-cluster
/// sub-batch means and the sub-batch sizes are all it needs. Partial
/// aggregates from shards are merged with [`BatchGradients::merge`] in a fixed
/// shard order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    dim: usize,
    n_clusters: usize,
    clusters: BTreeMap<ClusterId, ClusterSum>,
}

impl BatchGradients {
    pub fn empty(dim: usize, n_clusters: usize) -> Self {
        Self {
            dim,
            n_clusters,
            clusters: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, cluster: ClusterId, grad: &ParamVector) -> Result<()> {
        if cluster >= self.n_clusters {
            return Err(Error::ClusterOutOfRange {
                id: cluster,
                n_clusters: self.n_clusters,
            });
        }
        if grad.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: grad.dim(),
            });
        }
        grad.check_finite("gradient")?;
        let entry = self.clusters.entry(cluster).or_insert_with(|| ClusterSum {
            count: 0,
            sum: ParamVector::zeros(self.dim),
        });
        entry.count += 1;
        entry.sum.axpy_in_place(1.0, grad);
        Ok(())
    }

    pub fn from_response(resp: &GradResponse, dim: usize, spec: &ClusterSpec) -> Result<Self> {
        let mut out = Self::empty(dim, spec.n_clusters());
        for (cluster, g) in &resp.grads {
            out.push(*cluster, g)?;
        }
        Ok(out)
    }

    /// Adds another partial aggregate into this one.
    pub fn merge(&mut self, other: &BatchGradients) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        for (&n, part) in &other.clusters {
            match self.clusters.get_mut(&n) {
                Some(entry) => {
                    entry.count += part.count;
                    entry.sum.axpy_in_place(1.0, &part.sum);
                }
                None => {
                    self.clusters.insert(n, part.clone());
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// Total number of samples `|B_t|`.
    pub fn batch_size(&self) -> usize {
        self.clusters.values().map(|c| c.count).sum()
    }

    pub fn cluster(&self, n: ClusterId) -> Option<&ClusterSum> {
        self.clusters.get(&n)
    }

    /// Present clusters in id order.
    pub fn iter(&self) -> impl Iterator<Item = (ClusterId, &ClusterSum)> {
        self.clusters.iter().map(|(&n, c)| (n, c))
    }

    pub fn present(&self) -> Vec<ClusterId> {
        self.clusters.keys().copied().collect()
    }

    /// Minibatch mean gradient; sums are accumulated in cluster-id order.
    pub fn mean(&self) -> Result<ParamVector> {
        let size = self.batch_size();
        if size == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut total = ParamVector::zeros(self.dim);
        for c in self.clusters.values() {
            total.axpy_in_place(1.0, &c.sum);
        }
        total.scale_in_place(1.0 / size as f64);
        Ok(total)
    }
}
