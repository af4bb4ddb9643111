//! Softmax regression on Gaussian classes with per-presentation label noise.
//!
//! A finite training set is generated once. Every example carries its true
//! class, one of `n_transforms` fixed affine input perturbations, and a
//! cluster id chosen by a [`ClusterPolicy`]. Each time an example is drawn
//! its label is flipped with probability `flip_prob` to a uniformly chosen
//! other class, independently of previous presentations.
//!
//! Parameters are laid out as `K` blocks of `feature_dim + 1` values
//! (weights, then bias).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{handle_index, ClusteredProblem};
use crate::cluster::{BatchItem, ClusterId, ClusterSpec};
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream, StreamRng};
use crate::vector::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterPolicy {
    /// Cluster = true class.
    Classes,
    /// Cluster = index of the input perturbation applied to the example.
    Transforms,
    /// Cluster drawn uniformly once per example at generation time.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Scale of the class means `m_k ∼ class_sep·N(0, I)`.
    pub class_sep: f64,
    pub feature_std: f64,
    pub flip_prob: f64,
    pub policy: ClusterPolicy,
    pub n_transforms: usize,
    /// Scale of the per-transform input shift.
    pub transform_shift: f64,
    /// Log-range of the per-transform input scaling.
    pub transform_scale: f64,
    /// Cluster count for [`ClusterPolicy::Random`]; defaults to `n_classes`.
    pub n_random_clusters: Option<usize>,
    /// Standard deviation of the Gaussian starting weights; 0 starts at zero.
    pub init_scale: f64,
    pub instance_seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            n_classes: 10,
            feature_dim: 10,
            n_train: 2000,
            n_val: 2000,
            class_sep: 1.0,
            feature_std: 1.0,
            flip_prob: 0.0,
            policy: ClusterPolicy::Classes,
            n_transforms: 3,
            transform_shift: 1.0,
            transform_scale: 0.2,
            n_random_clusters: None,
            init_scale: 0.0,
            instance_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub transform: usize,
    pub cluster: ClusterId,
}

#[derive(Debug, Clone, PartialEq)]
struct Transform {
    scale: f64,
    shift: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ClusteredLogistic {
    n_classes: usize,
    feature_dim: usize,
    flip_prob: f64,
    feature_std: f64,
    class_means: Vec<Vec<f64>>,
    transforms: Vec<Transform>,
    train: Vec<Example>,
    val: Vec<Example>,
    members: Vec<Vec<usize>>,
    spec: ClusterSpec,
    init: ParamVector,
}

/// Returns `label` with probability `1 − p`, otherwise a uniformly drawn
/// different class.
pub fn noisy_label(label: usize, p: f64, n_classes: usize, rng: &mut StreamRng) -> usize {
    if n_classes < 2 || p <= 0.0 || rng.random::<f64>() >= p {
        return label;
    }
    let other = rng.random_range(0..n_classes - 1);
    if other >= label {
        other + 1
    } else {
        other
    }
}

fn softmax(theta: &[f64], features: &[f64], n_classes: usize, out: &mut [f64]) {
    let block = features.len() + 1;
    for (k, o) in out.iter_mut().enumerate().take(n_classes) {
        let w = &theta[k * block..(k + 1) * block];
        *o = w[..features.len()]
            .iter()
            .zip(features)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + w[features.len()];
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Accumulates `scale·(s − target) ⊗ [x, 1]` into `out`.
fn accumulate_outer(out: &mut [f64], residual: &[f64], features: &[f64], scale: f64) {
    let block = features.len() + 1;
    for (k, r) in residual.iter().enumerate() {
        let r = r * scale;
        let row = &mut out[k * block..(k + 1) * block];
        for (o, x) in row.iter_mut().zip(features) {
            *o += r * x;
        }
        row[features.len()] += r;
    }
}

/// Gradient of the cross-entropy of one labelled example.
pub fn softmax_ce_gradient(
    n_classes: usize,
    features: &[f64],
    label: usize,
    theta: &ParamVector,
) -> ParamVector {
    let mut s = vec![0.0; n_classes];
    softmax(theta.as_slice(), features, n_classes, &mut s);
    s[label] -= 1.0;
    let mut out = ParamVector::zeros(theta.dim());
    accumulate_outer(out.as_mut_slice(), &s, features, 1.0);
    out
}

pub fn softmax_ce_loss(n_classes: usize, features: &[f64], label: usize, theta: &ParamVector) -> f64 {
    let block = features.len() + 1;
    let t = theta.as_slice();
    let logits: Vec<f64> = (0..n_classes)
        .map(|k| {
            let w = &t[k * block..(k + 1) * block];
            w[..features.len()]
                .iter()
                .zip(features)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + w[features.len()]
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

impl LogisticConfig {
    pub fn build(&self) -> Result<ClusteredLogistic> {
        let k = self.n_classes;
        if k < 2 || self.feature_dim == 0 || self.n_train == 0 || self.n_transforms == 0 {
            return Err(Error::InvalidProblem(
                "need >= 2 classes, >= 1 feature, >= 1 transform and a non-empty training set".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidProblem(format!(
                "flip_prob {} is outside [0, 1)",
                self.flip_prob
            )));
        }
        let f = self.feature_dim;
        let mut rng = RngStream::for_purpose(self.instance_seed, Purpose::Instance).rng();
        let class_means: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..f)
                    .map(|_| self.class_sep * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let transforms: Vec<Transform> = (0..self.n_transforms)
            .map(|_| Transform {
                scale: rng
                    .random_range(-self.transform_scale..=self.transform_scale)
                    .exp(),
                shift: (0..f)
                    .map(|_| self.transform_shift * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            })
            .collect();
        let n_random = self.n_random_clusters.unwrap_or(k);
        if n_random == 0 {
            return Err(Error::InvalidProblem("n_random_clusters must be positive".into()));
        }
        let n_clusters = match self.policy {
            ClusterPolicy::Classes => k,
            ClusterPolicy::Transforms => self.n_transforms,
            ClusterPolicy::Random => n_random,
        };
        let mut problem = ClusteredLogistic {
            n_classes: k,
            feature_dim: f,
            flip_prob: self.flip_prob,
            feature_std: self.feature_std,
            class_means,
            transforms,
            train: Vec::new(),
            val: Vec::new(),
            members: vec![Vec::new(); n_clusters],
            spec: ClusterSpec::uniform(1)?,
            init: ParamVector::zeros(0),
        };
        // cluster ids come from their own stream so every policy sees the same data
        let mut assign = RngStream::for_purpose(self.instance_seed, Purpose::Shuffle).rng();
        let mut make = |i: usize, rng: &mut StreamRng| {
            let label = i % k;
            let transform = rng.random_range(0..self.n_transforms);
            let features = problem.draw_features(label, transform, rng);
            let cluster = match self.policy {
                ClusterPolicy::Classes => label,
                ClusterPolicy::Transforms => transform,
                ClusterPolicy::Random => assign.random_range(0..n_random),
            };
            Example {
                features,
                label,
                transform,
                cluster,
            }
        };
        let train: Vec<Example> = (0..self.n_train).map(|i| make(i, &mut rng)).collect();
        let val: Vec<Example> = (0..self.n_val).map(|i| make(i, &mut rng)).collect();
        for (i, ex) in train.iter().enumerate() {
            problem.members[ex.cluster].push(i);
        }
        if let Some(n) = problem.members.iter().position(Vec::is_empty) {
            return Err(Error::InvalidProblem(format!("cluster {n} has no training examples")));
        }
        let counts: Vec<usize> = problem.members.iter().map(Vec::len).collect();
        problem.spec = ClusterSpec::from_counts(&counts)?;
        problem.train = train;
        problem.val = val;
        let mut init_rng = RngStream::for_purpose(self.instance_seed, Purpose::Init).rng();
        problem.init = ParamVector::from_vec(
            (0..k * (f + 1))
                .map(|_| self.init_scale * init_rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        Ok(problem)
    }
}

impl ClusteredLogistic {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn flip_prob(&self) -> f64 {
        self.flip_prob
    }

    pub fn train(&self) -> &[Example] {
        &self.train
    }

    pub fn members(&self, n: ClusterId) -> &[usize] {
        &self.members[n]
    }

    /// Same instance with a different label-noise level.
    pub fn with_flip_prob(&self, flip_prob: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&flip_prob) {
            return Err(Error::InvalidProblem(format!("flip_prob {flip_prob} is outside [0, 1)")));
        }
        Ok(Self {
            flip_prob,
            ..self.clone()
        })
    }

    fn draw_features(&self, class: usize, transform: usize, rng: &mut StreamRng) -> Vec<f64> {
        let t = &self.transforms[transform];
        self.class_means[class]
            .iter()
            .zip(&t.shift)
            .map(|(m, b)| {
                let z: f64 = StandardNormal.sample(rng);
                t.scale * (m + self.feature_std * z) + b
            })
            .collect()
    }

    /// Fresh example of class `class` from the generating distribution,
    /// with its label passed through the flip channel.
    pub fn sample_logistic_example(&self, class: usize, rng: &mut StreamRng) -> (Vec<f64>, usize) {
        let transform = rng.random_range(0..self.transforms.len());
        let features = self.draw_features(class, transform, rng);
        let label = noisy_label(class, self.flip_prob, self.n_classes, rng);
        (features, label)
    }

    /// Training example and presented label for a drawn batch item.
    pub fn resolve(&self, item: &BatchItem, seed: u64) -> (&Example, usize) {
        let members = &self.members[item.cluster];
        let ex = &self.train[members[handle_index(item.sample, members.len())]];
        let mut rng = RngStream::for_purpose(seed, Purpose::LabelFlip)
            .substream(item.sample)
            .rng();
        let label = noisy_label(ex.label, self.flip_prob, self.n_classes, &mut rng);
        (ex, label)
    }

    /// Per-sample gradients of labelled examples.
    pub fn logistic_gradient(
        &self,
        batch: &[(Vec<f64>, usize)],
        theta: &ParamVector,
    ) -> Result<Vec<ParamVector>> {
        let expected = self.dim();
        if theta.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: theta.dim(),
            });
        }
        batch
            .iter()
            .map(|(x, y)| {
                let g = softmax_ce_gradient(self.n_classes, x, *y, theta);
                g.check_finite("logistic gradient")?;
                Ok(g)
            })
            .collect()
    }

    /// `E[onehot(label)]` under the flip channel.
    fn expected_target(&self, label: usize, out: &mut [f64]) {
        let p = self.flip_prob;
        let off = p / (self.n_classes - 1) as f64;
        out.fill(off);
        out[label] = 1.0 - p;
    }

    fn mean_over(&self, idx: &[usize], examples: &[Example], theta: &ParamVector) -> ParamVector {
        let k = self.n_classes;
        let mut s = vec![0.0; k];
        let mut target = vec![0.0; k];
        let mut out = ParamVector::zeros(self.dim());
        let scale = 1.0 / idx.len() as f64;
        for &i in idx {
            let ex = &examples[i];
            softmax(theta.as_slice(), &ex.features, k, &mut s);
            self.expected_target(ex.label, &mut target);
            for (a, b) in s.iter_mut().zip(&target) {
                *a -= b;
            }
            accumulate_outer(out.as_mut_slice(), &s, &ex.features, scale);
        }
        out
    }

    /// Accuracy of `argmax` predictions on the clean validation set.
    pub fn accuracy(&self, theta: &ParamVector, on_train: bool) -> f64 {
        let set = if on_train { &self.train } else { &self.val };
        let k = self.n_classes;
        let mut s = vec![0.0; k];
        let correct = set
            .iter()
            .filter(|ex| {
                softmax(theta.as_slice(), &ex.features, k, &mut s);
                let pred = s
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0;
                pred == ex.label
            })
            .count();
        correct as f64 / set.len().max(1) as f64
    }
}

impl ClusteredProblem for ClusteredLogistic {
    fn dim(&self) -> usize {
        self.n_classes * (self.feature_dim + 1)
    }

    fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    fn sample_gradient(&self, item: &BatchItem, theta: &ParamVector, seed: u64) -> ParamVector {
        let (ex, label) = self.resolve(item, seed);
        softmax_ce_gradient(self.n_classes, &ex.features, label, theta)
    }

    fn cluster_mean_gradient(&self, n: ClusterId, theta: &ParamVector) -> ParamVector {
        self.mean_over(&self.members[n], &self.train, theta)
    }

    /// Expected cross-entropy under label noise, averaged over the training set.
    fn loss(&self, theta: &ParamVector) -> f64 {
        let k = self.n_classes;
        let mut target = vec![0.0; k];
        let mut logits = vec![0.0; k];
        let block = self.feature_dim + 1;
        let t = theta.as_slice();
        let total: f64 = self
            .train
            .iter()
            .map(|ex| {
                self.expected_target(ex.label, &mut target);
                for (c, z) in logits.iter_mut().enumerate() {
                    let w = &t[c * block..(c + 1) * block];
                    *z = w[..self.feature_dim]
                        .iter()
                        .zip(&ex.features)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + w[self.feature_dim];
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                lse - target.iter().zip(&logits).map(|(w, z)| w * z).sum::<f64>()
            })
            .sum();
        total / self.train.len() as f64
    }

    fn in_cluster_variance(&self, theta: &ParamVector) -> f64 {
        let k = self.n_classes;
        let p = self.flip_prob;
        let off = p / (k - 1) as f64;
        let mut s = vec![0.0; k];
        let mut total = 0.0;
        for (n, members) in self.members.iter().enumerate() {
            let mut second = 0.0;
            for &i in members {
                let ex = &self.train[i];
                softmax(theta.as_slice(), &ex.features, k, &mut s);
                let xnorm = ex.features.iter().map(|x| x * x).sum::<f64>() + 1.0;
                let s_sq: f64 = s.iter().map(|v| v * v).sum();
                let sy = s[ex.label];
                let expected_sy = (1.0 - p) * sy + off * (1.0 - sy);
                second += xnorm * (s_sq - 2.0 * expected_sy + 1.0);
            }
            second /= members.len() as f64;
            let mean = self.cluster_mean_gradient(n, theta);
            total += self.spec.prob(n) * (second - mean.norm_sq()).max(0.0);
        }
        total
    }

    fn validation_accuracy(&self, theta: &ParamVector) -> Option<f64> {
        Some(self.accuracy(theta, false))
    }

    fn initial_point(&self) -> ParamVector {
        self.init.clone()
    }
}
