//! Named configurations.
//!
//! The `imagenet-*` and `cifar-*` presets carry the published
//! hyperparameters of the large-scale image experiments, transplanted onto a
//! desk-sized softmax-regression analogue (transforms as clusters for the
//! ImageNet settings, classes as clusters for CIFAR). They are kept for
//! reference; the analogue is not tuned for them. QHM's `γ` is our `nu_mix`.
//!
//! The remaining presets are the synthetic experiments the test suite runs.

use discover_core::engine::{Composition, LrSchedule};
use discover_core::optim::Variant;
use discover_core::problems::{ClusterPolicy, LogisticConfig, QuadraticConfig};

use crate::config::{LoopBlock, OptimizerBlock, ProblemConfig, RunConfig};

const SETTINGS: [&str; 5] = ["imagenet-clean", "imagenet-noisy", "cifar-clean", "cifar-p02", "cifar-p08"];

/// `(mu, beta, nu_mix, alpha, alpha_n, tail_fraction)`; `None` keeps the default.
type Hp = (f64, Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<f64>);

fn published(setting: &str, v: Variant) -> Option<Hp> {
    use Variant::*;
    let imagenet = |v| match v {
        Momentum => Some((0.1, Some(0.9), None, None, None, None)),
        Qhm => Some((0.1, Some(0.999), Some(0.7), None, None, None)),
        Igt => Some((0.1, Some(0.9), None, None, None, Some(90.0))),
        Adam => Some((0.001, None, None, None, None, None)),
        Discover => Some((0.1, None, None, Some(0.1), Some(0.01), None)),
        DiscoverQhm => Some((0.1, None, Some(0.9), Some(0.9), Some(0.1), None)),
        DiscoverIgt => Some((0.1, None, None, Some(0.9), Some(0.1), Some(180.0))),
        Sgd => None,
    };
    match setting {
        "imagenet-clean" | "imagenet-noisy" => imagenet(v),
        "cifar-clean" => match v {
            Sgd => Some((0.01, None, None, None, None, None)),
            Momentum => Some((0.03, Some(0.9), None, None, None, None)),
            Qhm => Some((0.1, Some(0.9), Some(0.9), None, None, None)),
            Igt => Some((0.01, Some(0.9), None, None, None, Some(18.0))),
            Adam => Some((0.001, None, None, None, None, None)),
            Discover => Some((0.01, None, None, Some(0.095), Some(0.1), None)),
            DiscoverQhm => Some((0.01, None, Some(0.9), Some(0.9), Some(0.1), None)),
            DiscoverIgt => Some((0.01, None, None, Some(0.095), Some(0.1), Some(18.0))),
        },
        "cifar-p02" => match v {
            Sgd => Some((0.175, None, None, None, None, None)),
            Momentum => Some((0.1, Some(0.9), None, None, None, None)),
            Qhm => Some((0.175, Some(0.9), Some(0.9), None, None, None)),
            Igt => Some((0.1, Some(0.9), None, None, None, Some(18.0))),
            Adam => Some((0.001, None, None, None, None, None)),
            Discover => Some((0.01, None, None, Some(0.095), Some(0.1), None)),
            DiscoverQhm => Some((0.1, None, Some(0.7), Some(0.9), Some(0.1), None)),
            DiscoverIgt => Some((0.1, None, None, Some(0.095), Some(0.1), Some(18.0))),
        },
        "cifar-p08" => match v {
            Sgd => Some((0.1, None, None, None, None, None)),
            Momentum => Some((0.01, Some(0.9), None, None, None, None)),
            Qhm => Some((0.1, Some(0.9), Some(0.6), None, None, None)),
            Igt => Some((0.01, Some(0.9), None, None, None, Some(18.0))),
            Adam => Some((0.001, None, None, None, None, None)),
            Discover => Some((0.01, None, None, Some(0.095), Some(0.1), None)),
            DiscoverQhm => Some((0.1, None, Some(0.6), Some(0.6), Some(0.1), None)),
            DiscoverIgt => Some((0.1, None, None, Some(0.095), Some(0.1), Some(18.0))),
        },
        _ => None,
    }
}

fn image_analogue(setting: &str, v: Variant) -> Option<RunConfig> {
    let (mu, beta, nu_mix, alpha, alpha_n, tail_fraction) = published(setting, v)?;
    let imagenet = setting.starts_with("imagenet");
    let flip_prob = match setting {
        "imagenet-noisy" | "cifar-p08" => 0.8,
        "cifar-p02" => 0.2,
        _ => 0.0,
    };
    let problem = LogisticConfig {
        flip_prob,
        class_sep: 2.0,
        policy: if imagenet {
            ClusterPolicy::Transforms
        } else {
            ClusterPolicy::Classes
        },
        ..LogisticConfig::default()
    };
    let n_clusters = if imagenet { problem.n_transforms } else { problem.n_classes };
    let d = OptimizerBlock::default();
    let optimizer = OptimizerBlock {
        variant: v,
        mu,
        beta: beta.unwrap_or(d.beta),
        nu_mix: nu_mix.unwrap_or(d.nu_mix),
        alpha: alpha.unwrap_or(d.alpha),
        alpha_n: alpha_n.map(|a| vec![a; n_clusters]),
        tail_fraction,
        adam: d.adam,
    };
    let loop_ = LoopBlock {
        total_steps: 2000,
        warmup_steps: 5,
        lr_schedule: LrSchedule::Cosine,
        weight_decay: if imagenet { 1e-3 } else { 5e-4 },
        eval_every: 20,
        batch_size: 64,
        n_shards: 8,
        composition: Composition::SingleClusterPerShard,
        ..LoopBlock::default()
    };
    Some(RunConfig {
        problem: ProblemConfig::Logistic(problem),
        optimizer,
        loop_,
        seeds: (0..5).collect(),
        ..RunConfig::default()
    })
}

/// Discover on the default quadratic inside the theorem's step-size window.
pub fn quadratic_theorem() -> RunConfig {
    RunConfig {
        problem: ProblemConfig::Quadratic(QuadraticConfig::default()),
        optimizer: OptimizerBlock {
            variant: Variant::Discover,
            mu: 0.03,
            alpha: 0.1,
            ..OptimizerBlock::default()
        },
        loop_: LoopBlock {
            total_steps: 5000,
            eval_every: 1,
            batch_size: 20,
            n_shards: 1,
            composition: Composition::SingleClusterPerShard,
            ..LoopBlock::default()
        },
        seeds: (0..50).collect(),
        theorem_mode: true,
        ..RunConfig::default()
    }
}

/// Between-cluster variance traces on the clustered logistic problem.
pub fn logistic_variance(flip_prob: f64) -> RunConfig {
    RunConfig {
        problem: ProblemConfig::Logistic(LogisticConfig {
            flip_prob,
            class_sep: 2.0,
            init_scale: 1.0,
            policy: ClusterPolicy::Classes,
            ..LogisticConfig::default()
        }),
        optimizer: OptimizerBlock {
            variant: Variant::Discover,
            mu: 0.01,
            beta: 0.9,
            alpha: 0.02,
            ..OptimizerBlock::default()
        },
        loop_: LoopBlock {
            total_steps: 3000,
            eval_every: 100,
            trace_between_var: true,
            batch_size: 32,
            n_shards: 1,
            composition: Composition::SingleClusterPerShard,
            ..LoopBlock::default()
        },
        seeds: (0..3).collect(),
        ..RunConfig::default()
    }
}

/// Discover on the noisy-label logistic problem with a given cluster policy.
pub fn logistic_clusters(policy: ClusterPolicy) -> RunConfig {
    RunConfig {
        problem: ProblemConfig::Logistic(LogisticConfig {
            flip_prob: 0.8,
            class_sep: 2.0,
            policy,
            ..LogisticConfig::default()
        }),
        optimizer: OptimizerBlock {
            variant: Variant::Discover,
            mu: 0.01,
            alpha: 0.02,
            ..OptimizerBlock::default()
        },
        loop_: LoopBlock {
            total_steps: 3000,
            eval_every: 3000,
            batch_size: 32,
            n_shards: 1,
            composition: Composition::SingleClusterPerShard,
            ..LoopBlock::default()
        },
        seeds: (0..5).collect(),
        ..RunConfig::default()
    }
}

pub fn preset_names() -> Vec<String> {
    let mut names: Vec<String> = vec![
        "quadratic-theorem".into(),
        "logistic-variance-p0".into(),
        "logistic-variance-p08".into(),
        "logistic-classes-p08".into(),
        "logistic-transforms-p08".into(),
        "logistic-random-p08".into(),
    ];
    for s in SETTINGS {
        for v in Variant::ALL {
            if published(s, v).is_some() {
                names.push(format!("{s}-{}", v.name()));
            }
        }
    }
    names
}

pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "quadratic-theorem" => return Some(quadratic_theorem()),
        "logistic-variance-p0" => return Some(logistic_variance(0.0)),
        "logistic-variance-p08" => return Some(logistic_variance(0.8)),
        "logistic-classes-p08" => return Some(logistic_clusters(ClusterPolicy::Classes)),
        "logistic-transforms-p08" => return Some(logistic_clusters(ClusterPolicy::Transforms)),
        "logistic-random-p08" => return Some(logistic_clusters(ClusterPolicy::Random)),
        _ => {}
    }
    SETTINGS.iter().find_map(|s| {
        let variant = name.strip_prefix(s)?.strip_prefix('-')?.parse::<Variant>().ok()?;
        image_analogue(s, variant)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        let names = preset_names();
        assert_eq!(names.len(), 6 + 7 * 2 + 8 * 3);
        for n in names {
            let cfg = preset(&n).unwrap_or_else(|| panic!("{n} missing"));
            if let Err(e) = cfg.validated() {
                panic!("{n}: {e}");
            }
        }
    }

    #[test]
    fn published_values_survive() {
        let c = preset("imagenet-clean-discover").unwrap();
        assert_eq!((c.optimizer.mu, c.optimizer.alpha), (0.1, 0.1));
        assert_eq!(c.optimizer.alpha_n, Some(vec![0.01; 3]));
        let c = preset("cifar-p08-discover_qhm").unwrap();
        assert_eq!((c.optimizer.mu, c.optimizer.alpha, c.optimizer.nu_mix), (0.1, 0.6, 0.6));
        assert_eq!(c.optimizer.alpha_n.as_ref().map(Vec::len), Some(10));
        assert_eq!(preset("cifar-clean-adam").unwrap().optimizer.adam.beta2, 0.999);
        assert!(preset("imagenet-clean-sgd").is_none());
        assert!(preset("cifar-p05-sgd").is_none());
    }
}
