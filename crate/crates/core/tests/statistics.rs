use discover_core::engine::{run_training, Composition, OptimizerConfig, ShardingPlan, TrainLoopConfig};
use discover_core::metrics::noise_moments;
use discover_core::optim::{HyperParams, OptimizerState, Variant};
use discover_core::problems::{noisy_label, ClusteredProblem, LogisticConfig, QuadraticConfig};
use discover_core::{BatchItem, ParamVector, RngStream};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn flip_rate_and_uniform_wrong_class() {
    let (k, label, n) = (10usize, 3usize, 100_000usize);
    let mut rng = RngStream::new(42, 0).rng();
    let mut counts = vec![0usize; k];
    for _ in 0..n {
        counts[noisy_label(label, 0.8, k, &mut rng)] += 1;
    }
    let flipped = n - counts[label];
    let rate = flipped as f64 / n as f64;
    assert!((rate - 0.8).abs() <= 0.005, "flip rate {rate}");

    let expected = flipped as f64 / (k - 1) as f64;
    let stat: f64 = (0..k)
        .filter(|&c| c != label)
        .map(|c| (counts[c] as f64 - expected).powi(2) / expected)
        .sum();
    let p_value = 1.0 - ChiSquared::new((k - 2) as f64).unwrap().cdf(stat);
    assert!(p_value > 1e-3, "chi-square {stat}, p = {p_value}");
}

#[test]
fn no_flips_at_zero() {
    let mut rng = RngStream::new(1, 1).rng();
    assert!((0..1000).all(|i| noisy_label(i % 4, 0.0, 4, &mut rng) == i % 4));
}

#[test]
fn discover_noise_is_unbiased_when_gbar_matches_buffers() {
    let problem = QuadraticConfig::default().build().unwrap();
    let dim = problem.dim();
    let spec = problem.spec().clone();
    let mut state = OptimizerState::new(Variant::Discover, dim, spec.n_clusters(), None);
    let mut rng = RngStream::new(5, 5).rng();
    let c = state.clusters.as_mut().unwrap();
    for b in &mut c.buffers {
        *b = ParamVector::from_vec((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect());
    }
    c.gbar = c.weighted_average(&spec);
    let theta = ParamVector::from_vec((0..dim).map(|j| (j as f64).sin()).collect());
    let m = noise_moments(&problem, &state, &theta, 8, 100_000, 3).unwrap();
    assert!(m.mean_norm <= 3.0 * m.std_error, "{} vs SE {}", m.mean_norm, m.std_error);

    let plain = OptimizerState::new(Variant::Sgd, dim, spec.n_clusters(), None);
    let m = noise_moments(&problem, &plain, &theta, 8, 100_000, 3).unwrap();
    assert!(m.mean_norm <= 3.0 * m.std_error);
}

#[test]
fn shifted_gbar_shows_up_as_bias() {
    let problem = QuadraticConfig::default().build().unwrap();
    let dim = problem.dim();
    let mut state = OptimizerState::new(Variant::Discover, dim, 5, None);
    state.clusters.as_mut().unwrap().gbar = ParamVector::from_vec(vec![0.5; dim]);
    let theta = ParamVector::zeros(dim);
    let m = noise_moments(&problem, &state, &theta, 8, 20_000, 4).unwrap();
    let shift = 0.5 * (dim as f64).sqrt();
    assert!((m.mean_norm - shift).abs() <= 4.0 * m.std_error + 1e-9);
}

fn mc_second_moment(p: f64, samples: u64) -> f64 {
    let base = LogisticConfig {
        n_train: 500,
        n_val: 10,
        class_sep: 2.0,
        init_scale: 1.0,
        ..LogisticConfig::default()
    }
    .build()
    .unwrap();
    let problem = base.with_flip_prob(p).unwrap();
    let theta = problem.initial_point();
    let spec = problem.spec().clone();
    let mut rng = RngStream::new(9, 9).rng();
    let total: f64 = (0..samples)
        .map(|_| {
            let item = BatchItem {
                cluster: spec.sample(&mut rng),
                sample: rng.random(),
            };
            problem.sample_gradient(&item, &theta, 0).norm_sq()
        })
        .sum();
    total / samples as f64
}

#[test]
fn gradient_second_moment_grows_with_label_noise() {
    let m: Vec<f64> = [0.0, 0.2, 0.8].iter().map(|&p| mc_second_moment(p, 20_000)).collect();
    assert!(m[0] < m[1] && m[1] < m[2], "{m:?}");
}

#[test]
fn closed_form_in_cluster_variance_grows_with_label_noise() {
    let base = LogisticConfig {
        n_train: 500,
        n_val: 10,
        init_scale: 1.0,
        ..LogisticConfig::default()
    }
    .build()
    .unwrap();
    let theta = base.initial_point();
    let v: Vec<f64> = [0.0, 0.2, 0.5, 0.8]
        .iter()
        .map(|&p| base.with_flip_prob(p).unwrap().in_cluster_variance(&theta))
        .collect();
    assert!(v.windows(2).all(|w| w[0] < w[1]), "{v:?}");
}

#[test]
fn training_is_reproducible() {
    let problem = QuadraticConfig {
        dim: 6,
        n_clusters: 3,
        ..QuadraticConfig::default()
    }
    .build()
    .unwrap();
    let opt = OptimizerConfig {
        variant: Variant::DiscoverIgt,
        hp: HyperParams {
            mu: 0.02,
            alpha: 0.1,
            tail_fraction: Some(2.0),
            ..HyperParams::default()
        },
    };
    let lc = TrainLoopConfig {
        total_steps: 300,
        eval_every: 50,
        ..TrainLoopConfig::default()
    };
    let plan = ShardingPlan::new(3, 2, Composition::Iid).unwrap();
    let a = run_training(&problem, &opt, &lc, &plan, 17).unwrap();
    let b = run_training(&problem, &opt, &lc, &plan, 17).unwrap();
    assert_eq!(a.final_theta, b.final_theta);
    assert_eq!(a.rows, b.rows);
    let c = run_training(&problem, &opt, &lc, &plan, 18).unwrap();
    assert_ne!(a.final_theta, c.final_theta);
}
