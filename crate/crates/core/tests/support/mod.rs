//! Straight-line reference implementations of every update rule, written on
//! plain `Vec<f64>` without any code from the library, plus random-case
//! drivers comparing them with the library steps.
//!
//! Shared by the core integration tests and the CLI acceptance suite.

#![allow(dead_code)]

use discover_core::optim::{
    AdamMoments, ClusterBuffers, HyperParams, IgtState, Optimizer, OptimizerState, Variant,
};
use discover_core::{BatchGradients, ClusterSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type V = Vec<f64>;

#[derive(Debug, Clone)]
pub struct Sample {
    pub cluster: usize,
    pub grad: V,
}

fn batch_mean(samples: &[Sample]) -> V {
    let d = samples[0].grad.len();
    let mut m = vec![0.0; d];
    for s in samples {
        for j in 0..d {
            m[j] += s.grad[j];
        }
    }
    for x in &mut m {
        *x /= samples.len() as f64;
    }
    m
}

fn cluster_mean(samples: &[Sample], n: usize) -> Option<V> {
    let sub: Vec<Sample> = samples.iter().filter(|s| s.cluster == n).cloned().collect();
    (!sub.is_empty()).then(|| batch_mean(&sub))
}

pub fn oracle_sgd(theta: &V, samples: &[Sample], mu: f64) -> V {
    let g = batch_mean(samples);
    (0..theta.len()).map(|j| theta[j] - mu * g[j]).collect()
}

pub fn oracle_momentum(theta: &V, v: &V, samples: &[Sample], mu: f64, beta: f64) -> (V, V) {
    let g = batch_mean(samples);
    let v1: V = (0..v.len()).map(|j| beta * v[j] + (1.0 - beta) * g[j]).collect();
    let th: V = (0..theta.len()).map(|j| theta[j] - mu * v1[j]).collect();
    (th, v1)
}

pub fn oracle_qhm(theta: &V, v: &V, samples: &[Sample], mu: f64, beta: f64, nu: f64) -> (V, V) {
    let g = batch_mean(samples);
    let v1: V = (0..v.len()).map(|j| beta * v[j] + (1.0 - beta) * g[j]).collect();
    let th: V = (0..theta.len())
        .map(|j| theta[j] - mu * (nu * v1[j] + (1.0 - nu) * g[j]))
        .collect();
    (th, v1)
}

/// Point `θ_t + γ_t/(1−γ_t)·(θ_t − θ_{t−1})` with `γ_t = t/(t+1)`.
pub fn oracle_transport(theta: &V, theta_prev: &V, t: u64) -> V {
    let gamma = t as f64 / (t as f64 + 1.0);
    let ratio = gamma / (1.0 - gamma);
    (0..theta.len())
        .map(|j| theta[j] + ratio * (theta[j] - theta_prev[j]))
        .collect()
}

/// `v ← γv + (1−γ)ĝ`, `w ← βw − μv`, `θ ← θ + w`.
pub fn oracle_igt(theta: &V, v: &V, w: &V, t: u64, samples: &[Sample], mu: f64, beta: f64) -> (V, V, V) {
    let gamma = t as f64 / (t as f64 + 1.0);
    let g = batch_mean(samples);
    let v1: V = (0..v.len()).map(|j| gamma * v[j] + (1.0 - gamma) * g[j]).collect();
    let w1: V = (0..w.len()).map(|j| beta * w[j] - mu * v1[j]).collect();
    let th: V = (0..theta.len()).map(|j| theta[j] + w1[j]).collect();
    (th, v1, w1)
}

#[allow(clippy::too_many_arguments)]
pub fn oracle_adam(
    theta: &V,
    m: &V,
    v: &V,
    step: u64,
    samples: &[Sample],
    mu: f64,
    b1: f64,
    b2: f64,
    eps: f64,
) -> (V, V, V) {
    let g = batch_mean(samples);
    let t = (step + 1) as i32;
    let m1: V = (0..m.len()).map(|j| b1 * m[j] + (1.0 - b1) * g[j]).collect();
    let v1: V = (0..v.len()).map(|j| b2 * v[j] + (1.0 - b2) * g[j] * g[j]).collect();
    let th: V = (0..theta.len())
        .map(|j| {
            let mh = m1[j] / (1.0 - b1.powi(t));
            let vh = v1[j] / (1.0 - b2.powi(t));
            theta[j] - mu * mh / (vh.sqrt() + eps)
        })
        .collect();
    (th, m1, v1)
}

#[derive(Debug, Clone)]
pub struct Buffers {
    pub g: Vec<V>,
    pub gbar: V,
}

/// The multi-momentum step with per-sample targets `target(i)`.
fn oracle_multi(
    theta: &V,
    buf: &Buffers,
    samples: &[Sample],
    targets: &[V],
    mu: f64,
    alpha: f64,
    alpha_n: &[f64],
) -> (V, Buffers) {
    let d = theta.len();
    let b = samples.len() as f64;
    let mut th = theta.clone();
    for j in 0..d {
        let s: f64 = samples
            .iter()
            .zip(targets)
            .map(|(x, t)| t[j] - buf.g[x.cluster][j] + buf.gbar[j])
            .sum();
        th[j] -= mu / b * s;
    }
    let mut g = buf.g.clone();
    for n in 0..g.len() {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].cluster == n).collect();
        if idx.is_empty() {
            continue;
        }
        for j in 0..d {
            let m = idx.iter().map(|&i| targets[i][j]).sum::<f64>() / idx.len() as f64;
            g[n][j] = (1.0 - alpha_n[n]) * buf.g[n][j] + alpha_n[n] * m;
        }
    }
    let mut gbar = buf.gbar.clone();
    for j in 0..d {
        let s: f64 = samples
            .iter()
            .zip(targets)
            .map(|(x, t)| buf.g[x.cluster][j] - t[j])
            .sum();
        gbar[j] -= alpha / b * s;
    }
    (th, Buffers { g, gbar })
}

pub fn oracle_discover(theta: &V, buf: &Buffers, samples: &[Sample], mu: f64, alpha: f64, alpha_n: &[f64]) -> (V, Buffers) {
    let targets: Vec<V> = samples.iter().map(|s| s.grad.clone()).collect();
    oracle_multi(theta, buf, samples, &targets, mu, alpha, alpha_n)
}

/// Discover step, then `g^(n) ← ν·g^(n) + (1−ν)·mean_{B^n}` for present `n`.
#[allow(clippy::too_many_arguments)]
pub fn oracle_discover_qhm(
    theta: &V,
    buf: &Buffers,
    samples: &[Sample],
    mu: f64,
    alpha: f64,
    alpha_n: &[f64],
    nu: f64,
) -> (V, Buffers) {
    let (th, mut b) = oracle_discover(theta, buf, samples, mu, alpha, alpha_n);
    for n in 0..b.g.len() {
        if let Some(m) = cluster_mean(samples, n) {
            for j in 0..m.len() {
                b.g[n][j] = nu * b.g[n][j] + (1.0 - nu) * m[j];
            }
        }
    }
    (th, b)
}

/// Tail average `v_t` in place of every sample gradient.
#[allow(clippy::too_many_arguments)]
pub fn oracle_discover_igt(
    theta: &V,
    v: &V,
    t: u64,
    buf: &Buffers,
    samples: &[Sample],
    mu: f64,
    alpha: f64,
    alpha_n: &[f64],
) -> (V, V, Buffers) {
    let gamma = t as f64 / (t as f64 + 1.0);
    let g = batch_mean(samples);
    let v1: V = (0..v.len()).map(|j| gamma * v[j] + (1.0 - gamma) * g[j]).collect();
    let targets = vec![v1.clone(); samples.len()];
    let (th, b) = oracle_multi(theta, buf, samples, &targets, mu, alpha, alpha_n);
    (th, v1, b)
}

// ---------------------------------------------------------------------------
// Adapters and random cases

pub fn pv(v: &V) -> ParamVector {
    ParamVector::from_vec(v.clone())
}

pub fn to_batch(samples: &[Sample], n_clusters: usize) -> BatchGradients {
    let mut b = BatchGradients::empty(samples[0].grad.len(), n_clusters);
    for s in samples {
        b.push(s.cluster, &pv(&s.grad)).unwrap();
    }
    b
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn vecn(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> V {
    (0..d).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

pub struct Case {
    pub dim: usize,
    pub n_clusters: usize,
    pub theta: V,
    pub samples: Vec<Sample>,
    pub hp: HyperParams,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let dim = rng.random_range(1..=8);
    let n_clusters = rng.random_range(1..=5);
    let size = rng.random_range(1..=12);
    let samples = (0..size)
        .map(|_| Sample {
            cluster: rng.random_range(0..n_clusters),
            grad: vecn(rng, dim, 3.0),
        })
        .collect();
    let hp = HyperParams {
        mu: rng.random_range(1e-3..0.5),
        beta: rng.random_range(0.0..0.999),
        nu_mix: rng.random::<f64>(),
        alpha: rng.random_range(1e-3..1.0),
        alpha_n: Some((0..n_clusters).map(|_| rng.random_range(1e-3..=1.0)).collect()),
        tail_fraction: None,
        adam: discover_core::optim::AdamParams {
            beta1: rng.random_range(0.0..0.99),
            beta2: rng.random_range(0.9..0.9999),
            eps: 1e-8,
        },
    };
    Case {
        dim,
        n_clusters,
        theta: vecn(rng, dim, 2.0),
        samples,
        hp,
    }
}

fn spec(n: usize) -> ClusterSpec {
    ClusterSpec::uniform(n).unwrap()
}

/// One random case per call: runs the library step for `variant` from a
/// random state and returns the largest deviation from the oracle over all
/// updated quantities.
pub fn compare_once(variant: Variant, rng: &mut ChaCha8Rng) -> f64 {
    let c = random_case(rng);
    let (d, n) = (c.dim, c.n_clusters);
    let grads = to_batch(&c.samples, n);
    let mut state = OptimizerState::new(variant, d, n, None);
    let v0 = vecn(rng, d, 1.0);
    let w0 = vecn(rng, d, 1.0);
    let prev = vecn(rng, d, 2.0);
    let t: u64 = rng.random_range(0..20);
    let step: u64 = rng.random_range(0..50);
    let buf = Buffers {
        g: (0..n).map(|_| vecn(rng, d, 2.0)).collect(),
        gbar: vecn(rng, d, 2.0),
    };
    if state.momentum.is_some() {
        state.momentum = Some(pv(&v0));
    }
    if let Some(igt) = state.igt.as_mut() {
        *igt = IgtState {
            velocity: igt.velocity.as_ref().map(|_| pv(&w0)),
            theta_prev: pv(&prev),
            since_reset: t,
            reset_period: None,
        };
    }
    if state.adam.is_some() {
        state.adam = Some(AdamMoments {
            m: pv(&v0),
            v: pv(&w0.iter().map(|x| x * x).collect()),
        });
        state.step = step;
    }
    if state.clusters.is_some() {
        state.clusters = Some(ClusterBuffers {
            buffers: buf.g.iter().map(pv).collect(),
            gbar: pv(&buf.gbar),
        });
    }
    let mut opt = Optimizer::new(variant, c.hp.clone(), spec(n), d, 1000).unwrap();
    *opt.state_mut() = state;
    let point = opt.transport_point(&pv(&c.theta));
    let mut theta = pv(&c.theta);
    opt.step(&mut theta, &grads, c.hp.mu).unwrap();
    let s = opt.state();
    let hp = &c.hp;
    let an = hp.alpha_n.clone().unwrap();
    let th = theta.as_slice();
    let clusters_err = |b: &Buffers| {
        let cb = s.clusters.as_ref().unwrap();
        let mut e = max_abs(cb.gbar.as_slice(), &b.gbar);
        for k in 0..n {
            e = e.max(max_abs(cb.buffers[k].as_slice(), &b.g[k]));
        }
        e
    };
    match variant {
        Variant::Sgd => max_abs(th, &oracle_sgd(&c.theta, &c.samples, hp.mu)),
        Variant::Momentum => {
            let (o, v) = oracle_momentum(&c.theta, &v0, &c.samples, hp.mu, hp.beta);
            max_abs(th, &o).max(max_abs(s.momentum.as_ref().unwrap().as_slice(), &v))
        }
        Variant::Qhm => {
            let (o, v) = oracle_qhm(&c.theta, &v0, &c.samples, hp.mu, hp.beta, hp.nu_mix);
            max_abs(th, &o).max(max_abs(s.momentum.as_ref().unwrap().as_slice(), &v))
        }
        Variant::Igt => {
            let (o, v, w) = oracle_igt(&c.theta, &v0, &w0, t, &c.samples, hp.mu, hp.beta);
            let igt = s.igt.as_ref().unwrap();
            let tp = oracle_transport(&c.theta, &prev, t);
            max_abs(th, &o)
                .max(max_abs(s.momentum.as_ref().unwrap().as_slice(), &v))
                .max(max_abs(igt.velocity.as_ref().unwrap().as_slice(), &w))
                .max(max_abs(point.as_slice(), &tp))
                .max(max_abs(igt.theta_prev.as_slice(), &c.theta))
        }
        Variant::Adam => {
            let a = hp.adam;
            let v_sq: V = w0.iter().map(|x| x * x).collect();
            let (o, m, v) = oracle_adam(&c.theta, &v0, &v_sq, step, &c.samples, hp.mu, a.beta1, a.beta2, a.eps);
            let mo = s.adam.as_ref().unwrap();
            max_abs(th, &o)
                .max(max_abs(mo.m.as_slice(), &m))
                .max(max_abs(mo.v.as_slice(), &v))
        }
        Variant::Discover => {
            let (o, b) = oracle_discover(&c.theta, &buf, &c.samples, hp.mu, hp.alpha, &an);
            max_abs(th, &o).max(clusters_err(&b))
        }
        Variant::DiscoverQhm => {
            let (o, b) = oracle_discover_qhm(&c.theta, &buf, &c.samples, hp.mu, hp.alpha, &an, hp.nu_mix);
            max_abs(th, &o).max(clusters_err(&b))
        }
        Variant::DiscoverIgt => {
            let (o, v, b) = oracle_discover_igt(&c.theta, &v0, t, &buf, &c.samples, hp.mu, hp.alpha, &an);
            let tp = oracle_transport(&c.theta, &prev, t);
            max_abs(th, &o)
                .max(max_abs(s.momentum.as_ref().unwrap().as_slice(), &v))
                .max(clusters_err(&b))
                .max(max_abs(point.as_slice(), &tp))
        }
    }
}

/// Largest oracle deviation over `cases` random inputs for every variant.
pub fn oracle_equivalence(cases: usize, seed: u64) -> Vec<(Variant, f64)> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (v as u64 + 1) * 0x9e37_79b9);
            let worst = (0..cases).map(|_| compare_once(v, &mut rng)).fold(0.0, f64::max);
            (v, worst)
        })
        .collect()
}

/// Recorded per-sample gradients, independent of the iterate.
pub fn recorded_samples(steps: usize, dim: usize, n_clusters: usize, seed: u64) -> Vec<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| {
            let size = rng.random_range(1..=10);
            (0..size)
                .map(|_| Sample {
                    cluster: rng.random_range(0..n_clusters),
                    grad: vecn(&mut rng, dim, 2.0),
                })
                .collect()
        })
        .collect()
}

/// [`recorded_samples`] reduced to minibatch aggregates.
pub fn recorded_stream(steps: usize, dim: usize, n_clusters: usize, seed: u64) -> Vec<BatchGradients> {
    recorded_samples(steps, dim, n_clusters, seed)
        .iter()
        .map(|s| to_batch(s, n_clusters))
        .collect()
}

/// Runs `variant` over the stream and returns the iterate after each step.
pub fn trajectory(variant: Variant, hp: &HyperParams, stream: &[BatchGradients], n_clusters: usize) -> Vec<ParamVector> {
    let dim = stream[0].dim();
    let mut opt = Optimizer::new(variant, hp.clone(), spec(n_clusters), dim, stream.len() as u64).unwrap();
    let mut theta = ParamVector::from_vec((0..dim).map(|j| 0.5 - j as f64 * 0.1).collect());
    stream
        .iter()
        .map(|g| {
            opt.step(&mut theta, g, hp.mu).unwrap();
            theta.clone()
        })
        .collect()
}

pub fn max_deviation(a: &[ParamVector], b: &[ParamVector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| max_abs(x.as_slice(), y.as_slice()))
        .fold(0.0, f64::max)
}

/// The reduction identities on a 200-step recorded stream; returns
/// `(name, max parameter deviation)`.
pub fn reduction_identities(seed: u64) -> Vec<(&'static str, f64)> {
    let steps = 200;
    let (dim, n) = (6, 4);
    let stream = recorded_stream(steps, dim, n, seed);
    let single = recorded_stream(steps, dim, 1, seed ^ 0x5151);
    let base = HyperParams {
        mu: 0.05,
        beta: 0.9,
        nu_mix: 0.7,
        alpha: 0.1,
        ..HyperParams::default()
    };
    let with = |f: &dyn Fn(&mut HyperParams)| {
        let mut h = base.clone();
        f(&mut h);
        h
    };
    let sgd = trajectory(Variant::Sgd, &base, &stream, n);
    let momentum = trajectory(Variant::Momentum, &base, &stream, n);
    let discover = trajectory(Variant::Discover, &base, &stream, n);
    vec![
        (
            "QHM(nu=1) = Momentum",
            max_deviation(&trajectory(Variant::Qhm, &with(&|h| h.nu_mix = 1.0), &stream, n), &momentum),
        ),
        (
            "QHM(nu=0) = SGD",
            max_deviation(&trajectory(Variant::Qhm, &with(&|h| h.nu_mix = 0.0), &stream, n), &sgd),
        ),
        (
            "Momentum(beta=0) = SGD",
            max_deviation(&trajectory(Variant::Momentum, &with(&|h| h.beta = 0.0), &stream, n), &sgd),
        ),
        (
            "Discover(N=1) = SGD",
            max_deviation(
                &trajectory(Variant::Discover, &base, &single, 1),
                &trajectory(Variant::Sgd, &base, &single, 1),
            ),
        ),
        (
            "DiscoverQHM(nu=1) = Discover",
            max_deviation(&trajectory(Variant::DiscoverQhm, &with(&|h| h.nu_mix = 1.0), &stream, n), &discover),
        ),
    ]
}
