mod support;

use discover_core::optim::{sync_buffers, ClusterBuffers, HyperParams, Optimizer, ShardDelta, Variant};
use discover_core::{BatchGradients, ClusterSpec, ParamVector};
use proptest::prelude::*;

#[test]
fn library_matches_reference_updates() {
    for (variant, worst) in support::oracle_equivalence(1000, 7) {
        assert!(worst <= 1e-12, "{}: max deviation {worst:e}", variant.name());
    }
}

#[test]
fn reduction_identities_hold() {
    for (name, dev) in support::reduction_identities(11) {
        assert!(dev <= 1e-10, "{name}: {dev:e}");
    }
}

#[test]
fn discover_qhm_at_one_is_bitwise_discover() {
    let stream = support::recorded_stream(200, 5, 3, 3);
    let hp = HyperParams {
        mu: 0.05,
        alpha: 0.1,
        nu_mix: 1.0,
        ..HyperParams::default()
    };
    let a = support::trajectory(Variant::DiscoverQhm, &hp, &stream, 3);
    let b = support::trajectory(Variant::Discover, &hp, &stream, 3);
    assert_eq!(a, b);
}

#[test]
fn absent_cluster_buffers_stay_frozen() {
    let spec = ClusterSpec::uniform(4).unwrap();
    let hp = HyperParams {
        mu: 0.1,
        alpha: 0.1,
        ..HyperParams::default()
    };
    for variant in [Variant::Discover, Variant::DiscoverQhm, Variant::DiscoverIgt] {
        let mut opt = Optimizer::new(variant, hp.clone(), spec.clone(), 2, 10).unwrap();
        let mut theta = ParamVector::from_vec(vec![1.0, -1.0]);
        let mut g = BatchGradients::empty(2, 4);
        for n in 0..4 {
            g.push(n, &ParamVector::from_vec(vec![n as f64, 1.0])).unwrap();
        }
        opt.step(&mut theta, &g, hp.mu).unwrap();
        let before = opt.state().clusters.clone().unwrap();
        let mut g = BatchGradients::empty(2, 4);
        g.push(1, &ParamVector::from_vec(vec![5.0, 5.0])).unwrap();
        g.push(3, &ParamVector::from_vec(vec![-2.0, 0.5])).unwrap();
        opt.step(&mut theta, &g, hp.mu).unwrap();
        let after = opt.state().clusters.as_ref().unwrap();
        assert_eq!(after.buffers[0], before.buffers[0], "{}", variant.name());
        assert_eq!(after.buffers[2], before.buffers[2], "{}", variant.name());
        assert_ne!(after.buffers[1], before.buffers[1]);
        assert_ne!(after.buffers[3], before.buffers[3]);
    }
}

#[test]
fn sharded_step_matches_single_aggregate() {
    let spec = ClusterSpec::uniform(3).unwrap();
    let hp = HyperParams {
        mu: 0.05,
        alpha: 0.1,
        ..HyperParams::default()
    };
    let stream = support::recorded_samples(50, 4, 3, 9);
    for variant in [Variant::Discover, Variant::DiscoverQhm, Variant::DiscoverIgt] {
        let mut one = Optimizer::new(variant, hp.clone(), spec.clone(), 4, 50).unwrap();
        let mut many = one.clone();
        let mut ta = ParamVector::zeros(4);
        let mut tb = ParamVector::zeros(4);
        for samples in &stream {
            let shards: Vec<BatchGradients> = samples
                .chunks(3)
                .map(|c| support::to_batch(c, 3))
                .collect();
            one.step(&mut ta, &support::to_batch(samples, 3), hp.mu).unwrap();
            many.step_sharded(&mut tb, &shards, hp.mu).unwrap();
        }
        assert!(support::max_abs(ta.as_slice(), tb.as_slice()) < 1e-12, "{}", variant.name());
    }
}

fn arb_reports() -> impl Strategy<Value = (Vec<(usize, usize, Vec<f64>)>, Vec<usize>)> {
    prop::collection::vec((0usize..4, 1usize..5, prop::collection::vec(-5.0f64..5.0, 3)), 1..8)
        .prop_flat_map(|r| {
            let n = r.len();
            (Just(r), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        })
}

proptest! {
    #[test]
    fn sync_is_independent_of_shard_order((raw, perm) in arb_reports()) {
        let reports: Vec<Option<ShardDelta>> = raw
            .iter()
            .map(|(n, c, d)| {
                Some(ShardDelta {
                    clusters: [(*n, (*c, ParamVector::from_vec(d.clone())))].into_iter().collect(),
                })
            })
            .collect();
        let shuffled: Vec<Option<ShardDelta>> = perm.iter().map(|&i| reports[i].clone()).collect();
        let mut base = ClusterBuffers::zeros(4, 3);
        base.buffers[2] = ParamVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut a = base.clone();
        let mut b = base;
        let rates = [0.3, 0.5, 0.7, 1.0];
        sync_buffers(&mut a, &reports, 0.1, &rates).unwrap();
        sync_buffers(&mut b, &shuffled, 0.1, &rates).unwrap();
        for n in 0..4 {
            prop_assert!(support::max_abs(a.buffers[n].as_slice(), b.buffers[n].as_slice()) < 1e-12);
        }
        prop_assert!(support::max_abs(a.gbar.as_slice(), b.gbar.as_slice()) < 1e-12);
    }

    #[test]
    fn sync_rejects_missing_shard(k in 0usize..4) {
        let mut reports: Vec<Option<ShardDelta>> = (0..4)
            .map(|_| Some(ShardDelta {
                clusters: [(0usize, (1usize, ParamVector::zeros(2)))].into_iter().collect(),
            }))
            .collect();
        reports[k] = None;
        let mut b = ClusterBuffers::zeros(2, 2);
        prop_assert!(sync_buffers(&mut b, &reports, 0.1, &[0.5, 0.5]).is_err());
    }
}
