//! Property tests for the fusion simplex, the fusion operator and the
//! distribution metrics.

use proptest::prelude::*;

use layerfuse::analysis::{js_similarity, semantic_stats, wasserstein1, STATS_EPS};
use layerfuse::numerics::ParamSet;
use layerfuse::routing::{
    fuse, gate_logits, weights_from_logits, FusionWeights, Gate, LayerBank, StrategyConfig, StrategyKind, WeightProfile,
};

fn simplex(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len)
        .prop_filter("needs mass", |w| w.iter().sum::<f64>() > 1e-3)
        .prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
}

fn simplex_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| (simplex(n..=n), simplex(n..=n)))
}

fn simplex_triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| (simplex(n..=n), simplex(n..=n), simplex(n..=n)))
}

fn bank(layers: usize, tokens: usize, channels: usize) -> impl Strategy<Value = LayerBank> {
    prop::collection::vec(-3.0f64..3.0, layers * tokens * channels)
        .prop_map(move |d| LayerBank::new(layers, tokens, channels, d).unwrap())
}

proptest! {
    #[test]
    fn gate_weights_stay_on_the_simplex(
        kind in 0usize..6,
        layers in 2usize..12,
        blocks in 1usize..5,
        t in 0.0f64..=1.0,
        jitter in prop::collection::vec(-4.0f64..4.0, 64),
        seed in any::<u64>(),
    ) {
        let kind = StrategyKind::ALL[kind];
        let mut params = ParamSet::<f64>::new();
        let cfg = StrategyConfig { kind, gate_embed_dim: 4 };
        let gate = Gate::register(&mut params, &cfg, layers, blocks, seed).unwrap();
        for p in params.iter_mut() {
            for (v, j) in p.data.iter_mut().zip(jitter.iter().cycle()) {
                *v += j;
            }
        }
        for d in 1..=blocks {
            let w = weights_from_logits(kind, &gate_logits(&gate, &params, t, d).unwrap(), layers).unwrap();
            prop_assert!((w.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.0.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }

    #[test]
    fn fuse_is_linear_in_the_weights((l, b, w) in (2usize..6).prop_flat_map(|l| (Just(l), bank(l, 3, 5), simplex(l..=l)))) {
        let fused = fuse(&b, &FusionWeights(w.clone())).unwrap();
        let mut expected = vec![0.0; 15];
        for (i, &a) in w.iter().enumerate() {
            let mut hot = vec![0.0; l];
            hot[i] = 1.0;
            let single = fuse(&b, &FusionWeights(hot)).unwrap();
            for (e, s) in expected.iter_mut().zip(single.data()) {
                *e += a * s;
            }
        }
        for (x, y) in fused.data().iter().zip(&expected) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_rows_are_bounded_by_the_normalized_layers(b in bank(4, 2, 6), w in simplex(4..=4)) {
        // A convex combination never leaves the per-coordinate hull.
        let fused = fuse(&b, &FusionWeights(w)).unwrap();
        let norm = b.normalized();
        for (i, &x) in fused.data().iter().enumerate() {
            let vals = (0..4).map(|l| norm[l * 12 + i]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
        }
    }

    #[test]
    fn semantic_stats_are_bounded(w in simplex(1..=40)) {
        let s = semantic_stats(&w, STATS_EPS).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.center));
        prop_assert!(s.dispersion >= 0.0 && s.dispersion <= 0.25 + 1e-12);
        prop_assert!(s.dispersion <= s.center * (1.0 - s.center) + 1e-9);
    }

    #[test]
    fn js_similarity_is_symmetric_and_bounded((p, q) in simplex_pair()) {
        let a = js_similarity(&p, &q).unwrap();
        prop_assert_eq!(a, js_similarity(&q, &p).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((js_similarity(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_is_a_metric((p, q, r) in simplex_triple()) {
        let d = |a: &[f64], b: &[f64]| wasserstein1(a, b).unwrap();
        prop_assert_eq!(d(&p, &p), 0.0);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-15);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
        prop_assert!(d(&p, &q) <= 1.0 + 1e-12);
    }

    #[test]
    fn weight_profiles_round_trip_through_csv(w in prop::collection::vec(simplex(3..=3), 6)) {
        let profile = WeightProfile {
            kind: StrategyKind::Joint,
            layers: 3,
            times: vec![0.0, 0.5, 1.0],
            blocks: vec![1, 2],
            weights: w.concat(),
        };
        let mut buf = Vec::new();
        profile.write_csv(&mut buf).unwrap();
        let back = WeightProfile::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, profile);
    }
}
