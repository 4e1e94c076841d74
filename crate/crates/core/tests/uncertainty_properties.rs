use geofed::numerics::{cosine, SeededRng};
use geofed::uncertainty::{lap_u, precision_weights, summarize, UncertaintySummary, WeightMode};
use proptest::prelude::*;

fn vectors(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| rng.gaussian_vec(d, 1.0)).collect()
}

fn summary(node_id: usize, mean_inv_u: f64) -> UncertaintySummary {
    UncertaintySummary {
        node_id,
        mean_u: 1.0 / mean_inv_u,
        mean_inv_u,
        n_samples: 64,
        clamped_fraction: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lap_stays_in_unit_interval(seed in any::<u64>(), b in 1usize..12, d in 2usize..10) {
        let anchors = vectors(seed, b, d);
        let z = vectors(seed ^ 1, 1, d).remove(0);
        let refs: Vec<&[f64]> = anchors.iter().map(|a| a.as_slice()).collect();
        let u = lap_u(&z, &refs).unwrap();
        prop_assert!((0.0..=1.0).contains(&u));
        let best = refs.iter().map(|a| cosine(&z, a).unwrap()).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((u - (1.0 - best) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn extra_anchor_never_raises_u(seed in any::<u64>(), b in 1usize..8) {
        let anchors = vectors(seed, b + 1, 5);
        let z = vectors(seed ^ 7, 1, 5).remove(0);
        let all: Vec<&[f64]> = anchors.iter().map(|a| a.as_slice()).collect();
        let fewer = lap_u(&z, &all[..b]).unwrap();
        prop_assert!(lap_u(&z, &all).unwrap() <= fewer);
    }

    #[test]
    fn moving_toward_an_anchor_lowers_u(seed in any::<u64>(), t in 0.05f64..0.95) {
        // z(t) = (1 - t) z + t a has strictly larger cosine to a than z does
        // unless z is already parallel to a.
        let v = vectors(seed, 2, 4);
        let (a, z) = (&v[0], &v[1]);
        let closer: Vec<f64> = z.iter().zip(a).map(|(zi, ai)| (1.0 - t) * zi + t * ai).collect();
        prop_assume!(cosine(z, a).unwrap() < 0.999);
        prop_assert!(lap_u(&closer, &[a]).unwrap() < lap_u(z, &[a]).unwrap());
    }

    #[test]
    fn weights_are_normalized_and_order_preserving(
        inv in prop::collection::vec(1.0f64..1000.0, 1..64),
    ) {
        let summaries: Vec<_> = inv.iter().enumerate().map(|(i, &v)| summary(i, v)).collect();
        let w = precision_weights(&summaries, WeightMode::MeanInvU).unwrap();
        prop_assert!((w.total() - 1.0).abs() < 1e-12);
        for (i, a) in inv.iter().enumerate() {
            let pa = w.get(i).unwrap();
            prop_assert!(pa > 0.0);
            for (j, b) in inv.iter().enumerate() {
                if a > b {
                    prop_assert!(pa > w.get(j).unwrap());
                }
            }
        }
    }

    #[test]
    fn summary_respects_clamp(u in prop::collection::vec(0.0f64..=1.0, 1..50), u_min in 1e-4f64..0.1) {
        let s = summarize(0, &u, u.len() as u64, u_min).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.mean_u));
        prop_assert!(s.mean_inv_u >= 1.0 - 1e-12 && s.mean_inv_u <= 1.0 / u_min + 1e-9);
        let expect = u.iter().filter(|&&x| x < u_min).count() as f64 / u.len() as f64;
        prop_assert_eq!(s.clamped_fraction, expect);
    }
}

#[test]
fn equal_summaries_give_exactly_uniform_weights() {
    for k in 1..=16 {
        let summaries: Vec<_> = (0..k).map(|i| summary(i, 3.7)).collect();
        let w = precision_weights(&summaries, WeightMode::MeanInvU).unwrap();
        for (_, p) in &w.weights {
            assert!((p - 1.0 / k as f64).abs() < 1e-15);
        }
    }
}
