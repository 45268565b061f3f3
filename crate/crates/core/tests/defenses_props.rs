mod common;

use common::small_corpus;
use mmi_core::defenses::{augment, clip_gradient, dp_sgd_step, hflip, l2_norm, l2_penalty, DpConfig};
use mmi_core::seed;
use mmi_core::synthdata::Family;
use proptest::prelude::*;

fn grads() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..8).prop_flat_map(|dim| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 1..6))
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_bound(mut g in prop::collection::vec(-100.0f64..100.0, 1..20), c in 0.01f64..10.0) {
        clip_gradient(&mut g, c);
        prop_assert!(l2_norm(&g) <= c + 1e-9);
    }

    #[test]
    fn noiseless_unclipped_step_is_plain_mean(per_sample in grads()) {
        let bound = per_sample.iter().map(|g| l2_norm(g)).fold(0.0, f64::max) + 1.0;
        let dp = DpConfig { clip_norm: bound, noise_multiplier: 0.0, seed: 0 };
        let got = dp_sgd_step(&per_sample, &dp, &mut seed::rng(0, "dp"));
        let n = per_sample.len() as f64;
        for (j, v) in got.iter().enumerate() {
            let mean = per_sample.iter().map(|g| g[j]).sum::<f64>() / n;
            prop_assert!((v - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }

    #[test]
    fn l2_penalty_is_monotone_in_lambda(p in prop::collection::vec(-5.0f64..5.0, 1..10), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(l2_penalty(&p, lo) <= l2_penalty(&p, hi));
    }
}

#[test]
fn augmentation_contracts() {
    let pairs = small_corpus(Family::I, 20, 6);
    for (i, p) in pairs.iter().enumerate() {
        assert_eq!(hflip(&hflip(&p.image)), p.image);
        let a = augment(p, i as u64);
        assert_eq!(a, augment(p, i as u64));
        assert_eq!(a.captions, p.captions);
        assert!(a.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
