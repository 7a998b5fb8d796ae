use pdfnet_core::metrics::{self, reference, Sample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<bool>) {
    let density = rng.gen_range(0.05..0.8);
    let gt: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    let style = rng.gen_range(0..3);
    let pred = (0..h * w)
        .map(|i| match style {
            // continuous values
            0 => rng.gen_range(0.0..=1.0),
            // 8-bit levels, which land exactly on thresholds
            1 => rng.gen_range(0..=255) as f64 / 255.0,
            // noisy copy of the mask
            _ => {
                let base = if gt[i] { 0.8 } else { 0.15 };
                (base + rng.gen_range(-0.15..0.15f64)).clamp(0.0, 1.0)
            }
        })
        .collect();
    (pred, gt)
}

#[test]
fn fast_paths_match_reference_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for trial in 0..150 {
        let (h, w) = if trial < 100 { (16, 16) } else { (rng.gen_range(1..20), rng.gen_range(1..20)) };
        let (pred, gt) = random_instance(&mut rng, h, w);
        let s = Sample::new(&pred, &gt, h, w).unwrap();
        let curve = metrics::f_measure_curve(&s);
        for k in 0..256 {
            assert_eq!(curve.f[k], reference::f_at_level(&s, k), "trial {trial} level {k}");
        }
        assert_eq!(curve.max(), reference::f_max(&s));
        assert!((metrics::mae(&s) - reference::mae(&s)).abs() < 1e-12);
        let pairs = [
            ("s", metrics::s_measure(&s), reference::s_measure(&s)),
            ("e", metrics::e_measure(&s), reference::e_measure(&s)),
            ("wf", metrics::weighted_f_measure(&s), reference::weighted_f_measure(&s)),
        ];
        for (name, fast, slow) in pairs {
            assert!((fast - slow).abs() <= 1e-9, "trial {trial} {name}: {fast} vs {slow}");
            assert!((0.0..=1.0).contains(&fast), "trial {trial} {name} = {fast}");
        }
    }
}

#[test]
fn degenerate_masks_follow_reference() {
    for gt_value in [false, true] {
        for c in [0.0, 0.2, 0.5, 1.0] {
            let pred = vec![c; 16];
            let gt = vec![gt_value; 16];
            let s = Sample::new(&pred, &gt, 4, 4).unwrap();
            assert_eq!(metrics::s_measure(&s), reference::s_measure(&s));
            assert_eq!(metrics::e_measure(&s), reference::e_measure(&s));
            assert_eq!(metrics::weighted_f_measure(&s), reference::weighted_f_measure(&s));
        }
    }
}

#[test]
fn constant_half_prediction_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let gt: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.4)).collect();
        let pred = vec![0.5; 64];
        let s = Sample::new(&pred, &gt, 8, 8).unwrap();
        assert!((metrics::s_measure(&s) - reference::s_measure(&s)).abs() < 1e-12);
        assert!((metrics::e_measure(&s) - reference::e_measure(&s)).abs() < 1e-12);
    }
}

fn map_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..40).prop_flat_map(|n| (prop::collection::vec(0.0..=1.0f64, n), prop::collection::vec(any::<bool>(), n)))
}

proptest! {
    #[test]
    fn permutation_leaves_mae_and_fixed_threshold_f_unchanged(
        (pred, gt) in map_strategy(),
        seed in any::<u64>(),
        k in 0usize..256,
    ) {
        let n = pred.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let p2: Vec<f64> = order.iter().map(|&i| pred[i]).collect();
        let g2: Vec<bool> = order.iter().map(|&i| gt[i]).collect();
        let a = Sample::new(&pred, &gt, 1, n).unwrap();
        let b = Sample::new(&p2, &g2, 1, n).unwrap();
        prop_assert!((metrics::mae(&a) - metrics::mae(&b)).abs() < 1e-12);
        prop_assert_eq!(metrics::f_measure_curve(&a).f[k], metrics::f_measure_curve(&b).f[k]);
    }

    #[test]
    fn mae_complement_symmetry((pred, gt) in map_strategy()) {
        let n = pred.len();
        let cp: Vec<f64> = pred.iter().map(|v| 1.0 - v).collect();
        let cg: Vec<bool> = gt.iter().map(|g| !g).collect();
        let a = metrics::mae(&Sample::new(&pred, &gt, 1, n).unwrap());
        let b = metrics::mae(&Sample::new(&cp, &cg, 1, n).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn moving_towards_the_mask_never_lowers_f_max((pred, gt) in map_strategy(), step in 0.0..=1.0f64) {
        let n = pred.len();
        // each pixel moves towards its label, so it never crosses a threshold the wrong way
        let better: Vec<f64> = pred
            .iter()
            .zip(&gt)
            .map(|(&p, &g)| if g { p + step * (1.0 - p) } else { p - step * p })
            .collect();
        let a = metrics::f_measure_curve(&Sample::new(&pred, &gt, 1, n).unwrap()).max();
        let b = metrics::f_measure_curve(&Sample::new(&better, &gt, 1, n).unwrap()).max();
        prop_assert!(b >= a, "{} < {}", b, a);
    }

    #[test]
    fn every_metric_stays_in_unit_interval((pred, gt) in map_strategy()) {
        let n = pred.len();
        let s = Sample::new(&pred, &gt, 1, n).unwrap();
        for v in [
            metrics::mae(&s),
            metrics::f_measure_curve(&s).max(),
            metrics::weighted_f_measure(&s),
            metrics::s_measure(&s),
            metrics::e_measure(&s),
        ] {
            prop_assert!((0.0..=1.0).contains(&v), "{}", v);
        }
    }
}
