use ndarray::{Array2, Array3};
use proptest::prelude::*;

use tact_core::ctsim::{fbp, radon, roi_mask, Filter, Geometry};
use tact_core::data::{generate_phantom, PhantomSpec};
use tact_core::eval::{hard_dice, psnr_roi, ssim_roi};
use tact_core::losses::{dice_loss, dice_score, mse_loss, task_adaptive_loss, ALL_CLASSES, DEFAULT_EPSILON};

fn image(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0..1.0f64, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn labels(n: usize) -> impl Strategy<Value = Array2<u8>> {
    prop::collection::vec(0u8..3, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn probs(n: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(0.01..1.0f64, 3 * n * n).prop_map(move |v| {
        let mut p = Array3::from_shape_vec((3, n, n), v).unwrap();
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..3).map(|c| p[[c, i, j]]).sum();
                for c in 0..3 {
                    p[[c, i, j]] /= s;
                }
            }
        }
        p
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_loss_lies_between_its_terms(
        (x, y, p, g) in (image(8), image(8), probs(8), labels(8)),
        w in 0.0..=1.0f64,
    ) {
        let m = mse_loss(&x, &y).unwrap();
        let d = dice_loss(&p, &g, DEFAULT_EPSILON).unwrap();
        let l = task_adaptive_loss(&x, &y, &p, &g, w).unwrap();
        prop_assert!(l >= m.min(d) - 1e-12 && l <= m.max(d) + 1e-12);
    }

    #[test]
    fn soft_dice_is_in_the_unit_interval((p, g) in (probs(6), labels(6))) {
        let s = dice_score(&p, &g, DEFAULT_EPSILON, &ALL_CLASSES).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0 + 1e-12);
    }

    #[test]
    fn hard_dice_is_symmetric_and_bounded((a, b) in (labels(10), labels(10))) {
        let ab = hard_dice(&a, &b, DEFAULT_EPSILON, &[1, 2]).unwrap();
        let ba = hard_dice(&b, &a, DEFAULT_EPSILON, &[1, 2]).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((hard_dice(&a, &a, DEFAULT_EPSILON, &[1, 2]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn radon_and_fbp_are_linear((x, y) in (image(16), image(16)), a in -2.0..2.0f64) {
        let g = Geometry::new(12, Geometry::min_detectors(16), 16).unwrap();
        let lhs = radon(&(&x * a + &y), &g).unwrap();
        let rx = radon(&x, &g).unwrap();
        let ry = radon(&y, &g).unwrap();
        for (l, (u, v)) in lhs.values.iter().zip(rx.values.iter().zip(ry.values.iter())) {
            prop_assert!((l - (a * u + v)).abs() <= 1e-9 * (1.0 + l.abs()));
        }
        // The unclamped reconstruction is linear as well.
        let f = tact_core::ctsim::fbp_raw(&lhs, Filter::Ramp).unwrap();
        let fx = tact_core::ctsim::fbp_raw(&rx, Filter::Ramp).unwrap();
        let fy = tact_core::ctsim::fbp_raw(&ry, Filter::Ramp).unwrap();
        for (l, (u, v)) in f.iter().zip(fx.iter().zip(fy.iter())) {
            prop_assert!((l - (a * u + v)).abs() <= 1e-9 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn roi_metrics_ignore_pixels_outside_the_mask(
        (x, r, noise) in (image(32), image(32), image(32)),
        radius in 2usize..8,
    ) {
        let mask = roi_mask(32, radius).unwrap();
        // SSIM windows reach up to 5 * sqrt(2) pixels beyond their centre.
        let far = roi_mask(32, radius + 8).unwrap();
        let outside = |keep: &Array2<bool>| Array2::from_shape_fn((32, 32), |(i, j)| {
            if keep[[i, j]] { x[[i, j]] } else { noise[[i, j]] }
        });
        prop_assert_eq!(
            psnr_roi(&x, &r, &mask, 1.0).unwrap(),
            psnr_roi(&outside(&mask), &r, &mask, 1.0).unwrap()
        );
        prop_assert_eq!(
            ssim_roi(&x, &r, &mask).unwrap(),
            ssim_roi(&outside(&far), &r, &mask).unwrap()
        );
    }

    #[test]
    fn fbp_output_stays_in_the_unit_interval(x in image(16)) {
        let g = Geometry::new(16, Geometry::min_detectors(16), 16).unwrap();
        let y = fbp(&radon(&x, &g).unwrap(), Filter::HannRamp).unwrap();
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn phantoms_are_seeded_and_well_formed(seed in any::<u64>()) {
        let spec = PhantomSpec::for_size(32);
        let (img, seg) = generate_phantom(&spec, seed).unwrap();
        prop_assert_eq!(generate_phantom(&spec, seed).unwrap(), (img.clone(), seg.clone()));
        prop_assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(seg.iter().any(|&l| l == 1) && seg.iter().any(|&l| l == 2));
        // Corners lie outside the body: air, labelled background.
        prop_assert_eq!(seg[[0, 0]], 0);
        prop_assert_eq!(img[[0, 0]], 0.0);
    }
}
