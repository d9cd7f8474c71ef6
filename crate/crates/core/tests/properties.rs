//! Property-based invariants over randomized inputs.

use proptest::prelude::*;
use rastermend_core::autodiff::Tensor;
use rastermend_core::losses::{loss_scalar, LossKind};
use rastermend_core::metrics::{accuracy, dice, mse, rmse, ssim, DiceMode, SsimParams};
use rastermend_core::pipeline::{resize_raster, stitch, synthetic_clean_raster};
use rastermend_core::raster::{load_raster, save_raster, MultibandRaster};

fn unit_tensor(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..=1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn raster_files_round_trip(
        w in 1usize..12,
        h in 1usize..12,
        b in 1usize..4,
        seed in 0u64..1000,
    ) {
        let raster = synthetic_clean_raster(w.max(2), h.max(2), b, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.mbrf");
        save_raster(&raster, &path).unwrap();
        let loaded = load_raster(&path).unwrap();
        prop_assert_eq!(loaded.data(), raster.data());
        prop_assert_eq!(loaded.width(), raster.width());
        prop_assert_eq!(loaded.height(), raster.height());
        prop_assert_eq!(loaded.bands(), raster.bands());
    }

    #[test]
    fn resize_respects_input_range(
        seed in 0u64..500,
        ow in 2usize..40,
        oh in 2usize..40,
    ) {
        let src = synthetic_clean_raster(24, 24, 2, seed).unwrap();
        let lo = src.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = src.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let out = resize_raster(&src, ow, oh).unwrap();
        prop_assert_eq!(out.width(), ow);
        prop_assert_eq!(out.height(), oh);
        for v in out.data() {
            prop_assert!(*v >= lo - 1e-5 && *v <= hi + 1e-5);
        }
    }

    #[test]
    fn pointwise_metric_ranges(pd in unit_tensor(64), td in unit_tensor(64)) {
        let p = Tensor::new(vec![8, 8], pd).unwrap();
        let t = Tensor::new(vec![8, 8], td).unwrap();
        let m = mse(&p, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((rmse(&p, &t).unwrap() - m.sqrt()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&accuracy(&p, &t, 0.05).unwrap()));
        for mode in [DiceMode::Soft, DiceMode::Thresholded] {
            let d = dice(&p, &t, mode).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }

    #[test]
    fn metric_symmetries(pd in unit_tensor(64), td in unit_tensor(64)) {
        let p = Tensor::new(vec![8, 8], pd).unwrap();
        let t = Tensor::new(vec![8, 8], td).unwrap();
        prop_assert_eq!(mse(&p, &t).unwrap(), mse(&t, &p).unwrap());
        prop_assert_eq!(
            accuracy(&p, &t, 0.1).unwrap(),
            accuracy(&t, &p, 0.1).unwrap()
        );
        prop_assert_eq!(
            dice(&p, &t, DiceMode::Thresholded).unwrap(),
            dice(&t, &p, DiceMode::Thresholded).unwrap()
        );
    }

    #[test]
    fn ssim_bounded_and_symmetric(pd in unit_tensor(256), td in unit_tensor(256)) {
        let p = Tensor::new(vec![16, 16], pd).unwrap();
        let t = Tensor::new(vec![16, 16], td).unwrap();
        let params = SsimParams::default();
        let a = ssim(&p, &t, &params).unwrap();
        let b = ssim(&t, &p, &params).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative_and_zero_at_identity(pd in unit_tensor(36)) {
        let p = Tensor::new(vec![6, 6], pd).unwrap();
        for kind in [LossKind::Mse, LossKind::Mae, LossKind::Mape] {
            let v = loss_scalar(kind, &p, &p).unwrap();
            prop_assert!(v.abs() < 1e-9, "{:?} at identity: {}", kind, v);
        }
        for kind in LossKind::ALL {
            let v = loss_scalar(kind, &p, &p).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite(), "{:?}: {}", kind, v);
        }
    }

    #[test]
    fn loss_orders_better_predictions(td in unit_tensor(36), shift in 0.05f64..0.3) {
        let t = Tensor::new(vec![6, 6], td).unwrap();
        let near = Tensor::new(
            vec![6, 6],
            t.data().iter().map(|v| (v + shift / 4.0).clamp(0.0, 1.0)).collect(),
        ).unwrap();
        let far = Tensor::new(
            vec![6, 6],
            t.data().iter().map(|v| (v + shift).clamp(0.0, 1.0)).collect(),
        ).unwrap();
        // require a real separation to avoid degenerate all-clamped cases
        let sep: f64 = near
            .data()
            .iter()
            .zip(far.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        prop_assume!(sep > 0.5);
        for kind in [LossKind::Mse, LossKind::Mae] {
            let ln = loss_scalar(kind, &near, &t).unwrap();
            let lf = loss_scalar(kind, &far, &t).unwrap();
            prop_assert!(ln < lf, "{:?}: near {} vs far {}", kind, ln, lf);
        }
    }

    #[test]
    fn stitch_identity_on_exact_tiling(seed in 0u64..200) {
        let base = synthetic_clean_raster(60, 60, 2, seed).unwrap();
        let patches = rastermend_core::pipeline::extract_patches(&base, 20, 20).unwrap();
        prop_assert_eq!(patches.len(), 9);
        let out = stitch(&patches, &base).unwrap();
        for (a, b) in out.data().iter().zip(base.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn raster_rejects_non_finite(pos in 0usize..16) {
        let mut data = vec![0.5f32; 16];
        data[pos] = f32::NAN;
        prop_assert!(MultibandRaster::new(4, 4, 1, data).is_err());
    }
}
