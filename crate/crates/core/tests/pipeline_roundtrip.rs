//! Cross-module flows: file formats round-tripping bit-exactly, weights
//! surviving save/load with identical inference, and the degrade → train →
//! correct path holding its invariants end to end.

use rastermend_core::harness::{correct_raster, train, TrainConfig};
use rastermend_core::losses::LossKind;
use rastermend_core::optim::OptimizerKind;
use rastermend_core::pipeline::{
    build_dataset, synth_degrade, synthetic_clean_raster, CategoryCounts, DegradeSpec,
};
use rastermend_core::raster::{
    load_raster, normalize, denormalize, save_raster, NormalizationStats,
};
use rastermend_core::unet::{build_unet, load_weights, save_weights, UNetConfig};
use rastermend_core::Tensor;

#[test]
fn raster_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.mbrf");
    let raster = synthetic_clean_raster(64, 48, 5, 3).unwrap();
    save_raster(&raster, &path).unwrap();
    let loaded = load_raster(&path).unwrap();
    assert_eq!(loaded.width(), 64);
    assert_eq!(loaded.height(), 48);
    assert_eq!(loaded.bands(), 5);
    assert_eq!(loaded.data(), raster.data());
}

#[test]
fn normalization_round_trip() {
    let raster = synthetic_clean_raster(32, 32, 3, 5).unwrap();
    let stats = NormalizationStats::from_raster(&raster).unwrap();
    let normalized = normalize(&raster, &stats).unwrap();
    for v in normalized.data() {
        assert!((0.0..=1.0).contains(v));
    }
    let back = denormalize(&normalized, &stats).unwrap();
    for (a, b) in back.data().iter().zip(raster.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn weights_round_trip_preserves_inference_bits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.unw");
    let config = UNetConfig {
        input_channels: 3,
        input_size: 32,
        depth: 2,
        base_channels: 4,
        final_convs: 2,
        seed: 9,
    };
    let model = build_unet(&config).unwrap();
    save_weights(&model, &path).unwrap();
    let loaded = load_weights(&path, Some(&config)).unwrap();

    let n = 3 * 32 * 32;
    let batch = Tensor::new(
        vec![1, 3, 32, 32],
        (0..n).map(|i| (i % 97) as f64 / 96.0).collect(),
    )
    .unwrap();
    let a = model.infer(&batch).unwrap();
    let b = loaded.infer(&batch).unwrap();
    assert_eq!(a.data(), b.data(), "weights round trip must not move outputs");
}

#[test]
fn weights_config_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.unw");
    let model = build_unet(&UNetConfig::tiny()).unwrap();
    save_weights(&model, &path).unwrap();
    let mut other = UNetConfig::tiny();
    other.base_channels *= 2;
    assert!(load_weights(&path, Some(&other)).is_err());
    assert!(load_weights(&path, None).is_ok());
}

#[test]
fn degrade_train_correct_end_to_end() {
    // one scene: degrade it, train briefly on its own patches, correct it
    let clean = synthetic_clean_raster(400, 400, 5, 77).unwrap();
    let (degraded_scene, _, _) = synth_degrade(&clean, &DegradeSpec::default()).unwrap();

    let counts = CategoryCounts {
        shadow: 2,
        glint: 2,
        both: 0,
    };
    let pairs = build_dataset(&clean, &DegradeSpec::default(), &counts, 200, 77).unwrap();
    let config = TrainConfig {
        loss: LossKind::Mse,
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e-3,
        optimizer: OptimizerKind::Adam,
        seed: 77,
        unet: UNetConfig::tiny(),
    };
    let (model, trace) = train(&pairs, &config, None).unwrap();
    assert_eq!(trace.epoch_loss.len(), 1);
    assert!(trace.epoch_loss[0].is_finite());

    let stats = NormalizationStats::from_raster(&degraded_scene).unwrap();
    let corrected = correct_raster(&model, &degraded_scene, &stats, 100).unwrap();
    assert_eq!(corrected.width(), 400);
    assert_eq!(corrected.height(), 400);
    assert_eq!(corrected.bands(), 5);
    for v in corrected.data() {
        assert!(v.is_finite());
    }

    // the whole path is deterministic
    let (model2, trace2) = train(&pairs, &config, None).unwrap();
    assert_eq!(trace.epoch_loss, trace2.epoch_loss);
    let corrected2 = correct_raster(&model2, &degraded_scene, &stats, 100).unwrap();
    assert_eq!(corrected.data(), corrected2.data());
}
