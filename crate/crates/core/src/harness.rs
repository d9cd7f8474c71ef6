//! Training loop, held-out evaluation, k-fold cross-validation, and
//! full-raster correction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{loss_value, LossKind};
use crate::metrics::{full_report_with, ssim, MetricReport, ReportParams, SsimParams};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pipeline::{
    extract_patches, kfold_split, raster_to_tensor, resize_patch, resize_raster, stitch,
    tensor_to_raster, PatchPair, MODEL_SIZE, PATCH_WINDOW,
};
use crate::raster::{denormalize, normalize, MultibandRaster, NormalizationStats};
use crate::unet::{build_unet, UNetConfig, UNetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub unet: UNetConfig,
}

fn default_loss() -> LossKind {
    LossKind::Bce
}
fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    8
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: default_loss(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: default_optimizer(),
            seed: 0,
            unet: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and > 0",
                self.learning_rate
            )));
        }
        self.unet.validate()
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Mean training loss per epoch (sample-weighted over batches).
    pub epoch_loss: Vec<f64>,
    /// Mean SSIM on the validation set after each epoch; empty without one.
    pub val_ssim: Vec<f64>,
}

/// FNV-1a over an arbitrary byte stream; gives each (loss, fold) job and each
/// epoch a decorrelated but reproducible stream seed.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &byte in *part {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

pub fn job_seed(seed: u64, loss: LossKind, fold: usize) -> u64 {
    fnv1a(&[
        &seed.to_le_bytes(),
        loss.name().as_bytes(),
        &(fold as u64).to_le_bytes(),
    ])
}

fn stack_pairs(pairs: &[&PatchPair]) -> Result<(Tensor, Tensor)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let shape = first.degraded.shape().to_vec();
    let mut dshape = vec![pairs.len()];
    dshape.extend_from_slice(&shape);
    let mut degraded = Vec::with_capacity(pairs.len() * first.degraded.len());
    let mut clean = Vec::with_capacity(degraded.capacity());
    for p in pairs {
        if p.degraded.shape() != shape || p.clean.shape() != shape {
            return Err(Error::Shape("mixed patch shapes in one batch".into()));
        }
        degraded.extend_from_slice(p.degraded.data());
        clean.extend_from_slice(p.clean.data());
    }
    Ok((
        Tensor::new(dshape.clone(), degraded)?,
        Tensor::new(dshape, clean)?,
    ))
}

/// Drop the leading batch axis of a [1,C,H,W] tensor.
fn squeeze_batch(t: &Tensor) -> Result<Tensor> {
    match t.shape() {
        [1, rest @ ..] => Tensor::new(rest.to_vec(), t.data().to_vec()),
        other => Err(Error::Shape(format!("expected batch of one, got {other:?}"))),
    }
}

fn mean_val_ssim(model: &UNetModel, val: &[PatchPair], params: &SsimParams) -> Result<f64> {
    let mut total = 0.0;
    for p in val {
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(p.degraded.shape());
        let batch = Tensor::new(batch_shape, p.degraded.data().to_vec())?;
        let pred = squeeze_batch(&model.infer(&batch)?)?;
        total += ssim(&pred, &p.clean, params)?;
    }
    Ok(total / val.len() as f64)
}

/// Train a freshly initialized U-Net on `pairs`. Returns the model and its
/// per-epoch trace. A non-finite loss aborts with a training error naming the
/// epoch and batch.
pub fn train(
    pairs: &[PatchPair],
    config: &TrainConfig,
    val: Option<&[PatchPair]>,
) -> Result<(UNetModel, TrainingTrace)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut model = build_unet(&config.unet)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut trace = TrainingTrace::default();
    let ssim_params = SsimParams::default();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
            &config.seed.to_le_bytes(),
            b"epoch",
            &(epoch as u64).to_le_bytes(),
        ]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let members: Vec<&PatchPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (degraded, clean) = stack_pairs(&members)?;
            let mut g = Graph::new();
            let input = g.leaf(degraded, false);
            let target = g.leaf(clean, false);
            let (pred, pvars) = model.forward(&mut g, input, true)?;
            let loss = loss_value(&mut g, config.loss, pred, target)?;
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_idx,
                    msg: format!("loss became non-finite ({loss_val})"),
                });
            }
            g.backward(loss)?;
            let grads: Result<Vec<Tensor>> = pvars
                .iter()
                .map(|&pv| {
                    g.grad(pv).ok_or_else(|| {
                        Error::State("parameter missing a gradient after backward".into())
                    })
                })
                .collect();
            let grads = grads?;
            for (i, grad) in grads.iter().enumerate() {
                if grad.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Training {
                        epoch,
                        batch: batch_idx,
                        msg: format!("gradient for parameter slot {i} became non-finite"),
                    });
                }
            }
            let mut params = model.params_mut();
            opt.step(&mut params, &grads)?;
            loss_sum += loss_val * chunk.len() as f64;
        }
        trace.epoch_loss.push(loss_sum / pairs.len() as f64);
        if let Some(val) = val {
            if !val.is_empty() {
                trace.val_ssim.push(mean_val_ssim(&model, val, &ssim_params)?);
            }
        }
    }
    Ok((model, trace))
}

/// Mean metric report of a model over held-out pairs.
pub fn evaluate_with(
    model: &UNetModel,
    pairs: &[PatchPair],
    params: &ReportParams,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(p.degraded.shape());
        let batch = Tensor::new(batch_shape, p.degraded.data().to_vec())?;
        let pred = squeeze_batch(&model.infer(&batch)?)?;
        reports.push(full_report_with(&pred, &p.clean, params)?);
    }
    Ok(MetricReport::mean_of(&reports))
}

pub fn evaluate(model: &UNetModel, pairs: &[PatchPair]) -> Result<MetricReport> {
    evaluate_with(model, pairs, &ReportParams::default())
}

/// One (loss, fold) cell of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricReport,
    pub trace: TrainingTrace,
}

/// All folds for one loss plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEntry {
    pub loss: LossKind,
    pub folds: Vec<FoldResult>,
    pub mean: MetricReport,
    pub stddev: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub entries: Vec<CvEntry>,
}

impl CvReport {
    pub fn entry(&self, loss: LossKind) -> Option<&CvEntry> {
        self.entries.iter().find(|e| e.loss == loss)
    }
}

/// k-fold cross-validation over one or more losses. Each (loss, fold) job
/// trains a fresh model on the other k-1 folds with its own derived seed and
/// evaluates on the held-out fold, so results do not depend on scheduling.
pub fn cross_validate(
    pairs: &[PatchPair],
    losses: &[LossKind],
    k: usize,
    base: &TrainConfig,
) -> Result<CvReport> {
    cross_validate_with(pairs, losses, k, base, &ReportParams::default())
}

/// [`cross_validate`] with explicit evaluation knobs (e.g. global SSIM).
pub fn cross_validate_with(
    pairs: &[PatchPair],
    losses: &[LossKind],
    k: usize,
    base: &TrainConfig,
    report_params: &ReportParams,
) -> Result<CvReport> {
    base.validate()?;
    if losses.is_empty() {
        return Err(Error::Config("no losses selected".into()));
    }
    if k < 2 {
        return Err(Error::Config("cross-validation needs k >= 2".into()));
    }
    let assignment = kfold_split(pairs, k, base.seed)?;
    let jobs: Vec<(LossKind, usize)> = losses
        .iter()
        .flat_map(|&loss| (0..k).map(move |fold| (loss, fold)))
        .collect();
    let results: Result<Vec<FoldResult>> = jobs
        .par_iter()
        .map(|&(loss, fold)| {
            let held: Vec<PatchPair> = assignment
                .fold_members(fold)
                .into_iter()
                .map(|i| pairs[i].clone())
                .collect();
            let rest: Vec<PatchPair> = (0..pairs.len())
                .filter(|&i| assignment.folds[i] != fold)
                .map(|i| pairs[i].clone())
                .collect();
            let seed = job_seed(base.seed, loss, fold);
            let mut config = base.clone();
            config.loss = loss;
            config.seed = seed;
            config.unet.seed = seed;
            let (model, trace) = train(&rest, &config, None)?;
            let report = evaluate_with(&model, &held, report_params)?;
            Ok(FoldResult {
                fold,
                report,
                trace,
            })
        })
        .collect();
    let results = results?;
    let entries = losses
        .iter()
        .enumerate()
        .map(|(li, &loss)| {
            let folds: Vec<FoldResult> = results[li * k..(li + 1) * k].to_vec();
            let reports: Vec<MetricReport> = folds.iter().map(|f| f.report).collect();
            CvEntry {
                loss,
                mean: MetricReport::mean_of(&reports),
                stddev: MetricReport::stddev_of(&reports),
                folds,
            }
        })
        .collect();
    Ok(CvReport {
        k,
        seed: base.seed,
        entries,
    })
}

/// Correct a full raster: normalize, sweep 200x200 windows, run each through
/// the model at 128x128, resize predictions back, average overlaps, and
/// denormalize. Pixels no window covers pass through unchanged.
pub fn correct_raster(
    model: &UNetModel,
    raster: &MultibandRaster,
    stats: &NormalizationStats,
    stride: usize,
) -> Result<MultibandRaster> {
    let cfg = model.config();
    if raster.bands() != cfg.input_channels {
        return Err(Error::Shape(format!(
            "raster has {} bands but the model expects {}",
            raster.bands(),
            cfg.input_channels
        )));
    }
    if cfg.input_size != MODEL_SIZE {
        return Err(Error::Config(format!(
            "correction requires a {MODEL_SIZE}-pixel model input, got {}",
            cfg.input_size
        )));
    }
    let normalized = normalize(raster, stats)?;
    let windows = extract_patches(&normalized, PATCH_WINDOW, stride)?;
    let mut corrected = Vec::with_capacity(windows.len());
    for (offset, patch) in windows {
        let small = resize_patch(&patch)?;
        let t = raster_to_tensor(&small);
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(t.shape());
        let batch = Tensor::new(batch_shape, t.data().to_vec())?;
        let pred = squeeze_batch(&model.infer(&batch)?)?;
        let pred_raster = tensor_to_raster(&pred)?;
        let full = resize_raster(&pred_raster, PATCH_WINDOW, PATCH_WINDOW)?;
        corrected.push((offset, full));
    }
    let stitched = stitch(&corrected, &normalized)?;
    denormalize(&stitched, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Category;
    use rand::Rng;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            loss: LossKind::Mse,
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 7,
            unet: UNetConfig {
                input_channels: 2,
                input_size: 16,
                depth: 1,
                base_channels: 2,
                final_convs: 2,
                seed: 7,
            },
        }
    }

    fn toy_pairs(n: usize, seed: u64) -> Vec<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let clean: Vec<f64> = (0..2 * 16 * 16).map(|_| rng.gen_range(0.2..0.8)).collect();
                let degraded: Vec<f64> = clean.iter().map(|v| (v * 0.6).max(0.05)).collect();
                PatchPair {
                    degraded: Tensor::new(vec![2, 16, 16], degraded).unwrap(),
                    clean: Tensor::new(vec![2, 16, 16], clean).unwrap(),
                    category: if i % 2 == 0 {
                        Category::Shadow
                    } else {
                        Category::Glint
                    },
                    source_offset: (0, 0),
                }
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.epochs = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = toy_config();
        c.learning_rate = -1.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = toy_config();
        c.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        assert!(toy_config().validate().is_ok());
    }

    #[test]
    fn training_reduces_loss_and_traces_epochs() {
        let pairs = toy_pairs(4, 3);
        let mut config = toy_config();
        config.epochs = 8;
        let (_, trace) = train(&pairs, &config, None).unwrap();
        assert_eq!(trace.epoch_loss.len(), 8);
        assert!(trace.val_ssim.is_empty());
        assert!(
            trace.epoch_loss.last().unwrap() < trace.epoch_loss.first().unwrap(),
            "{:?}",
            trace.epoch_loss
        );
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = toy_pairs(4, 3);
        let config = toy_config();
        let (m1, t1) = train(&pairs, &config, None).unwrap();
        let (m2, t2) = train(&pairs, &config, None).unwrap();
        assert_eq!(t1, t2);
        let mut w1 = Vec::new();
        m1.visit_params(&mut |_, t| w1.push(t.clone()));
        let mut w2 = Vec::new();
        m2.visit_params(&mut |_, t| w2.push(t.clone()));
        assert_eq!(w1, w2);
    }

    #[test]
    fn validation_trace_records_every_epoch() {
        let pairs = toy_pairs(4, 3);
        let val = toy_pairs(2, 9);
        let config = toy_config();
        let (_, trace) = train(&pairs, &config, Some(&val)).unwrap();
        assert_eq!(trace.val_ssim.len(), config.epochs);
        for v in &trace.val_ssim {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn nan_input_is_a_training_error() {
        let mut pairs = toy_pairs(2, 3);
        pairs[0].degraded.data_mut()[5] = f64::NAN;
        let err = train(&pairs, &toy_config(), None).unwrap_err();
        match err {
            Error::Training { epoch, .. } => assert_eq!(epoch, 0),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_reports_finite_metrics() {
        let pairs = toy_pairs(3, 5);
        let (model, _) = train(&pairs, &toy_config(), None).unwrap();
        let report = evaluate(&model, &pairs).unwrap();
        for v in report.values() {
            assert!(v.is_finite());
        }
        assert!(report.ssim > 0.0 && report.ssim <= 1.0);
    }

    #[test]
    fn job_seeds_are_distinct() {
        let mut seeds = std::collections::HashSet::new();
        for loss in LossKind::ALL {
            for fold in 0..10 {
                seeds.insert(job_seed(42, loss, fold));
            }
        }
        assert_eq!(seeds.len(), 50);
    }

    #[test]
    fn cross_validation_shape_and_determinism() {
        let pairs = toy_pairs(6, 11);
        let mut config = toy_config();
        config.epochs = 1;
        let losses = [LossKind::Mse, LossKind::Mae];
        let r1 = cross_validate(&pairs, &losses, 2, &config).unwrap();
        let r2 = cross_validate(&pairs, &losses, 2, &config).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.entries.len(), 2);
        for entry in &r1.entries {
            assert_eq!(entry.folds.len(), 2);
            for f in &entry.folds {
                assert_eq!(f.trace.epoch_loss.len(), 1);
            }
            for v in entry.mean.values().iter().chain(&entry.stddev.values()) {
                assert!(v.is_finite());
            }
        }
        assert!(r1.entry(LossKind::Mse).is_some());
        assert!(r1.entry(LossKind::Bce).is_none());
    }

    #[test]
    fn cross_validation_rejects_bad_k() {
        let pairs = toy_pairs(6, 11);
        assert!(matches!(
            cross_validate(&pairs, &[LossKind::Mse], 1, &toy_config()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn correct_raster_round_trip_shape() {
        let raster = crate::pipeline::synthetic_clean_raster(200, 200, 5, 21).unwrap();
        let stats = NormalizationStats::from_raster(&raster).unwrap();
        let model = build_unet(&UNetConfig::tiny()).unwrap();
        let out = correct_raster(&model, &raster, &stats, 200).unwrap();
        assert_eq!(
            (out.width(), out.height(), out.bands()),
            (raster.width(), raster.height(), raster.bands())
        );
        let again = correct_raster(&model, &raster, &stats, 200).unwrap();
        assert_eq!(out.data(), again.data());
    }

    #[test]
    fn correct_raster_band_mismatch() {
        let raster = crate::pipeline::synthetic_clean_raster(200, 200, 3, 21).unwrap();
        let stats = NormalizationStats::from_raster(&raster).unwrap();
        let model = build_unet(&UNetConfig::tiny()).unwrap();
        assert!(matches!(
            correct_raster(&model, &raster, &stats, 200),
            Err(Error::Shape(_))
        ));
    }
}
