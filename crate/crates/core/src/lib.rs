//! Cloud-shadow and sun-glint correction for 5-band multispectral rasters:
//! patch preparation, U-Net training under five selectable losses,
//! seven-metric evaluation under k-fold cross-validation, and full-raster
//! correction by patch inference and stitching.

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod unet;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use harness::{
    correct_raster, cross_validate, cross_validate_with, evaluate, evaluate_with, train, CvEntry,
    CvReport, FoldResult, TrainConfig, TrainingTrace,
};
pub use losses::LossKind;
pub use metrics::{full_report, full_report_with, MetricReport, ReportParams, SsimParams};
pub use optim::{Optimizer, OptimizerKind};
pub use pipeline::{DegradeSpec, FoldAssignment, PatchPair};
pub use raster::{MultibandRaster, NormalizationStats};
pub use unet::{UNetConfig, UNetModel};
