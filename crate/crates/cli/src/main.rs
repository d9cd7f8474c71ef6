//! Command-line front end: synthetic scene degradation, dataset assembly,
//! training, cross-validation, full-raster correction, and report rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rastermend_core::harness::{
    correct_raster, cross_validate_with, train, CvReport, TrainConfig,
};
use rastermend_core::losses::LossKind;
use rastermend_core::metrics::ReportParams;
use rastermend_core::pipeline::{
    build_dataset, kfold_split, load_dataset, save_dataset, synth_degrade,
    synthetic_clean_raster, CategoryCounts, DegradeSpec,
};
use rastermend_core::raster::{load_raster, save_raster, MultibandRaster, NormalizationStats};
use rastermend_core::report::{long_csv, summary_table_csv, write_report_files};
use rastermend_core::unet::{load_weights, save_weights};
use rastermend_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rastermend",
    version,
    about = "Cloud-shadow and sun-glint correction for 5-band rasters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply synthetic shadow seams and glint blobs to a clean raster
    Synth(SynthArgs),
    /// Build a paired training dataset with a fold manifest
    Dataset(DatasetArgs),
    /// Train one model and save its weights
    Train(TrainArgs),
    /// K-fold cross-validation over one or more losses
    Cv(CvArgs),
    /// Correct a full raster with trained weights
    Correct(CorrectArgs),
    /// Render CSV tables and SVG plots from a cross-validation report
    Report(ReportArgs),
}

#[derive(Args)]
struct SceneSource {
    /// Clean input raster (MBRF); omit to generate a synthetic scene
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generated scene width (when --input is omitted)
    #[arg(long, default_value_t = 1400)]
    width: usize,
    /// Generated scene height (when --input is omitted)
    #[arg(long, default_value_t = 1400)]
    height: usize,
    /// Generated scene band count (when --input is omitted)
    #[arg(long, default_value_t = 5)]
    bands: usize,
}

impl SceneSource {
    fn load(&self, seed: u64) -> Result<MultibandRaster> {
        match &self.input {
            Some(path) => load_raster(path),
            None => synthetic_clean_raster(self.width, self.height, self.bands, seed),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    scene: SceneSource,
    /// Degradation spec JSON; defaults apply when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    /// RNG seed (overrides the spec's seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Output degraded raster (MBRF)
    #[arg(long)]
    output: PathBuf,
    /// Also save the untouched clean raster (useful with generated scenes)
    #[arg(long)]
    clean_out: Option<PathBuf>,
    /// Output shadow mask raster (0/1 single band)
    #[arg(long)]
    shadow_mask: Option<PathBuf>,
    /// Output glint mask raster (0/1 single band)
    #[arg(long)]
    glint_mask: Option<PathBuf>,
    /// Write normalization stats of the degraded raster as JSON
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[command(flatten)]
    scene: SceneSource,
    /// Degradation spec JSON; defaults apply when omitted
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Pair counts as shadow,glint,both
    #[arg(long, default_value = "52,49,15")]
    counts: String,
    /// Window sweep stride in pixels
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Fold count recorded in the manifest
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Master seed for scene, windows, degradations, and folds
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for patches and manifest.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `dataset`
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON (TrainConfig fields); flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output weights file
    #[arg(long)]
    weights_out: PathBuf,
    /// Optional JSON file for the per-epoch training trace
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    /// Dataset directory produced by `dataset`
    #[arg(long)]
    data: PathBuf,
    /// Training config JSON (TrainConfig fields); flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of folds
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Comma-separated losses to compare
    #[arg(long, default_value = "bce,cce,mse,mae,mape")]
    losses: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate SSIM with global statistics instead of 11x11 windows
    #[arg(long)]
    ssim_global: bool,
    /// Output directory for report.json, summary_table.csv, folds.csv
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CorrectArgs {
    /// Trained weights file
    #[arg(long)]
    weights: PathBuf,
    /// Input raster (MBRF)
    #[arg(long)]
    input: PathBuf,
    /// Output corrected raster (MBRF)
    #[arg(long)]
    output: PathBuf,
    /// Window sweep stride in pixels
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Normalization stats JSON; computed from the input when omitted
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Cross-validation report JSON written by `cv`
    #[arg(long)]
    report: PathBuf,
    /// Output directory for CSVs and SVGs
    #[arg(long)]
    out_dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::State(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_spec(path: &Option<PathBuf>) -> Result<DegradeSpec> {
    match path {
        Some(p) => read_json(p, "degradation spec"),
        None => Ok(DegradeSpec::default()),
    }
}

fn parse_counts(s: &str) -> Result<CategoryCounts> {
    let parts: Vec<&str> = s.split(',').collect();
    let [shadow, glint, both] = parts.as_slice() else {
        return Err(Error::Config(format!(
            "counts must be shadow,glint,both — got '{s}'"
        )));
    };
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad count '{v}'")))
    };
    Ok(CategoryCounts {
        shadow: parse(shadow)?,
        glint: parse(glint)?,
        both: parse(both)?,
    })
}

fn parse_losses(s: &str) -> Result<Vec<LossKind>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let kind = LossKind::parse(part.trim())?;
        if !out.contains(&kind) {
            out.push(kind);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no losses given".into()));
    }
    Ok(out)
}

fn merged_config(
    config: &Option<PathBuf>,
    loss: &Option<String>,
    epochs: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match config {
        Some(path) => read_json(path, "training config")?,
        None => TrainConfig::default(),
    };
    if let Some(loss) = loss {
        cfg.loss = LossKind::parse(loss)?;
    }
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    if let Some(batch) = batch {
        cfg.batch_size = batch;
    }
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.unet.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = load_spec(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let clean = args.scene.load(spec.seed)?;
    let (degraded, shadow, glint) = synth_degrade(&clean, &spec)?;
    save_raster(&degraded, &args.output)?;
    if let Some(path) = &args.clean_out {
        save_raster(&clean, path)?;
    }
    if let Some(path) = &args.shadow_mask {
        save_raster(&shadow.to_raster(), path)?;
    }
    if let Some(path) = &args.glint_mask {
        save_raster(&glint.to_raster(), path)?;
    }
    if let Some(path) = &args.stats {
        write_json(&NormalizationStats::from_raster(&degraded)?, path)?;
    }
    println!(
        "degraded {}x{}x{}: {} shadow px, {} glint px -> {}",
        degraded.height(),
        degraded.width(),
        degraded.bands(),
        shadow.count(),
        glint.count(),
        args.output.display()
    );
    Ok(())
}

fn run_dataset(args: &DatasetArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let counts = parse_counts(&args.counts)?;
    let clean = args.scene.load(args.seed)?;
    let pairs = build_dataset(&clean, &spec, &counts, args.stride, args.seed)?;
    let folds = kfold_split(&pairs, args.k, args.seed)?;
    let manifest = save_dataset(&pairs, &folds, &args.out_dir)?;
    write_json(
        &NormalizationStats::from_raster(&clean)?,
        &args.out_dir.join("stats.json"),
    )?;
    println!(
        "{} pairs ({} shadow / {} glint / {} both), {} folds -> {}",
        pairs.len(),
        counts.shadow,
        counts.glint,
        counts.both,
        args.k,
        manifest.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = merged_config(
        &args.config,
        &args.loss,
        args.epochs,
        args.batch,
        args.lr,
        args.seed,
    )?;
    let pairs = load_dataset(&args.data)?;
    let (model, trace) = train(&pairs, &config, None)?;
    save_weights(&model, &args.weights_out)?;
    if let Some(path) = &args.trace_out {
        write_json(&trace, path)?;
    }
    println!(
        "trained {} for {} epochs on {} pairs: loss {:.6} -> {:.6}, weights -> {}",
        config.loss.name(),
        config.epochs,
        pairs.len(),
        trace.epoch_loss.first().copied().unwrap_or(f64::NAN),
        trace.epoch_loss.last().copied().unwrap_or(f64::NAN),
        args.weights_out.display()
    );
    Ok(())
}

fn run_cv(args: &CvArgs) -> Result<()> {
    let config = merged_config(
        &args.config,
        &None,
        args.epochs,
        args.batch,
        args.lr,
        args.seed,
    )?;
    let losses = parse_losses(&args.losses)?;
    let pairs = load_dataset(&args.data)?;
    let report_params = ReportParams {
        ssim_global: args.ssim_global,
        ..ReportParams::default()
    };
    let report = cross_validate_with(&pairs, &losses, args.k, &config, &report_params)?;
    std::fs::create_dir_all(&args.out_dir)?;
    write_json(&report, &args.out_dir.join("report.json"))?;
    std::fs::write(
        args.out_dir.join("summary_table.csv"),
        summary_table_csv(&report),
    )?;
    std::fs::write(args.out_dir.join("folds.csv"), long_csv(&report))?;
    for entry in &report.entries {
        let ssims: Vec<f64> = entry.folds.iter().map(|f| f.report.ssim).collect();
        println!(
            "{}: mean ssim {:.4} (sd {:.4}) over {} folds [{}]",
            entry.loss.name(),
            entry.mean.ssim,
            entry.stddev.ssim,
            entry.folds.len(),
            ssims
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    println!("report -> {}", args.out_dir.join("report.json").display());
    Ok(())
}

fn run_correct(args: &CorrectArgs) -> Result<()> {
    let model = load_weights(&args.weights, None)?;
    let raster = load_raster(&args.input)?;
    let stats = match &args.stats {
        Some(path) => read_json(path, "normalization stats")?,
        None => NormalizationStats::from_raster(&raster)?,
    };
    let corrected = correct_raster(&model, &raster, &stats, args.stride)?;
    save_raster(&corrected, &args.output)?;
    println!(
        "corrected {}x{}x{} -> {}",
        corrected.height(),
        corrected.width(),
        corrected.bands(),
        args.output.display()
    );
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let report: CvReport = read_json(&args.report, "cv report")?;
    let written = write_report_files(&report, &args.out_dir)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Dataset(args) => run_dataset(args),
        Command::Train(args) => run_train(args),
        Command::Cv(args) => run_cv(args),
        Command::Correct(args) => run_correct(args),
        Command::Report(args) => run_report(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
