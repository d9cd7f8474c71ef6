//! Patch extraction, bilinear resizing, synthetic shadow/glint degradation,
//! paired-sample assembly, stratified fold splitting, and full-raster
//! stitching.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::raster::MultibandRaster;

pub const PATCH_WINDOW: usize = 200;
pub const MODEL_SIZE: usize = 128;

/// Degradation category of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Shadow,
    Glint,
    Both,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Shadow, Category::Glint, Category::Both];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Shadow => "shadow",
            Category::Glint => "glint",
            Category::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shadow" => Ok(Category::Shadow),
            "glint" => Ok(Category::Glint),
            "both" => Ok(Category::Both),
            other => Err(Error::Config(format!("unknown category '{other}'"))),
        }
    }
}

/// One (degraded, clean) training sample, both [5, 128, 128] in [0,1].
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub category: Category,
    /// (row, col) of the 200x200 source window in the parent raster.
    pub source_offset: (usize, usize),
}

/// Parallel dark seams multiplied into the raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    #[serde(default = "default_angle")]
    pub angle_deg: f64,
    #[serde(default = "default_spacing")]
    pub spacing_px: f64,
    #[serde(default = "default_seam_width")]
    pub width_px: f64,
    /// Multiplicative factor at the seam center, in (0, 1].
    #[serde(default = "default_attenuation")]
    pub attenuation: f64,
    /// Soft edge width in pixels.
    #[serde(default = "default_ramp")]
    pub ramp_px: f64,
}

fn default_angle() -> f64 {
    30.0
}
fn default_spacing() -> f64 {
    96.0
}
fn default_seam_width() -> f64 {
    72.0
}
fn default_attenuation() -> f64 {
    0.25
}
fn default_ramp() -> f64 {
    6.0
}

impl Default for ShadowSpec {
    fn default() -> Self {
        Self {
            angle_deg: default_angle(),
            spacing_px: default_spacing(),
            width_px: default_seam_width(),
            attenuation: default_attenuation(),
            ramp_px: default_ramp(),
        }
    }
}

/// Elliptical bright blobs added to the raster (clamped at 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlintSpec {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_radius_min")]
    pub radius_min_px: f64,
    #[serde(default = "default_radius_max")]
    pub radius_max_px: f64,
    #[serde(default = "default_brightness")]
    pub brightness: f64,
    /// Gaussian falloff sigma in pixels.
    #[serde(default = "default_sigma")]
    pub sigma_px: f64,
}

fn default_count() -> usize {
    8
}
fn default_radius_min() -> f64 {
    14.0
}
fn default_radius_max() -> f64 {
    44.0
}
fn default_brightness() -> f64 {
    1.0
}
fn default_sigma() -> f64 {
    20.0
}

impl Default for GlintSpec {
    fn default() -> Self {
        Self {
            count: default_count(),
            radius_min_px: default_radius_min(),
            radius_max_px: default_radius_max(),
            brightness: default_brightness(),
            sigma_px: default_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    #[serde(default)]
    pub shadow: ShadowSpec,
    #[serde(default)]
    pub glint: GlintSpec,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            shadow: ShadowSpec::default(),
            glint: GlintSpec::default(),
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.shadow.attenuation > 0.0 && self.shadow.attenuation <= 1.0) {
            return Err(Error::Config(format!(
                "shadow attenuation {} must be in (0,1]",
                self.shadow.attenuation
            )));
        }
        if self.glint.brightness < 0.0 {
            return Err(Error::Config("glint brightness must be >= 0".into()));
        }
        if self.glint.radius_min_px > self.glint.radius_max_px {
            return Err(Error::Config("glint radius_min > radius_max".into()));
        }
        if self.shadow.spacing_px <= 0.0 {
            return Err(Error::Config("shadow spacing must be > 0".into()));
        }
        Ok(())
    }
}

/// Boolean pixel mask (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 0/1 single-band raster for saving.
    pub fn to_raster(&self) -> MultibandRaster {
        MultibandRaster::new(
            self.width,
            self.height,
            1,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims are valid")
    }
}

/// Stratified fold assignment: per-pair fold index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn fold_members(&self, fold: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Smooth synthetic "pond" raster in (0,1): a coarse random grid,
/// bilinearly upsampled, then pushed toward a dark-water / bright-land
/// bimodal distribution with soft shorelines. Bands share one underlying
/// scene with a small per-band perturbation, mirroring the strong
/// inter-band correlation of real multispectral imagery.
pub fn synthetic_clean_raster(
    width: usize,
    height: usize,
    bands: usize,
    seed: u64,
) -> Result<MultibandRaster> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = 64usize;
    let gw = width.div_ceil(cell) + 1;
    let gh = height.div_ceil(cell) + 1;
    let shape = |v: f64| {
        let s = 1.0 / (1.0 + (-(v - 0.5) * 60.0).exp());
        0.01 + 0.98 * s
    };
    let shared: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut data = Vec::with_capacity(width * height * bands);
    for _ in 0..bands {
        let grid: Vec<f64> = shared
            .iter()
            .map(|&v0| 0.8 * v0 + 0.2 * rng.gen_range(0.0..1.0))
            .collect();
        for r in 0..height {
            let y = r as f64 / cell as f64;
            let y0 = (y.floor() as usize).min(gh - 2);
            let fy = y - y0 as f64;
            for c in 0..width {
                let x = c as f64 / cell as f64;
                let x0 = (x.floor() as usize).min(gw - 2);
                let fx = x - x0 as f64;
                let v00 = grid[y0 * gw + x0];
                let v01 = grid[y0 * gw + x0 + 1];
                let v10 = grid[(y0 + 1) * gw + x0];
                let v11 = grid[(y0 + 1) * gw + x0 + 1];
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                data.push(shape(v) as f32);
            }
        }
    }
    MultibandRaster::new(width, height, bands, data)
}

/// Fully-contained sliding-window offsets, row-major sweep.
pub fn grid_offsets(
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>> {
    if height < window || width < window {
        return Err(Error::Shape(format!(
            "raster {height}x{width} smaller than window {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    let mut offsets = Vec::new();
    let mut r = 0;
    while r + window <= height {
        let mut c = 0;
        while c + window <= width {
            offsets.push((r, c));
            c += stride;
        }
        r += stride;
    }
    Ok(offsets)
}

/// Extract fully-contained windows with their offsets.
pub fn extract_patches(
    raster: &MultibandRaster,
    window: usize,
    stride: usize,
) -> Result<Vec<((usize, usize), MultibandRaster)>> {
    let offsets = grid_offsets(raster.height(), raster.width(), window, stride)?;
    offsets
        .into_iter()
        .map(|(r, c)| Ok(((r, c), raster.window(r, c, window, window)?)))
        .collect()
}

/// Corner-aligned bilinear resize of every band.
pub fn resize_raster(src: &MultibandRaster, out_w: usize, out_h: usize) -> Result<MultibandRaster> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Shape("resize target must be >= 1x1".into()));
    }
    let (w, h) = (src.width(), src.height());
    let sx = if out_w > 1 {
        (w - 1) as f64 / (out_w - 1) as f64
    } else {
        0.0
    };
    let sy = if out_h > 1 {
        (h - 1) as f64 / (out_h - 1) as f64
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(out_w * out_h * src.bands());
    for b in 0..src.bands() {
        let band = src.band(b)?;
        for r in 0..out_h {
            let y = r as f64 * sy;
            let y0 = (y.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fy = y - y0 as f64;
            for c in 0..out_w {
                let x = c as f64 * sx;
                let x0 = (x.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fx = x - x0 as f64;
                let v = band[y0 * w + x0] as f64 * (1.0 - fy) * (1.0 - fx)
                    + band[y0 * w + x1] as f64 * (1.0 - fy) * fx
                    + band[y1 * w + x0] as f64 * fy * (1.0 - fx)
                    + band[y1 * w + x1] as f64 * fy * fx;
                data.push(v as f32);
            }
        }
    }
    MultibandRaster::new(out_w, out_h, src.bands(), data)
}

/// A 200x200 patch resized to the 128x128 model input.
pub fn resize_patch(patch: &MultibandRaster) -> Result<MultibandRaster> {
    if patch.width() != PATCH_WINDOW || patch.height() != PATCH_WINDOW {
        return Err(Error::Shape(format!(
            "resize_patch expects {PATCH_WINDOW}x{PATCH_WINDOW}, got {}x{}",
            patch.height(),
            patch.width()
        )));
    }
    resize_raster(patch, MODEL_SIZE, MODEL_SIZE)
}

pub fn raster_to_tensor(raster: &MultibandRaster) -> Tensor {
    Tensor::new(
        vec![raster.bands(), raster.height(), raster.width()],
        raster.data().iter().map(|&v| v as f64).collect(),
    )
    .expect("raster dims are consistent")
}

/// [C,H,W] tensor back to a raster (values truncated to f32).
pub fn tensor_to_raster(t: &Tensor) -> Result<MultibandRaster> {
    let [c, h, w] = t.shape() else {
        return Err(Error::Shape(format!(
            "tensor_to_raster expects [C,H,W], got {:?}",
            t.shape()
        )));
    };
    MultibandRaster::new(*w, *h, *c, t.data().iter().map(|&v| v as f32).collect())
}

/// Apply shadow seams and glint blobs. Pixels outside the returned masks are
/// byte-identical to the clean input.
pub fn synth_degrade(
    clean: &MultibandRaster,
    spec: &DegradeSpec,
) -> Result<(MultibandRaster, Mask, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (clean.width(), clean.height());
    let mut out = clean.clone();
    let mut shadow_mask = Mask::empty(w, h);
    let mut glint_mask = Mask::empty(w, h);

    // shadow seams
    let theta = spec.shadow.angle_deg.to_radians();
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    let spacing = spec.shadow.spacing_px;
    let phase: f64 = rng.gen_range(0.0..spacing);
    let half = spec.shadow.width_px / 2.0;
    let ramp = spec.shadow.ramp_px.max(1e-9);
    if spec.shadow.attenuation < 1.0 {
        for r in 0..h {
            for c in 0..w {
                let t = c as f64 * cos_t + r as f64 * sin_t + phase;
                let residual = t - spacing * (t / spacing).round();
                let d = residual.abs();
                let factor = if d <= half {
                    spec.shadow.attenuation
                } else if d < half + ramp {
                    spec.shadow.attenuation
                        + (1.0 - spec.shadow.attenuation) * (d - half) / ramp
                } else {
                    1.0
                };
                if factor < 1.0 {
                    shadow_mask.data[r * w + c] = true;
                    for b in 0..clean.bands() {
                        let v = out.get(b, r, c);
                        out.set(b, r, c, (v as f64 * factor) as f32);
                    }
                }
            }
        }
    }

    // glint blobs
    if spec.glint.brightness > 0.0 {
        for _ in 0..spec.glint.count {
            let cy: f64 = rng.gen_range(0.0..h as f64);
            let cx: f64 = rng.gen_range(0.0..w as f64);
            let radius = if spec.glint.radius_max_px > spec.glint.radius_min_px {
                rng.gen_range(spec.glint.radius_min_px..spec.glint.radius_max_px)
            } else {
                spec.glint.radius_min_px
            };
            let sigma = spec.glint.sigma_px.max(1e-9);
            let r0 = (cy - radius).floor().max(0.0) as usize;
            let r1 = ((cy + radius).ceil() as usize).min(h.saturating_sub(1));
            let c0 = (cx - radius).floor().max(0.0) as usize;
            let c1 = ((cx + radius).ceil() as usize).min(w.saturating_sub(1));
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let dy = r as f64 - cy;
                    let dx = c as f64 - cx;
                    let d = (dx * dx + dy * dy).sqrt();
                    if d <= radius {
                        let add = spec.glint.brightness * (-d * d / (2.0 * sigma * sigma)).exp();
                        glint_mask.data[r * w + c] = true;
                        for b in 0..clean.bands() {
                            let v = out.get(b, r, c) as f64;
                            out.set(b, r, c, (v + add).min(1.0) as f32);
                        }
                    }
                }
            }
        }
    }

    Ok((out, shadow_mask, glint_mask))
}

/// Requested pair counts per category; defaults mirror the 52/49/15 split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub shadow: usize,
    pub glint: usize,
    pub both: usize,
}

impl Default for CategoryCounts {
    fn default() -> Self {
        Self {
            shadow: 52,
            glint: 49,
            both: 15,
        }
    }
}

impl CategoryCounts {
    pub fn total(&self) -> usize {
        self.shadow + self.glint + self.both
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // FNV-1a over the two words, stable across platforms
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes().into_iter().chain(index.to_le_bytes()) {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Build (degraded, clean) pairs from windows of a clean [0,1] raster.
/// Each pair's degradation is seeded from (seed, pair index) and gated by
/// its category.
pub fn build_dataset(
    clean: &MultibandRaster,
    base: &DegradeSpec,
    counts: &CategoryCounts,
    stride: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    base.validate()?;
    for &v in clean.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(
                "build_dataset expects a normalized [0,1] clean raster".into(),
            ));
        }
    }
    let mut offsets = grid_offsets(clean.height(), clean.width(), PATCH_WINDOW, stride)?;
    let need = counts.total();
    if offsets.len() < need {
        return Err(Error::Capacity(format!(
            "requested {need} pairs but only {} windows available at stride {stride}",
            offsets.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    offsets.shuffle(&mut rng);
    let mut categories = Vec::with_capacity(need);
    categories.extend(std::iter::repeat(Category::Shadow).take(counts.shadow));
    categories.extend(std::iter::repeat(Category::Glint).take(counts.glint));
    categories.extend(std::iter::repeat(Category::Both).take(counts.both));

    let mut pairs = Vec::with_capacity(need);
    for (idx, (&offset, &category)) in offsets.iter().zip(&categories).enumerate() {
        let clean_patch = clean.window(offset.0, offset.1, PATCH_WINDOW, PATCH_WINDOW)?;
        let mut spec = base.clone();
        spec.seed = mix_seed(seed, idx as u64);
        match category {
            Category::Shadow => spec.glint.count = 0,
            Category::Glint => spec.shadow.attenuation = 1.0,
            Category::Both => {}
        }
        let (degraded_patch, _, _) = synth_degrade(&clean_patch, &spec)?;
        let degraded = raster_to_tensor(&resize_patch(&degraded_patch)?);
        let clean_t = raster_to_tensor(&resize_patch(&clean_patch)?);
        pairs.push(PatchPair {
            degraded,
            clean: clean_t,
            category,
            source_offset: offset,
        });
    }
    Ok(pairs)
}

/// Stratified k-fold split: fold sizes differ by at most one overall and the
/// per-fold category mix stays within one pair of the global mix.
pub fn kfold_split(pairs: &[PatchPair], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if pairs.len() < k {
        return Err(Error::Capacity(format!(
            "{} pairs cannot fill {k} folds",
            pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; pairs.len()];
    let mut cursor = 0usize;
    for category in Category::ALL {
        let mut members: Vec<usize> = pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| p.category == category)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for idx in members {
            folds[idx] = cursor % k;
            cursor += 1;
        }
    }
    Ok(FoldAssignment { k, folds, seed })
}

/// Write pairs as MBRF files plus a `manifest.csv` with columns
/// pair_id, category, row, col, fold, degraded_path, clean_path.
pub fn save_dataset(
    pairs: &[PatchPair],
    folds: &FoldAssignment,
    dir: &std::path::Path,
) -> Result<std::path::PathBuf> {
    if folds.folds.len() != pairs.len() {
        return Err(Error::State(format!(
            "{} fold entries for {} pairs",
            folds.folds.len(),
            pairs.len()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("pair_id,category,row,col,fold,degraded_path,clean_path\n");
    for (i, pair) in pairs.iter().enumerate() {
        let degraded_name = format!("pair_{i:04}_degraded.mbrf");
        let clean_name = format!("pair_{i:04}_clean.mbrf");
        crate::raster::save_raster(&tensor_to_raster(&pair.degraded)?, &dir.join(&degraded_name))?;
        crate::raster::save_raster(&tensor_to_raster(&pair.clean)?, &dir.join(&clean_name))?;
        use std::fmt::Write as _;
        let _ = writeln!(
            manifest,
            "{i},{},{},{},{},{degraded_name},{clean_name}",
            pair.category.name(),
            pair.source_offset.0,
            pair.source_offset.1,
            folds.folds[i],
        );
    }
    let path = dir.join("manifest.csv");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &std::path::Path) -> Result<Vec<PatchPair>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = manifest.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset manifest".into()))?;
    if header != "pair_id,category,row,col,fold,degraded_path,clean_path" {
        return Err(Error::Format(format!(
            "unexpected manifest header '{header}'"
        )));
    }
    let mut pairs = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "manifest line {}: expected 7 fields, got {}",
                n + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Format(format!("manifest line {}: bad {what}", n + 2));
        let category = Category::parse(fields[1])?;
        let row: usize = fields[2].parse().map_err(|_| bad("row"))?;
        let col: usize = fields[3].parse().map_err(|_| bad("col"))?;
        let degraded = raster_to_tensor(&crate::raster::load_raster(&dir.join(fields[5]))?);
        let clean = raster_to_tensor(&crate::raster::load_raster(&dir.join(fields[6]))?);
        if degraded.shape() != clean.shape() {
            return Err(Error::Data(format!(
                "pair {} has mismatched patch shapes",
                fields[0]
            )));
        }
        pairs.push(PatchPair {
            degraded,
            clean,
            category,
            source_offset: (row, col),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data("dataset manifest lists no pairs".into()));
    }
    Ok(pairs)
}

/// Reassemble patches onto a canvas the size of `base`. Overlaps are averaged
/// uniformly; pixels covered by no patch are copied from `base`.
pub fn stitch(
    patches: &[((usize, usize), MultibandRaster)],
    base: &MultibandRaster,
) -> Result<MultibandRaster> {
    let (w, h, bands) = (base.width(), base.height(), base.bands());
    let mut sums = vec![0.0f64; w * h * bands];
    let mut counts = vec![0u32; w * h];
    for ((row, col), patch) in patches {
        if patch.bands() != bands {
            return Err(Error::Shape(format!(
                "patch has {} bands, canvas has {bands}",
                patch.bands()
            )));
        }
        if row + patch.height() > h || col + patch.width() > w {
            return Err(Error::Shape(format!(
                "patch {}x{} at ({row},{col}) exceeds canvas {h}x{w}",
                patch.height(),
                patch.width()
            )));
        }
        for r in 0..patch.height() {
            for c in 0..patch.width() {
                counts[(row + r) * w + col + c] += 1;
                for b in 0..bands {
                    sums[b * w * h + (row + r) * w + col + c] +=
                        patch.get(b, r, c) as f64;
                }
            }
        }
    }
    let mut data = vec![0.0f32; w * h * bands];
    for p in 0..w * h {
        let n = counts[p];
        for b in 0..bands {
            data[b * w * h + p] = if n > 0 {
                (sums[b * w * h + p] / n as f64) as f32
            } else {
                base.data()[b * w * h + p]
            };
        }
    }
    MultibandRaster::new(w, h, bands, data)
}
