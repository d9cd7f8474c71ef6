//! Multiband raster representation, MBRF container IO, per-band min-max
//! normalization, and 8-bit grayscale (PGM) export.
//!
//! MBRF layout (little-endian):
//! `"MBR1" | version u32 = 1 | width u32 | height u32 | bands u32 | dtype u32 (0 = f32) | payload`
//! where the payload is `bands * height * width` f32 samples, band-major,
//! row-major within each band.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const MBRF_MAGIC: &[u8; 4] = b"MBR1";
pub const MBRF_VERSION: u32 = 1;

/// H x W x C floating-point image, band-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandRaster {
    width: usize,
    height: usize,
    bands: usize,
    data: Vec<f32>,
    band_names: Option<Vec<String>>,
}

impl MultibandRaster {
    pub fn new(width: usize, height: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Shape(format!(
                "raster dims must be >= 1, got {width}x{height}x{bands}"
            )));
        }
        if data.len() != width * height * bands {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}x{} = {}",
                data.len(),
                width,
                height,
                bands,
                width * height * bands
            )));
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                let band = i / (width * height);
                let pixel = i % (width * height);
                return Err(Error::Data(format!(
                    "non-finite sample {v} at band {band}, pixel {pixel}"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            bands,
            data,
            band_names: None,
        })
    }

    pub fn filled(width: usize, height: usize, bands: usize, value: f32) -> Result<Self> {
        Self::new(width, height, bands, vec![value; width * height * bands])
    }

    pub fn with_band_names(mut self, names: Vec<String>) -> Self {
        self.band_names = Some(names);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn band_names(&self) -> Option<&[String]> {
        self.band_names.as_deref()
    }

    /// Samples of one band, row-major.
    pub fn band(&self, band: usize) -> Result<&[f32]> {
        if band >= self.bands {
            return Err(Error::Shape(format!(
                "band index {band} out of range, raster has {} bands",
                self.bands
            )));
        }
        let plane = self.width * self.height;
        Ok(&self.data[band * plane..(band + 1) * plane])
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[band * self.width * self.height + row * self.width + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, value: f32) {
        self.data[band * self.width * self.height + row * self.width + col] = value;
    }

    /// Copy a window out of the raster; the window must lie fully inside.
    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Result<MultibandRaster> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::Shape(format!(
                "window {h}x{w} at ({row},{col}) exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.bands);
        for b in 0..self.bands {
            for r in 0..h {
                let start = b * self.width * self.height + (row + r) * self.width + col;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        MultibandRaster::new(w, h, self.bands, data)
    }
}

/// Per-band min/max used to map physical units into [0,1] and back.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormalizationStats {
    pub fn new(min: Vec<f32>, max: Vec<f32>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::Shape(format!(
                "min has {} entries, max has {}",
                min.len(),
                max.len()
            )));
        }
        for (b, (lo, hi)) in min.iter().zip(&max).enumerate() {
            if !(lo < hi) {
                return Err(Error::Data(format!(
                    "band {b}: min {lo} must be < max {hi} (constant bands rejected)"
                )));
            }
        }
        Ok(Self { min, max })
    }

    /// Per-band min/max over a raster. Constant bands are rejected.
    pub fn from_raster(raster: &MultibandRaster) -> Result<Self> {
        let mut min = Vec::with_capacity(raster.bands());
        let mut max = Vec::with_capacity(raster.bands());
        for b in 0..raster.bands() {
            let band = raster.band(b)?;
            let lo = band.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = band.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            min.push(lo);
            max.push(hi);
        }
        Self::new(min, max)
    }

    pub fn bands(&self) -> usize {
        self.min.len()
    }
}

/// Map each sample to `(v - min_b) / (max_b - min_b)`, clamped to [0,1].
pub fn normalize(raster: &MultibandRaster, stats: &NormalizationStats) -> Result<MultibandRaster> {
    if stats.bands() != raster.bands() {
        return Err(Error::Shape(format!(
            "stats cover {} bands, raster has {}",
            stats.bands(),
            raster.bands()
        )));
    }
    let mut out = raster.clone();
    let plane = raster.width() * raster.height();
    for b in 0..raster.bands() {
        let (lo, hi) = (stats.min[b], stats.max[b]);
        let range = hi - lo;
        for v in &mut out.data_mut()[b * plane..(b + 1) * plane] {
            *v = ((*v - lo) / range).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Inverse of [`normalize`] for in-range samples.
pub fn denormalize(
    raster: &MultibandRaster,
    stats: &NormalizationStats,
) -> Result<MultibandRaster> {
    if stats.bands() != raster.bands() {
        return Err(Error::Shape(format!(
            "stats cover {} bands, raster has {}",
            stats.bands(),
            raster.bands()
        )));
    }
    let mut out = raster.clone();
    let plane = raster.width() * raster.height();
    for b in 0..raster.bands() {
        let (lo, hi) = (stats.min[b], stats.max[b]);
        let range = hi - lo;
        for v in &mut out.data_mut()[b * plane..(b + 1) * plane] {
            *v = *v * range + lo;
        }
    }
    Ok(out)
}

pub fn save_raster(raster: &MultibandRaster, path: &Path) -> Result<()> {
    // invariants were checked at construction, but a raster mutated through
    // data_mut may have picked up non-finite values
    for (i, v) in raster.data().iter().enumerate() {
        if !v.is_finite() {
            let band = i / (raster.width() * raster.height());
            let pixel = i % (raster.width() * raster.height());
            return Err(Error::Data(format!(
                "non-finite sample {v} at band {band}, pixel {pixel}; file not written"
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MBRF_MAGIC)?;
    w.write_u32::<LittleEndian>(MBRF_VERSION)?;
    w.write_u32::<LittleEndian>(raster.width() as u32)?;
    w.write_u32::<LittleEndian>(raster.height() as u32)?;
    w.write_u32::<LittleEndian>(raster.bands() as u32)?;
    w.write_u32::<LittleEndian>(0)?; // dtype 0 = f32
    for v in raster.data() {
        w.write_f32::<LittleEndian>(*v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_raster(path: &Path) -> Result<MultibandRaster> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MBRF_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MBRF_MAGIC
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MBRF_VERSION {
        return Err(Error::Format(format!(
            "unsupported MBRF version {version}, expected {MBRF_VERSION}"
        )));
    }
    let width = r.read_u32::<LittleEndian>()? as usize;
    let height = r.read_u32::<LittleEndian>()? as usize;
    let bands = r.read_u32::<LittleEndian>()? as usize;
    let dtype = r.read_u32::<LittleEndian>()?;
    if dtype != 0 {
        return Err(Error::Format(format!("unsupported dtype {dtype}, only 0 (f32)")));
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(bands))
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let mut data = vec![0f32; n];
    for v in &mut data {
        *v = r.read_f32::<LittleEndian>()?;
    }
    MultibandRaster::new(width, height, bands, data)
}

/// Export one band as a binary PGM (P5, maxval 255), scaling
/// [band min, band max] linearly to [0,255] with half-up rounding.
/// A constant band maps to all zeros.
pub fn band_to_grayscale(raster: &MultibandRaster, band: usize, path: &Path) -> Result<()> {
    let samples = raster.band(band)?;
    let lo = samples.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = samples.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut bytes = Vec::with_capacity(samples.len());
    if lo < hi {
        let range = (hi - lo) as f64;
        for v in samples {
            let scaled = (*v as f64 - lo as f64) / range * 255.0;
            bytes.push((scaled + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    } else {
        bytes.resize(samples.len(), 0);
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", raster.width(), raster.height())?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}
