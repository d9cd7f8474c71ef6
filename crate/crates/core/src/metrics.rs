//! Evaluation metrics: tolerance-band accuracy, Dice coefficient, MPE, MSE,
//! RMSE, SSIM over 11x11 Gaussian windows, and multiscale SSIM.
//!
//! SSIM follows the local-window convention (Gaussian 11x11, sigma 1.5,
//! C1 = (0.01 L)^2, C2 = (0.03 L)^2 with dynamic range L = 1); a literal
//! global-statistics variant is available as [`ssim_global`]. Multiscale SSIM
//! multiplies per-scale contrast/structure means raised to the scale weights,
//! with the luminance term entering only at the coarsest scale; images too
//! small for all five scales use the largest feasible count with weights
//! renormalized.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub ms_weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: (0.01f64).powi(2),
            c2: (0.03f64).powi(2),
            ms_weights: DEFAULT_MS_WEIGHTS.to_vec(),
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.c1 <= 0.0 || self.c2 <= 0.0 {
            return Err(Error::Config("SSIM constants must be positive".into()));
        }
        let sum: f64 = self.ms_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Config(format!(
                "multiscale weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceMode {
    Soft,
    /// Binarize at 0.5, then 2TP / (2TP + FP + FN).
    Thresholded,
}

/// The seven per-pair metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub dice: f64,
    pub mpe: f64,
    pub mse: f64,
    pub rmse: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

impl MetricReport {
    pub const FIELDS: [&'static str; 7] =
        ["accuracy", "dice", "mpe", "mse", "rmse", "ssim", "ms_ssim"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.dice,
            self.mpe,
            self.mse,
            self.rmse,
            self.ssim,
            self.ms_ssim,
        ]
    }

    pub fn from_values(v: [f64; 7]) -> Self {
        Self {
            accuracy: v[0],
            dice: v[1],
            mpe: v[2],
            mse: v[3],
            rmse: v[4],
            ssim: v[5],
            ms_ssim: v[6],
        }
    }

    /// Per-field mean over a set of reports.
    pub fn mean_of(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len() as f64;
        let mut acc = [0.0; 7];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= n;
        }
        Self::from_values(acc)
    }

    /// Per-field sample standard deviation (n-1 denominator; 0 when n < 2).
    pub fn stddev_of(reports: &[MetricReport]) -> MetricReport {
        if reports.len() < 2 {
            return Self::from_values([0.0; 7]);
        }
        let mean = Self::mean_of(reports).values();
        let mut acc = [0.0; 7];
        for r in reports {
            for ((a, v), m) in acc.iter_mut().zip(r.values()).zip(mean) {
                *a += (v - m) * (v - m);
            }
        }
        let denom = (reports.len() - 1) as f64;
        for a in &mut acc {
            *a = (*a / denom).sqrt();
        }
        Self::from_values(acc)
    }
}

fn check_same_shape(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "metric shapes differ: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("metric over empty tensor".into()));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

/// Signed mean percentage error, `mean((y - yhat) / y)` with denominators
/// clamped to magnitude >= 1e-7. Positive means under-prediction on average.
pub fn mpe(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same_shape(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (t - p) / crate::autodiff::clamp_denominator(t))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Fraction of elements within `tol` of the target.
pub fn accuracy(pred: &Tensor, target: &Tensor, tol: f64) -> Result<f64> {
    if tol < 0.0 {
        return Err(Error::Domain(format!("accuracy tolerance {tol} < 0")));
    }
    check_same_shape(pred, target)?;
    let hits = pred
        .data()
        .iter()
        .zip(target.data())
        .filter(|(&p, &t)| (p - t).abs() <= tol)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn dice(pred: &Tensor, target: &Tensor, mode: DiceMode) -> Result<f64> {
    check_same_shape(pred, target)?;
    match mode {
        DiceMode::Soft => {
            let mut inter = 0.0;
            let mut total = 0.0;
            for (&p, &t) in pred.data().iter().zip(target.data()) {
                inter += p * t;
                total += p + t;
            }
            Ok((2.0 * inter / (total + 1e-7)).clamp(0.0, 1.0))
        }
        DiceMode::Thresholded => {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fneg = 0u64;
            for (&p, &t) in pred.data().iter().zip(target.data()) {
                let pb = p >= 0.5;
                let tb = t >= 0.5;
                match (pb, tb) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            if denom == 0 {
                // both masks empty: identical
                Ok(1.0)
            } else {
                Ok(2.0 * tp as f64 / denom as f64)
            }
        }
    }
}

/// Interpret a tensor as a stack of 2-D bands.
fn as_bands(t: &Tensor) -> Result<(usize, usize, usize, &[f64])> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w, t.data())),
        [c, h, w] => Ok((*c, *h, *w, t.data())),
        s => Err(Error::Shape(format!(
            "expected [H,W] or [C,H,W] image tensor, got {s:?}"
        ))),
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian filter, valid region only: output is
/// (h - window + 1) x (w - window + 1).
fn filter_valid(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * img[i * w + j + t];
            }
            tmp[i * ow + j] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(i + t) * ow + j];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Mean luminance and contrast/structure terms of one band pair over all
/// valid windows.
fn ssim_band_terms(
    a: &[f64],
    b: &[f64],
    h: usize,
    w: usize,
    params: &SsimParams,
) -> Result<(f64, f64, f64)> {
    let k = params.window;
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than SSIM window {k}x{k}"
        )));
    }
    let kernel = gaussian_kernel(k, params.sigma);
    let mu_a = filter_valid(a, h, w, &kernel);
    let mu_b = filter_valid(b, h, w, &kernel);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let m_aa = filter_valid(&aa, h, w, &kernel);
    let m_bb = filter_valid(&bb, h, w, &kernel);
    let m_ab = filter_valid(&ab, h, w, &kernel);
    let n = mu_a.len() as f64;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut lcs_sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        let l = (2.0 * ma * mb + params.c1) / (ma * ma + mb * mb + params.c1);
        let cs = (2.0 * cov + params.c2) / (va + vb + params.c2);
        l_sum += l;
        cs_sum += cs;
        lcs_sum += l * cs;
    }
    Ok((l_sum / n, cs_sum / n, lcs_sum / n))
}

/// Windowed SSIM averaged over positions, then over bands. Clamped to [0,1].
pub fn ssim(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<f64> {
    check_same_shape(pred, target)?;
    params.validate()?;
    let (c, h, w, pd) = as_bands(pred)?;
    let (_, _, _, td) = as_bands(target)?;
    let plane = h * w;
    let mut acc = 0.0;
    for band in 0..c {
        let (_, _, lcs) = ssim_band_terms(
            &pd[band * plane..(band + 1) * plane],
            &td[band * plane..(band + 1) * plane],
            h,
            w,
            params,
        )?;
        acc += lcs;
    }
    Ok((acc / c as f64).clamp(0.0, 1.0))
}

/// Literal global-statistics SSIM: one mean/variance/covariance per band.
pub fn ssim_global(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<f64> {
    check_same_shape(pred, target)?;
    let (c, h, w, pd) = as_bands(pred)?;
    let (_, _, _, td) = as_bands(target)?;
    let plane = h * w;
    let mut acc = 0.0;
    for band in 0..c {
        let a = &pd[band * plane..(band + 1) * plane];
        let b = &td[band * plane..(band + 1) * plane];
        let n = plane as f64;
        let ma: f64 = a.iter().sum::<f64>() / n;
        let mb: f64 = b.iter().sum::<f64>() / n;
        let va: f64 = a.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
        let vb: f64 = b.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
        let cov: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n;
        acc += (2.0 * ma * mb + params.c1) * (2.0 * cov + params.c2)
            / ((ma * ma + mb * mb + params.c1) * (va + vb + params.c2));
    }
    Ok((acc / c as f64).clamp(0.0, 1.0))
}

/// 2x2 mean downsample of one band (floor dims).
fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = 0.25
                * (img[(2 * i) * w + 2 * j]
                    + img[(2 * i) * w + 2 * j + 1]
                    + img[(2 * i + 1) * w + 2 * j]
                    + img[(2 * i + 1) * w + 2 * j + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of multiscale levels feasible for an image: the largest m with
/// `min(h, w) / 2^(m-1) >= window`, capped at the configured weight count.
pub fn feasible_scales(h: usize, w: usize, params: &SsimParams) -> usize {
    let mut m = 0;
    let mut size = h.min(w);
    while size >= params.window && m < params.ms_weights.len() {
        m += 1;
        size /= 2;
    }
    m
}

/// Multiscale SSIM averaged over bands, clamped to [0,1].
pub fn ms_ssim(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<f64> {
    check_same_shape(pred, target)?;
    params.validate()?;
    let (c, h, w, pd) = as_bands(pred)?;
    let (_, _, _, td) = as_bands(target)?;
    let scales = feasible_scales(h, w, params);
    if scales == 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than SSIM window {}",
            params.window
        )));
    }
    let weight_sum: f64 = params.ms_weights[..scales].iter().sum();
    let weights: Vec<f64> = params.ms_weights[..scales]
        .iter()
        .map(|w| w / weight_sum)
        .collect();
    let plane = h * w;
    let mut acc = 0.0;
    for band in 0..c {
        let mut a = pd[band * plane..(band + 1) * plane].to_vec();
        let mut b = td[band * plane..(band + 1) * plane].to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut value = 1.0;
        for (s, weight) in weights.iter().enumerate() {
            let (_, cs_mean, lcs_mean) = ssim_band_terms(&a, &b, ch, cw, params)?;
            if s + 1 == scales {
                // luminance enters only at the coarsest scale
                value *= lcs_mean.max(0.0).powf(*weight);
            } else {
                value *= cs_mean.max(0.0).powf(*weight);
                let (na, nh, nw) = downsample2(&a, ch, cw);
                let (nb, _, _) = downsample2(&b, ch, cw);
                a = na;
                b = nb;
                ch = nh;
                cw = nw;
            }
        }
        acc += value;
    }
    Ok((acc / c as f64).clamp(0.0, 1.0))
}

/// Knobs for [`full_report`].
#[derive(Debug, Clone)]
pub struct ReportParams {
    pub accuracy_tol: f64,
    pub dice_mode: DiceMode,
    pub ssim: SsimParams,
    /// Use the literal global-statistics SSIM instead of windowed.
    pub ssim_global: bool,
}

impl Default for ReportParams {
    fn default() -> Self {
        Self {
            accuracy_tol: 0.05,
            dice_mode: DiceMode::Thresholded,
            ssim: SsimParams::default(),
            ssim_global: false,
        }
    }
}

pub fn full_report_with(
    pred: &Tensor,
    target: &Tensor,
    params: &ReportParams,
) -> Result<MetricReport> {
    let mse_v = mse(pred, target)?;
    let ssim_v = if params.ssim_global {
        ssim_global(pred, target, &params.ssim)?
    } else {
        ssim(pred, target, &params.ssim)?
    };
    Ok(MetricReport {
        accuracy: accuracy(pred, target, params.accuracy_tol)?,
        dice: dice(pred, target, params.dice_mode)?,
        mpe: mpe(pred, target)?,
        mse: mse_v,
        rmse: mse_v.sqrt(),
        ssim: ssim_v,
        ms_ssim: ms_ssim(pred, target, &params.ssim)?,
    })
}

/// All seven metrics with default parameters.
pub fn full_report(pred: &Tensor, target: &Tensor) -> Result<MetricReport> {
    full_report_with(pred, target, &ReportParams::default())
}
