//! Report emission: summary table CSV, long-format per-fold CSV, per-metric
//! boxplot SVGs (MPE excluded), and per-loss training-curve SVGs. All output
//! is plain strings built deterministically, so identical inputs give
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::harness::CvReport;
use crate::metrics::MetricReport;

/// Metrics that get a boxplot; the signed-percentage MPE is left out because
/// its scale dwarfs the others.
pub const BOXPLOT_METRICS: [&str; 6] = ["accuracy", "dice", "mse", "rmse", "ssim", "ms_ssim"];

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 40.0;

/// Round to three significant figures, plain decimal notation.
pub fn format_sig3(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0.000".to_string();
    }
    let decimals = (2 - x.abs().log10().floor() as i64).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

/// Rows = the seven metrics, columns = losses, cells "mean (stddev)".
pub fn summary_table_csv(report: &CvReport) -> String {
    let mut out = String::from("metric");
    for entry in &report.entries {
        out.push(',');
        out.push_str(entry.loss.name());
    }
    out.push('\n');
    for (i, field) in MetricReport::FIELDS.iter().enumerate() {
        out.push_str(field);
        for entry in &report.entries {
            let mean = entry.mean.values()[i];
            let sd = entry.stddev.values()[i];
            let _ = write!(out, ",{} ({})", format_sig3(mean), format_sig3(sd));
        }
        out.push('\n');
    }
    out
}

/// One row per (loss, fold) with full-precision metric values.
pub fn long_csv(report: &CvReport) -> String {
    let mut out = String::from("loss_kind,fold,accuracy,dice,mpe,mse,rmse,ssim,ms_ssim\n");
    for entry in &report.entries {
        for fold in &entry.folds {
            let _ = write!(out, "{},{}", entry.loss.name(), fold.fold);
            for v in fold.report.values() {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Linear-interpolation quantile of a sorted slice (the R-7 rule).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

struct BoxStats {
    q1: f64,
    median: f64,
    q3: f64,
    whisker_lo: f64,
    whisker_hi: f64,
    outliers: Vec<f64>,
}

fn box_stats(values: &[f64]) -> BoxStats {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let whisker_lo = sorted
        .iter()
        .copied()
        .find(|&v| v >= lo_fence)
        .unwrap_or(q1);
    let whisker_hi = sorted
        .iter()
        .rev()
        .copied()
        .find(|&v| v <= hi_fence)
        .unwrap_or(q3);
    let outliers = sorted
        .iter()
        .copied()
        .filter(|&v| v < lo_fence || v > hi_fence)
        .collect();
    BoxStats {
        q1,
        median,
        q3,
        whisker_lo,
        whisker_hi,
        outliers,
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"14\">{title}</text>\n",
        fmt2(SVG_W / 2.0)
    );
    s
}

fn axis_range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn y_pixel(v: f64, lo: f64, hi: f64) -> f64 {
    let frac = (v - lo) / (hi - lo);
    SVG_H - MARGIN_B - frac * (SVG_H - MARGIN_T - MARGIN_B)
}

fn draw_y_axis(s: &mut String, lo: f64, hi: f64) {
    let _ = write!(
        s,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt2(MARGIN_L),
        fmt2(MARGIN_T),
        fmt2(MARGIN_L),
        fmt2(SVG_H - MARGIN_B)
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y_pixel(v, lo, hi);
        let _ = write!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt2(MARGIN_L - 4.0),
            fmt2(y),
            fmt2(MARGIN_L),
            fmt2(y)
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"10\">{}</text>\n",
            fmt2(MARGIN_L - 7.0),
            fmt2(y + 3.0),
            format_sig3(v)
        );
    }
}

/// One boxplot SVG comparing all losses on a single metric.
pub fn boxplot_svg(report: &CvReport, metric_index: usize) -> String {
    let metric = MetricReport::FIELDS[metric_index];
    let groups: Vec<(&str, Vec<f64>)> = report
        .entries
        .iter()
        .map(|e| {
            (
                e.loss.name(),
                e.folds
                    .iter()
                    .map(|f| f.report.values()[metric_index])
                    .collect(),
            )
        })
        .collect();
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let (lo, hi) = axis_range(&all);
    let mut s = svg_open(&format!("{metric} by loss"));
    draw_y_axis(&mut s, lo, hi);
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let slot = plot_w / groups.len() as f64;
    let box_w = (slot * 0.5).min(48.0);
    for (i, (name, values)) in groups.iter().enumerate() {
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let st = box_stats(values);
        let y = |v: f64| y_pixel(v, lo, hi);
        // whisker stem and caps
        for (a, b) in [(st.whisker_lo, st.q1), (st.q3, st.whisker_hi)] {
            let _ = write!(
                s,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                fmt2(cx),
                fmt2(y(a)),
                fmt2(cx),
                fmt2(y(b))
            );
        }
        for w in [st.whisker_lo, st.whisker_hi] {
            let _ = write!(
                s,
                "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
                fmt2(cx - box_w / 4.0),
                fmt2(y(w)),
                fmt2(cx + box_w / 4.0),
                fmt2(y(w))
            );
        }
        let _ = write!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"black\"/>\n",
            fmt2(cx - box_w / 2.0),
            fmt2(y(st.q3)),
            fmt2(box_w),
            fmt2((y(st.q1) - y(st.q3)).max(0.0))
        );
        let _ = write!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt2(cx - box_w / 2.0),
            fmt2(y(st.median)),
            fmt2(cx + box_w / 2.0),
            fmt2(y(st.median))
        );
        for o in &st.outliers {
            let _ = write!(
                s,
                "<circle cx=\"{}\" cy=\"{}\" r=\"2\" fill=\"none\" stroke=\"black\"/>\n",
                fmt2(cx),
                fmt2(y(*o))
            );
        }
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{name}</text>\n",
            fmt2(cx),
            fmt2(SVG_H - MARGIN_B + 16.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// All per-metric boxplots, keyed by metric name; MPE is skipped.
pub fn boxplot_svgs(report: &CvReport) -> Vec<(String, String)> {
    MetricReport::FIELDS
        .iter()
        .enumerate()
        .filter(|(_, f)| BOXPLOT_METRICS.contains(*f))
        .map(|(i, f)| (f.to_string(), boxplot_svg(report, i)))
        .collect()
}

/// Training curves for one loss: a polyline of epoch loss per fold.
pub fn training_curve_svg(report: &CvReport, loss_index: usize) -> String {
    let entry = &report.entries[loss_index];
    let all: Vec<f64> = entry
        .folds
        .iter()
        .flat_map(|f| f.trace.epoch_loss.iter().copied())
        .collect();
    let (lo, hi) = axis_range(&all);
    let epochs = entry
        .folds
        .iter()
        .map(|f| f.trace.epoch_loss.len())
        .max()
        .unwrap_or(1)
        .max(1);
    let mut s = svg_open(&format!("training loss ({})", entry.loss.name()));
    draw_y_axis(&mut s, lo, hi);
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    for fold in &entry.folds {
        let n = fold.trace.epoch_loss.len();
        if n == 0 {
            continue;
        }
        let mut points = String::new();
        for (e, &v) in fold.trace.epoch_loss.iter().enumerate() {
            let x = if epochs > 1 {
                MARGIN_L + plot_w * e as f64 / (epochs - 1) as f64
            } else {
                MARGIN_L + plot_w / 2.0
            };
            if e > 0 {
                points.push(' ');
            }
            let _ = write!(points, "{},{}", fmt2(x), fmt2(y_pixel(v, lo, hi)));
        }
        let _ = write!(
            s,
            "<polyline points=\"{points}\" fill=\"none\" stroke=\"black\" \
             stroke-opacity=\"0.6\"/>\n"
        );
    }
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">epoch</text>\n",
        fmt2(MARGIN_L + plot_w / 2.0),
        fmt2(SVG_H - MARGIN_B + 16.0)
    );
    s.push_str("</svg>\n");
    s
}

pub fn training_curve_svgs(report: &CvReport) -> Vec<(String, String)> {
    (0..report.entries.len())
        .map(|i| {
            (
                report.entries[i].loss.name().to_string(),
                training_curve_svg(report, i),
            )
        })
        .collect()
}

/// Write every report artifact into `dir` and return the paths created.
pub fn write_report_files(report: &CvReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let table = dir.join("summary_table.csv");
    std::fs::write(&table, summary_table_csv(report))?;
    written.push(table);
    let folds = dir.join("folds.csv");
    std::fs::write(&folds, long_csv(report))?;
    written.push(folds);
    for (metric, svg) in boxplot_svgs(report) {
        let path = dir.join(format!("boxplot_{metric}.svg"));
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    for (loss, svg) in training_curve_svgs(report) {
        let path = dir.join(format!("training_curves_{loss}.svg"));
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}
