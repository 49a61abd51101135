//! Run-directory artifacts: manifests, metric summaries, history CSV,
//! plot-data CSV tables, and minimal static SVG renderings.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::calibration::{CalibrationBin, PredictionRecord, TemporalRow};
use crate::error::Result;
use crate::training::EpochRecord;

/// Serialize pretty JSON with a trailing newline. Field order follows
/// struct declaration, so output bytes are deterministic.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path.as_ref(), bytes)?;
    Ok(())
}

/// Replay record written by every command. Wall time lives here and
/// only here; metric artifacts stay byte-reproducible.
#[derive(Serialize)]
pub struct Manifest<C: Serialize> {
    pub command: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub config: C,
    pub wall_time_secs: f64,
}

impl<C: Serialize> Manifest<C> {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(dir.join("manifest.json"), self)
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub sd: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> MetricSummary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, sd, values }
    }
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "epoch,train_loss,dev_mae,dev_rmse,lr")?;
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.dev_mae, r.dev_rmse, r.lr)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_binned_csv(path: impl AsRef<Path>, bins: &[CalibrationBin]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "bin,mean_sigma,mean_abs_err,count")?;
    for (i, b) in bins.iter().enumerate() {
        writeln!(out, "{},{},{},{}", i, b.mean_sigma, b.mean_abs_err, b.count)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_scatter_csv(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "sigma,abs_err")?;
    for r in records {
        writeln!(out, "{},{}", r.sigma, r.abs_err())?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_coverage_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "level,empirical")?;
    for (level, empirical) in curve {
        writeln!(out, "{level},{empirical}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_temporal_csv(path: impl AsRef<Path>, rows: &[TemporalRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(out, "t,count,mean_sigma,mean_abs_err")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.t, r.count, r.mean_sigma, r.mean_abs_err)?;
    }
    out.flush()?;
    Ok(())
}

// ---- SVG rendering ------------------------------------------------------------

pub struct Series<'a> {
    pub points: &'a [(f64, f64)],
    pub color: &'a str,
    /// Connect the points with a polyline (sorted by x) instead of dots.
    pub line: bool,
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 56.0;

/// Minimal static XY chart: dots or polylines plus an optional unit
/// diagonal. Output bytes depend only on the numeric inputs.
pub fn render_xy_svg(
    path: impl AsRef<Path>,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    diagonal: bool,
) -> Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if all.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if diagonal {
        let lo = x_min.min(y_min);
        let hi = x_max.max(y_max);
        x_min = lo;
        y_min = lo;
        x_max = hi;
        y_max = hi;
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y_min) / (y_max - y_min) * (SVG_H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n",
        SVG_W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n",
        SVG_W / 2.0,
        SVG_H - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        SVG_H / 2.0,
        SVG_H / 2.0
    ));
    for (value, is_x) in [(x_min, true), (x_max, true), (y_min, false), (y_max, false)] {
        let (x, y, anchor) = if is_x {
            (sx(value), SVG_H - MARGIN + 16.0, "middle")
        } else {
            (MARGIN - 6.0, sy(value) + 4.0, "end")
        };
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"{anchor}\">{value:.4}</text>\n"
        ));
    }
    if diagonal {
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"red\" stroke-dasharray=\"6 4\"/>\n",
            sx(x_min),
            sy(x_min),
            sx(x_max),
            sy(x_max)
        ));
    }
    for s in series {
        if s.line {
            let mut pts: Vec<(f64, f64)> = s.points.to_vec();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let coords: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                coords.join(" "),
                s.color
            ));
        }
        for &(x, y) in s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.6\"/>\n",
                sx(x),
                sy(y),
                s.color
            ));
        }
    }
    svg.push_str("</svg>\n");
    std::fs::write(path.as_ref(), svg)?;
    Ok(())
}
