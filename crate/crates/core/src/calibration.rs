//! Uncertainty evaluation: binned and coverage-based expected
//! calibration error, empirical interval coverage, sharpness,
//! error-uncertainty correlation, per-timestep dynamics, and case-study
//! selection.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{normal_quantile, student_t_cdf};

/// One prediction: per-step for seq2seq, one per session for seq2one
/// (with `t = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub session: String,
    pub t: usize,
    pub y: f64,
    pub mu: f64,
    pub sigma: f64,
    pub nu: Option<f64>,
}

impl PredictionRecord {
    pub fn abs_err(&self) -> f64 {
        (self.y - self.mu).abs()
    }
}

/// How a nominal confidence level maps to an interval half-width.
///
/// `ExactQuantile` uses the central quantile of the predictive
/// distribution. `OneSigmaAt68` keeps the plus-minus-one-sigma reading
/// of the 68% level (and the exact quantile everywhere else).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageConvention {
    #[default]
    ExactQuantile,
    OneSigmaAt68,
}

pub const DEFAULT_COVERAGE_LEVELS: [f64; 5] = [0.5, 0.68, 0.8, 0.9, 0.95];
pub const DEFAULT_ECE_BINS: usize = 10;

fn require_records(records: &[PredictionRecord], n: usize, what: &str) -> Result<()> {
    if records.len() < n {
        return Err(Error::InsufficientData(format!(
            "{what} needs at least {n} records, got {}",
            records.len()
        )));
    }
    Ok(())
}

/// Is `y` inside the central interval of the record's predictive
/// distribution at the given level?
fn inside_interval(r: &PredictionRecord, level: f64, convention: CoverageConvention) -> Result<bool> {
    let z = (r.y - r.mu) / r.sigma;
    if convention == CoverageConvention::OneSigmaAt68 && (level - 0.68).abs() < 1e-12 {
        return Ok(z.abs() <= 1.0);
    }
    match r.nu {
        None => {
            let z_level = normal_quantile(0.5 * (1.0 + level))?;
            Ok(z.abs() <= z_level)
        }
        Some(nu) => {
            let cdf = student_t_cdf(z, nu)?;
            Ok((2.0 * cdf - 1.0).abs() <= level)
        }
    }
}

/// Fraction of records whose truth lies inside the central interval at
/// `level`.
pub fn coverage(
    records: &[PredictionRecord],
    level: f64,
    convention: CoverageConvention,
) -> Result<f64> {
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(Error::Contract(format!("coverage level must be in (0,1), got {level}")));
    }
    if records.is_empty() {
        return Err(Error::InsufficientData("coverage of zero records".into()));
    }
    let mut hits = 0usize;
    for r in records {
        if inside_interval(r, level, convention)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Mean absolute gap between nominal level and empirical coverage over
/// the given levels.
pub fn ece_coverage(
    records: &[PredictionRecord],
    levels: &[f64],
    convention: CoverageConvention,
) -> Result<f64> {
    require_records(records, 2, "ece_coverage")?;
    if levels.is_empty() {
        return Err(Error::Contract("ece_coverage needs at least one level".into()));
    }
    let mut total = 0.0;
    for &level in levels {
        total += (coverage(records, level, convention)? - level).abs();
    }
    Ok(total / levels.len() as f64)
}

/// One equal-count calibration bin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_sigma: f64,
    pub mean_abs_err: f64,
    pub count: usize,
}

/// Equal-count bins by predicted sigma, each with its mean sigma and
/// mean absolute error.
pub fn binned_calibration_table(
    records: &[PredictionRecord],
    n_bins: usize,
) -> Result<Vec<CalibrationBin>> {
    require_records(records, 2, "ece_binned")?;
    if n_bins < 2 {
        return Err(Error::Contract(format!("ece_binned needs >= 2 bins, got {n_bins}")));
    }
    // total order, so ties cannot make the result depend on input order
    let mut order: Vec<&PredictionRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        a.sigma
            .total_cmp(&b.sigma)
            .then(a.abs_err().total_cmp(&b.abs_err()))
            .then(a.session.cmp(&b.session))
            .then(a.t.cmp(&b.t))
    });
    let n = order.len();
    let base = n / n_bins;
    let rem = n % n_bins;
    let mut start = 0usize;
    let mut bins = Vec::new();
    for b in 0..n_bins {
        let size = base + usize::from(b < rem);
        if size == 0 {
            continue;
        }
        let bin = &order[start..start + size];
        start += size;
        bins.push(CalibrationBin {
            mean_sigma: bin.iter().map(|r| r.sigma).sum::<f64>() / size as f64,
            mean_abs_err: bin.iter().map(|r| r.abs_err()).sum::<f64>() / size as f64,
            count: size,
        });
    }
    Ok(bins)
}

/// Count-weighted mean over nonempty equal-count bins of
/// |mean sigma - mean |error||.
pub fn ece_binned(records: &[PredictionRecord], n_bins: usize) -> Result<f64> {
    let bins = binned_calibration_table(records, n_bins)?;
    let n: usize = bins.iter().map(|b| b.count).sum();
    Ok(bins
        .iter()
        .map(|b| (b.count as f64 / n as f64) * (b.mean_sigma - b.mean_abs_err).abs())
        .sum())
}

/// Pearson and Spearman correlation between predicted sigma and
/// absolute error.
pub fn error_uncertainty_correlation(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    require_records(records, 3, "error_uncertainty_correlation")?;
    let sigmas: Vec<f64> = records.iter().map(|r| r.sigma).collect();
    let errors: Vec<f64> = records.iter().map(|r| r.abs_err()).collect();
    let pearson_r = pearson(&sigmas, &errors)?;
    let spearman_rho = pearson(&average_ranks(&sigmas), &average_ranks(&errors))?;
    Ok((pearson_r, spearman_rho))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in a coordinate".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks with ties averaged.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Per-timestep mean predicted sigma and mean absolute error, with the
/// supporting record count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub t: usize,
    pub count: usize,
    pub mean_sigma: f64,
    pub mean_abs_err: f64,
}

pub fn temporal_curves(records: &[PredictionRecord]) -> Vec<TemporalRow> {
    let mut acc: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
    for r in records {
        let entry = acc.entry(r.t).or_insert((0, 0.0, 0.0));
        entry.0 += 1;
        entry.1 += r.sigma;
        entry.2 += r.abs_err();
    }
    acc.into_iter()
        .map(|(t, (count, sigma_sum, err_sum))| TemporalRow {
            t,
            count,
            mean_sigma: sigma_sum / count as f64,
            mean_abs_err: err_sum / count as f64,
        })
        .collect()
}

/// One exported case-study trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub session: String,
    /// `(t, mu, sigma, y)` per step, in time order.
    pub steps: Vec<(usize, f64, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaseStudies {
    pub well_calibrated: Trajectory,
    pub high_error_high_uncertainty: Trajectory,
    pub best_predicted: Trajectory,
}

/// Pick the best-predicted session (min MAE), the session with the
/// largest MAE x mean-sigma product, and the session whose mean sigma
/// tracks its MAE most closely.
pub fn select_case_studies(records: &[PredictionRecord]) -> Result<CaseStudies> {
    if records.is_empty() {
        return Err(Error::InsufficientData("case studies of zero records".into()));
    }
    let mut by_session: BTreeMap<&str, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_session.entry(&r.session).or_default().push(r);
    }
    struct Stat<'a> {
        session: &'a str,
        mae: f64,
        mean_sigma: f64,
    }
    let stats: Vec<Stat> = by_session
        .iter()
        .map(|(session, rs)| {
            let n = rs.len() as f64;
            Stat {
                session,
                mae: rs.iter().map(|r| r.abs_err()).sum::<f64>() / n,
                mean_sigma: rs.iter().map(|r| r.sigma).sum::<f64>() / n,
            }
        })
        .collect();
    // BTreeMap order makes ties resolve to the lexicographically first id
    let best = stats
        .iter()
        .min_by(|a, b| a.mae.total_cmp(&b.mae))
        .expect("nonempty");
    let high = stats
        .iter()
        .max_by(|a, b| (a.mae * a.mean_sigma).total_cmp(&(b.mae * b.mean_sigma)))
        .expect("nonempty");
    let calibrated = stats
        .iter()
        .min_by(|a, b| {
            (a.mean_sigma - a.mae)
                .abs()
                .total_cmp(&(b.mean_sigma - b.mae).abs())
        })
        .expect("nonempty");

    let trajectory = |session: &str| -> Trajectory {
        let mut steps: Vec<(usize, f64, f64, f64)> = by_session[session]
            .iter()
            .map(|r| (r.t, r.mu, r.sigma, r.y))
            .collect();
        steps.sort_by_key(|s| s.0);
        Trajectory {
            session: session.to_string(),
            steps,
        }
    };
    Ok(CaseStudies {
        well_calibrated: trajectory(calibrated.session),
        high_error_high_uncertainty: trajectory(high.session),
        best_predicted: trajectory(best.session),
    })
}

// ---- the full report -------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageRow {
    pub level: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SharpnessStats {
    pub mean_sigma: f64,
    /// `(p, sigma quantile)` at p in {0.1, 0.25, 0.5, 0.75, 0.9}.
    pub quantiles: Vec<(f64, f64)>,
    /// Equal-width histogram over the sigma range: `(lo, hi, count)`.
    pub histogram: Vec<(f64, f64, usize)>,
}

fn sharpness(records: &[PredictionRecord]) -> SharpnessStats {
    let mut sigmas: Vec<f64> = records.iter().map(|r| r.sigma).collect();
    sigmas.sort_by(f64::total_cmp);
    let n = sigmas.len();
    let mean = sigmas.iter().sum::<f64>() / n as f64;
    let quantile = |p: f64| -> f64 {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sigmas[lo] * (1.0 - frac) + sigmas[hi] * frac
    };
    let quantiles = [0.1, 0.25, 0.5, 0.75, 0.9]
        .iter()
        .map(|&p| (p, quantile(p)))
        .collect();
    let (lo, hi) = (sigmas[0], sigmas[n - 1]);
    let bins = 10usize;
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut histogram: Vec<(f64, f64, usize)> = (0..bins)
        .map(|b| (lo + b as f64 * width, lo + (b + 1) as f64 * width, 0))
        .collect();
    for &s in &sigmas {
        let mut b = if hi > lo {
            ((s - lo) / width) as usize
        } else {
            0
        };
        if b >= bins {
            b = bins - 1;
        }
        histogram[b].2 += 1;
    }
    SharpnessStats {
        mean_sigma: mean,
        quantiles,
        histogram,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub num_records: usize,
    pub convention: CoverageConvention,
    pub ece_binned: f64,
    pub ece_coverage: f64,
    pub coverage: Vec<CoverageRow>,
    pub sharpness: SharpnessStats,
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub temporal: Vec<TemporalRow>,
    pub case_studies: CaseStudies,
}

/// Compute every calibration metric at the default levels and binning.
pub fn calibration_report(
    records: &[PredictionRecord],
    convention: CoverageConvention,
) -> Result<CalibrationReport> {
    require_records(records, 2, "calibration_report")?;
    let coverage_rows = DEFAULT_COVERAGE_LEVELS
        .iter()
        .map(|&level| {
            Ok(CoverageRow {
                level,
                rate: coverage(records, level, convention)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (pearson_r, spearman_rho) = error_uncertainty_correlation(records)?;
    Ok(CalibrationReport {
        num_records: records.len(),
        convention,
        ece_binned: ece_binned(records, DEFAULT_ECE_BINS)?,
        ece_coverage: ece_coverage(records, &DEFAULT_COVERAGE_LEVELS, convention)?,
        coverage: coverage_rows,
        sharpness: sharpness(records),
        pearson_r,
        spearman_rho,
        temporal: temporal_curves(records),
        case_studies: select_case_studies(records)?,
    })
}

// ---- record CSV ---------------------------------------------------------------------

/// Write records as `session,t,y,mu,sigma[,nu]` CSV.
pub fn write_records(path: impl AsRef<Path>, records: &[PredictionRecord]) -> Result<()> {
    let with_nu = records.iter().any(|r| r.nu.is_some());
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = std::io::BufWriter::new(file);
    if with_nu {
        writeln!(out, "session,t,y,mu,sigma,nu")?;
    } else {
        writeln!(out, "session,t,y,mu,sigma")?;
    }
    for r in records {
        match (with_nu, r.nu) {
            (true, Some(nu)) => {
                writeln!(out, "{},{},{},{},{},{}", r.session, r.t, r.y, r.mu, r.sigma, nu)?
            }
            (true, None) => {
                writeln!(out, "{},{},{},{},{},", r.session, r.t, r.y, r.mu, r.sigma)?
            }
            (false, _) => writeln!(out, "{},{},{},{},{}", r.session, r.t, r.y, r.mu, r.sigma)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Read records written by [`write_records`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 || fields.len() > 6 {
            return Err(Error::Parse {
                line: lineno + 1,
                detail: format!("expected 5 or 6 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| Error::Parse {
                line: lineno + 1,
                detail: format!("field {i}: {e}"),
            })
        };
        records.push(PredictionRecord {
            session: fields[0].to_string(),
            t: fields[1].parse().map_err(|e| Error::Parse {
                line: lineno + 1,
                detail: format!("timestep: {e}"),
            })?,
            y: num(2)?,
            mu: num(3)?,
            sigma: num(4)?,
            nu: if fields.len() == 6 && !fields[5].is_empty() {
                Some(num(5)?)
            } else {
                None
            },
        });
    }
    Ok(records)
}
