//! Rate metrics, model evaluation over clips, and the ZCA motion baseline.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::error::{Result, SincError};
use crate::model::{self, ModelParams};
use crate::spectral::{self, Bandlimits, RateSeries, SpectralConfig};
use crate::util;

pub const ZCA_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when either side is constant.
    pub pearson_r: Option<f64>,
    pub n: usize,
}

impl Metrics {
    /// Metrics over paired rates (per minute).
    pub fn from_pairs(pred: &[f64], gt: &[f64]) -> Result<Metrics> {
        if pred.len() != gt.len() {
            return Err(SincError::invalid("paired rate lists differ in length"));
        }
        if pred.is_empty() {
            return Err(SincError::invalid("no overlapping samples"));
        }
        if pred.iter().chain(gt).any(|v| !v.is_finite()) {
            return Err(SincError::invalid("rates must be finite"));
        }
        let n = pred.len() as f64;
        let mae = pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
        let mse = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| (p - g).powi(2))
            .sum::<f64>()
            / n;
        Ok(Metrics {
            mae,
            rmse: mse.sqrt().max(mae),
            pearson_r: pearson(pred, gt),
            n: pred.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics always serialize")
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn min_spacing(times: &[f64]) -> Option<f64> {
    times.windows(2).map(|w| w[1] - w[0]).reduce(f64::min)
}

/// Pairs each predicted time with the nearest ground-truth time within half
/// the smaller sampling interval of the two series, then scores the pairs.
pub fn rate_metrics(pred: &RateSeries, gt: &RateSeries) -> Result<Metrics> {
    let spacing = match (min_spacing(pred.times()), min_spacing(gt.times())) {
        (Some(a), Some(b)) => a.min(b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => 0.0,
    };
    let tol = spacing / 2.0 + 1e-9;
    let gt_times = gt.times();
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (t, r) in pred.times().iter().zip(pred.rates()) {
        let idx = gt_times.partition_point(|x| x < t);
        let nearest = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter(|i| *i < gt_times.len())
            .min_by(|a, b| {
                (gt_times[*a] - t)
                    .abs()
                    .total_cmp(&(gt_times[*b] - t).abs())
            });
        if let Some(i) = nearest {
            if (gt_times[i] - t).abs() <= tol {
                p.push(*r);
                g.push(gt.rates()[i]);
            }
        }
    }
    Metrics::from_pairs(&p, &g)
}

fn window_starts(frames: usize, clip_len: usize, stride: usize) -> Result<Vec<usize>> {
    if clip_len < 2 || stride == 0 || frames < clip_len {
        return Err(SincError::invalid(format!(
            "cannot cut {clip_len}-frame windows at stride {stride} from {frames} frames"
        )));
    }
    Ok((0..=(frames - clip_len) / stride)
        .map(|i| i * stride)
        .collect())
}

/// Model rate per window (per minute), reported at window centres.
pub fn predict_rates(
    params: &ModelParams,
    clip: &Clip,
    clip_len: usize,
    stride: usize,
    band: &Bandlimits,
    cfg: &SpectralConfig,
) -> Result<RateSeries> {
    let starts = window_starts(clip.frames(), clip_len, stride)?;
    let rates = starts
        .iter()
        .map(|s| {
            let (y, _) = model::forward(params, &clip.window(*s, clip_len)?)?;
            spectral::peak_rate(&y, band, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let times = starts
        .iter()
        .map(|s| (*s as f64 + clip_len as f64 / 2.0) / clip.fps())
        .collect();
    RateSeries::new(times, rates)
}

/// Mean ground-truth rate (per minute) over the same windows as [`predict_rates`].
pub fn truth_rates(clip: &Clip, clip_len: usize, stride: usize) -> Result<RateSeries> {
    let gt = clip
        .gt_rate()
        .ok_or_else(|| SincError::invalid("clip has no ground-truth rate"))?;
    let starts = window_starts(clip.frames(), clip_len, stride)?;
    let rates = starts
        .iter()
        .map(|s| 60.0 * gt[*s..s + clip_len].iter().sum::<f64>() / clip_len as f64)
        .collect();
    let times = starts
        .iter()
        .map(|s| (*s as f64 + clip_len as f64 / 2.0) / clip.fps())
        .collect();
    RateSeries::new(times, rates)
}

/// Pooled metrics of a model over every window of every clip.
pub fn evaluate_model(
    params: &ModelParams,
    clips: &[Clip],
    clip_len: usize,
    stride: usize,
    band: &Bandlimits,
    cfg: &SpectralConfig,
) -> Result<Metrics> {
    let pairs = clips
        .par_iter()
        .map(|clip| {
            let pred = predict_rates(params, clip, clip_len, stride, band, cfg)?;
            let gt = truth_rates(clip, clip_len, stride)?;
            Ok((pred.rates().to_vec(), gt.rates().to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (pred, gt): (Vec<Vec<f64>>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
    Metrics::from_pairs(&pred.concat(), &gt.concat())
}

/// Models (original, adapted) evaluated on sets (original, new).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub original_on_original: Metrics,
    pub original_on_new: Metrics,
    pub adapted_on_original: Metrics,
    pub adapted_on_new: Metrics,
}

impl ForgettingReport {
    /// Rows are models, columns are evaluation sets.
    pub fn grid(&self) -> [[Metrics; 2]; 2] {
        [
            [self.original_on_original, self.original_on_new],
            [self.adapted_on_original, self.adapted_on_new],
        ]
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forgetting_report(
    original: &ModelParams,
    adapted: &ModelParams,
    original_set: &[Clip],
    new_set: &[Clip],
    clip_len: usize,
    stride: usize,
    band: &Bandlimits,
    cfg: &SpectralConfig,
) -> Result<ForgettingReport> {
    if original.config() != adapted.config() {
        return Err(SincError::invalid(
            "forgetting report needs models with one config",
        ));
    }
    let eval = |p: &ModelParams, set: &[Clip]| evaluate_model(p, set, clip_len, stride, band, cfg);
    Ok(ForgettingReport {
        original_on_original: eval(original, original_set)?,
        original_on_new: eval(original, new_set)?,
        adapted_on_original: eval(adapted, original_set)?,
        adapted_on_new: eval(adapted, new_set)?,
    })
}

/// Centered input projected by `W = E diag((lambda + ridge)^-1/2) E^T`;
/// returns the whitened matrix and `W`.
pub fn zca_whiten(motion: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (t, p) = motion.shape();
    if t < 2 || p == 0 {
        return Err(SincError::invalid("ZCA needs at least 2 rows and 1 column"));
    }
    if motion.iter().any(|v| !v.is_finite()) {
        return Err(SincError::invalid(
            "motion matrix contains non-finite values",
        ));
    }
    let mut centered = motion.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = centered.transpose() * &centered / (t as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let scale = DMatrix::from_diagonal(
        &eig.eigenvalues
            .map(|l| 1.0 / (l.max(0.0) + ZCA_RIDGE).sqrt()),
    );
    let w = &eig.eigenvectors * scale * eig.eigenvectors.transpose();
    Ok((centered * &w, w))
}

/// Average of the three whitened components with the highest in-band SNR,
/// each flipped to correlate positively with the best one.
pub fn zca_baseline(
    motion: &DMatrix<f64>,
    band: &Bandlimits,
    cfg: &SpectralConfig,
) -> Result<Vec<f64>> {
    let (z, _) = zca_whiten(motion)?;
    let cols: Vec<Vec<f64>> = z
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let mut scored = cols
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((spectral::snr(&spectral::psd(c, cfg)?, band)?, i)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let chosen: Vec<&Vec<f64>> = scored.iter().take(3).map(|(_, i)| &cols[*i]).collect();
    let top = chosen[0];
    let mut out = vec![0.0; top.len()];
    for c in &chosen {
        let dot: f64 = c.iter().zip(top).map(|(a, b)| a * b).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        out.iter_mut()
            .zip(c.iter())
            .for_each(|(o, v)| *o += sign * v);
    }
    let k = chosen.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRow {
    time_s: f64,
    rate_bpm: f64,
}

pub fn rates_to_csv(series: &RateSeries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (t, r) in series.times().iter().zip(series.rates()) {
        w.serialize(RateRow {
            time_s: *t,
            rate_bpm: *r,
        })
        .expect("in-memory csv write");
    }
    if series.is_empty() {
        w.write_record(["time_s", "rate_bpm"])
            .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn write_rates_csv(path: &Path, series: &RateSeries) -> Result<()> {
    util::write_atomic(path, rates_to_csv(series).as_bytes())
}

/// Reads a `time_s,rate_bpm` file; errors name the offending line.
pub fn read_rates_csv(path: &Path) -> Result<RateSeries> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut times = Vec::new();
    let mut rates = Vec::new();
    for row in reader.deserialize::<RateRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        times.push(row.time_s);
        rates.push(row.rate_bpm);
    }
    RateSeries::new(times, rates).map_err(|e| SincError::format(path, e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> SincError {
    let line = e.position().map(|p| p.line());
    let detail = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => {
            format!("expected {expected_len} fields, found {len}")
        }
        csv::ErrorKind::Utf8 { err, .. } => err.to_string(),
        _ => e.to_string(),
    };
    match (e.into_kind(), line) {
        (csv::ErrorKind::Io(io), _) => SincError::io(path, io),
        (_, Some(l)) => SincError::format(path, format!("line {l}: {detail}")),
        (_, None) => SincError::format(path, detail),
    }
}

/// Lays per-clip series end to end: part `i` is shifted by the summed
/// durations (seconds) of the parts before it.
pub fn chain_series(parts: &[(RateSeries, f64)]) -> Result<RateSeries> {
    let mut times = Vec::new();
    let mut rates = Vec::new();
    let mut offset = 0.0;
    for (series, duration) in parts {
        times.extend(series.times().iter().map(|t| t + offset));
        rates.extend_from_slice(series.rates());
        offset += duration;
    }
    RateSeries::new(times, rates)
}
