//! Frequency-domain losses over power spectra and their gradients.
//!
//! * bandwidth: share of non-DC power that falls outside `[a, b]`
//! * sparsity: share of in-band power that falls outside `±delta_f` of the
//!   in-band peak
//! * variance: squared distance between the CDF of the batch-mean normalized
//!   in-band spectrum and the uniform CDF
//!
//! Every loss returns `dL/dF` per one-sided bin; [`psd_backward`] carries that
//! gradient back to the time-domain waveform.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SincError};
use crate::spectral::{self, band_bins, Bandlimits, SpectralConfig, Spectrum};

/// Guard added to every power-ratio denominator.
pub const LOSS_EPS: f64 = 1e-8;

/// Tolerance when deciding whether a bin lies within `delta_f` of the peak.
const WINDOW_SLACK: f64 = 1e-9;

/// `dL/dF_k` for each one-sided bin of a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumGrad {
    pub d_power: Vec<f64>,
}

impl SpectrumGrad {
    pub fn zeros(n_bins: usize) -> Self {
        SpectrumGrad {
            d_power: vec![0.0; n_bins],
        }
    }

    pub fn scale(mut self, factor: f64) -> Self {
        self.d_power.iter_mut().for_each(|g| *g *= factor);
        self
    }

    fn add_scaled(&mut self, other: &SpectrumGrad, factor: f64) {
        for (g, o) in self.d_power.iter_mut().zip(&other.d_power) {
            *g += factor * o;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bandwidth: f64,
    pub sparsity: f64,
    pub variance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bandwidth: 1.0,
            sparsity: 1.0,
            variance: 1.0,
        }
    }
}

impl LossWeights {
    /// The training defaults. The variance term sums over every in-band bin,
    /// so it gets a small weight.
    pub fn training() -> Self {
        LossWeights {
            variance: 0.01,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.bandwidth, self.sparsity, self.variance];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SincError::config(
                "loss weights must be finite and nonnegative",
            ));
        }
        Ok(())
    }

    fn is_zero(&self) -> bool {
        self.bandwidth == 0.0 && self.sparsity == 0.0 && self.variance == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bandwidth: f64,
    pub sparsity: f64,
    pub variance: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn bandwidth_loss(spec: &Spectrum, band: &Bandlimits) -> Result<(f64, SpectrumGrad)> {
    let bins = band_bins(spec, band)?;
    let power = spec.power();
    let mut grad = SpectrumGrad::zeros(power.len());
    let total: f64 = power[1..].iter().sum();
    if total == 0.0 {
        return Ok((0.0, grad));
    }
    let inside: f64 = power[bins.clone()].iter().sum();
    let outside = (total - inside).max(0.0);
    let denom = total + LOSS_EPS;
    let loss = outside / denom;

    let d_in = -outside / (denom * denom);
    let d_out = (inside + LOSS_EPS) / (denom * denom);
    for (k, g) in grad.d_power.iter_mut().enumerate().skip(1) {
        *g = if bins.contains(&k) { d_in } else { d_out };
    }
    Ok((loss, grad))
}

pub fn sparsity_loss(spec: &Spectrum, band: &Bandlimits) -> Result<(f64, SpectrumGrad)> {
    let bins = band_bins(spec, band)?;
    let power = spec.power();
    let mut grad = SpectrumGrad::zeros(power.len());
    let inside: f64 = power[bins.clone()].iter().sum();
    if inside == 0.0 {
        return Ok((0.0, grad));
    }
    let peak = spec.peak_bin(&bins);
    let peak_freq = spec.freq(peak);
    let in_window = |k: usize| (spec.freq(k) - peak_freq).abs() <= band.delta_f + WINDOW_SLACK;

    let window: f64 = bins
        .clone()
        .filter(|&k| in_window(k))
        .map(|k| power[k])
        .sum();
    let spread = (inside - window).max(0.0);
    let denom = inside + LOSS_EPS;
    let loss = spread / denom;

    let d_window = -spread / (denom * denom);
    let d_spread = (window + LOSS_EPS) / (denom * denom);
    for k in bins {
        grad.d_power[k] = if in_window(k) { d_window } else { d_spread };
    }
    Ok((loss, grad))
}

/// Batch-level spread loss; one gradient per batch member.
pub fn variance_loss(batch: &[Spectrum], band: &Bandlimits) -> Result<(f64, Vec<SpectrumGrad>)> {
    let first = batch
        .first()
        .ok_or_else(|| SincError::invalid("variance loss needs a non-empty batch"))?;
    if batch
        .iter()
        .any(|s| s.nfft() != first.nfft() || s.fs() != first.fs())
    {
        return Err(SincError::invalid(
            "variance loss batch mixes spectral configurations",
        ));
    }
    let bins = band_bins(first, band)?;
    let lo = *bins.start();
    let width = bins.clone().count();
    let scale = 1.0 / batch.len() as f64;

    let sums: Vec<f64> = batch
        .iter()
        .map(|s| s.power()[bins.clone()].iter().sum::<f64>() + LOSS_EPS)
        .collect();
    let mut mean = vec![0.0; width];
    for (spec, sum) in batch.iter().zip(&sums) {
        for (m, p) in mean.iter_mut().zip(&spec.power()[bins.clone()]) {
            *m += scale * p / sum;
        }
    }

    // residual[j] = CDF_d[j] - CDF_u[j]
    let mut cdf = 0.0;
    let residual: Vec<f64> = mean
        .iter()
        .enumerate()
        .map(|(j, m)| {
            cdf += m;
            cdf - (j + 1) as f64 / width as f64
        })
        .collect();
    let loss = residual.iter().map(|r| r * r).sum();

    // dL/d mean[m] = 2 * sum_{j >= m} residual[j]
    let mut d_mean = vec![0.0; width];
    let mut acc = 0.0;
    for j in (0..width).rev() {
        acc += 2.0 * residual[j];
        d_mean[j] = acc;
    }

    let grads = batch
        .iter()
        .zip(&sums)
        .map(|(spec, sum)| {
            let inband = &spec.power()[bins.clone()];
            let dot: f64 = d_mean.iter().zip(inband).map(|(g, p)| g * p).sum();
            let mut grad = SpectrumGrad::zeros(spec.power().len());
            for (j, g) in d_mean.iter().enumerate() {
                grad.d_power[lo + j] = scale * (g / sum - dot / (sum * sum));
            }
            grad
        })
        .collect();
    Ok((loss, grads))
}

/// Backpropagates a spectrum gradient to the waveform that produced it.
///
/// The forward map is `y -> y - mean(y) -> zero-pad -> FFT -> |.|^2` (one-sided),
/// so the result already includes the mean-removal Jacobian. Runs in
/// `O(nfft log nfft)` through one inverse transform.
pub fn psd_backward(d_f: &SpectrumGrad, y: &[f64], cfg: &SpectralConfig) -> Result<Vec<f64>> {
    let transform = spectral::centered_fft(y, cfg)?;
    psd_backward_with(d_f, &transform, y.len(), cfg)
}

pub(crate) fn psd_backward_with(
    d_f: &SpectrumGrad,
    transform: &[Complex64],
    len: usize,
    cfg: &SpectralConfig,
) -> Result<Vec<f64>> {
    let nfft = cfg.nfft;
    let n_bins = cfg.n_bins();
    if d_f.d_power.len() != n_bins || transform.len() != nfft {
        return Err(SincError::invalid(format!(
            "spectrum gradient has {} bins, expected {}",
            d_f.d_power.len(),
            n_bins
        )));
    }
    if len > nfft || len == 0 {
        return Err(SincError::invalid("waveform length does not fit nfft"));
    }
    if d_f.d_power.iter().any(|g| !g.is_finite()) {
        return Err(SincError::Numeric("non-finite spectrum gradient".into()));
    }

    // dL/dz_n = sum_k dF_k * 2 Re(Y_k e^{+i 2 pi k n / N}) over one-sided k,
    // which is one unnormalized inverse transform of a Hermitian spectrum.
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    for (k, g) in d_f.d_power.iter().enumerate() {
        let self_conjugate = k == 0 || 2 * k == nfft;
        if self_conjugate {
            buf[k] = transform[k] * (2.0 * g);
        } else {
            buf[k] = transform[k] * *g;
            buf[nfft - k] = transform[nfft - k] * *g;
        }
    }
    spectral::fft_plan(nfft, true).process(&mut buf);

    let mut grad: Vec<f64> = buf[..len].iter().map(|c| c.re).collect();
    let mean = grad.iter().sum::<f64>() / len as f64;
    grad.iter_mut().for_each(|g| *g -= mean);
    Ok(grad)
}

/// Combined loss for a batch and its gradient with respect to each waveform.
pub fn total_loss(
    batch: &[Vec<f64>],
    band: &Bandlimits,
    cfg: &SpectralConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let scales = vec![1.0; batch.len()];
    total_loss_scaled(batch, &scales, band, cfg, weights)
}

/// [`total_loss`] for views resampled by per-view factors `band_scales`.
///
/// Bandwidth and sparsity for view `i` use `band.scaled(band_scales[i])`. The
/// variance term compares distributions over the unscaled band, which every
/// view shares.
pub fn total_loss_scaled(
    batch: &[Vec<f64>],
    band_scales: &[f64],
    band: &Bandlimits,
    cfg: &SpectralConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let view_bands: Vec<Bandlimits> = band_scales.iter().map(|c| band.scaled(*c)).collect();
    total_loss_banded(batch, &view_bands, band, cfg, weights)
}

/// [`total_loss`] with an explicit band per view for the bandwidth and
/// sparsity terms; `band` is used by the variance term.
pub fn total_loss_banded(
    batch: &[Vec<f64>],
    view_bands: &[Bandlimits],
    band: &Bandlimits,
    cfg: &SpectralConfig,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    weights.validate()?;
    let len = batch
        .first()
        .map(Vec::len)
        .ok_or_else(|| SincError::invalid("total loss needs a non-empty batch"))?;
    if batch.iter().any(|y| y.len() != len) {
        return Err(SincError::invalid("batch waveforms have unequal lengths"));
    }
    if view_bands.len() != batch.len() {
        return Err(SincError::invalid(format!(
            "{} view bands for a batch of {}",
            view_bands.len(),
            batch.len()
        )));
    }
    let n = batch.len() as f64;

    let mut spectra = Vec::with_capacity(batch.len());
    let mut transforms = Vec::with_capacity(batch.len());
    for y in batch {
        let (spec, transform) = spectral::psd_with_transform(y, cfg)?;
        spectra.push(spec);
        transforms.push(transform);
    }

    let mut grads: Vec<SpectrumGrad> = spectra
        .iter()
        .map(|s| SpectrumGrad::zeros(s.power().len()))
        .collect();
    let (mut bandwidth, mut sparsity) = (0.0, 0.0);
    for ((spec, view_band), grad) in spectra.iter().zip(view_bands).zip(grads.iter_mut()) {
        let (lb, gb) = bandwidth_loss(spec, view_band)?;
        let (ls, gs) = sparsity_loss(spec, view_band)?;
        bandwidth += lb / n;
        sparsity += ls / n;
        grad.add_scaled(&gb, weights.bandwidth / n);
        grad.add_scaled(&gs, weights.sparsity / n);
    }
    let (variance, gv) = variance_loss(&spectra, band)?;
    for (grad, g) in grads.iter_mut().zip(&gv) {
        grad.add_scaled(g, weights.variance);
    }

    let total =
        weights.bandwidth * bandwidth + weights.sparsity * sparsity + weights.variance * variance;
    let breakdown = LossBreakdown {
        bandwidth,
        sparsity,
        variance,
        total,
        weights: *weights,
    };

    let wave_grads = if weights.is_zero() {
        vec![vec![0.0; len]; batch.len()]
    } else {
        grads
            .iter()
            .zip(&transforms)
            .map(|(g, t)| psd_backward_with(g, t, len, cfg))
            .collect::<Result<_>>()?
    };
    Ok((breakdown, wave_grads))
}
