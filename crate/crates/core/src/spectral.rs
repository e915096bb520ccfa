//! Discrete Fourier analysis: one-sided power spectra, band discretization,
//! sliding-window rate estimation and spectral SNR.
//!
//! All spectra are computed from the mean-subtracted signal, zero-padded to
//! `nfft` and transformed with a rectangular window. Bin `k` sits at
//! `k * fs / nfft` Hz and the DC bin never takes part in any band sum.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::RangeInclusive;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SincError};

/// Zero-padded transform length used by default (0.333 bpm resolution at 30 fps).
pub const DEFAULT_NFFT: usize = 5400;

/// Slack used when discretizing band edges so that edges sitting exactly on a
/// bin are not lost to floating-point rounding.
const EDGE_SLACK: f64 = 1e-9;

const SNR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralConfig {
    pub nfft: usize,
    pub fs: f64,
}

impl SpectralConfig {
    pub fn new(nfft: usize, fs: f64) -> Result<Self> {
        let cfg = SpectralConfig { nfft, fs };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_fs(fs: f64) -> Result<Self> {
        Self::new(DEFAULT_NFFT, fs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nfft < 2 {
            return Err(SincError::config(format!(
                "nfft must be >= 2, got {}",
                self.nfft
            )));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(SincError::config(format!(
                "fs must be positive, got {}",
                self.fs
            )));
        }
        Ok(())
    }

    /// Number of one-sided bins, `nfft / 2 + 1`.
    pub fn n_bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Width of one bin in Hz.
    pub fn resolution(&self) -> f64 {
        self.fs / self.nfft as f64
    }

    pub fn bin_freq(&self, k: usize) -> f64 {
        k as f64 * self.resolution()
    }
}

/// Signal band `[a, b]` in Hz together with the sparsity half-width `delta_f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bandlimits {
    pub a: f64,
    pub b: f64,
    pub delta_f: f64,
}

impl Bandlimits {
    pub fn new(a: f64, b: f64, delta_f: f64) -> Result<Self> {
        let band = Bandlimits { a, b, delta_f };
        band.validate()?;
        Ok(band)
    }

    /// Default pulse band, 40 to 180 bpm with a 6 bpm sparsity half-width.
    pub fn pulse() -> Self {
        Bandlimits {
            a: 0.66,
            b: 3.0,
            delta_f: 0.1,
        }
    }

    /// Respiration band, 6 to 30 breaths per minute.
    pub fn respiration() -> Self {
        Bandlimits {
            a: 0.1,
            b: 0.5,
            delta_f: 0.08 / 3.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.a.is_finite() && self.b.is_finite() && self.delta_f.is_finite();
        if !finite || self.a <= 0.0 || self.a >= self.b {
            return Err(SincError::InvalidBand(format!(
                "need 0 < a < b, got a={} b={}",
                self.a, self.b
            )));
        }
        if self.delta_f <= 0.0 || 2.0 * self.delta_f >= self.b - self.a {
            return Err(SincError::InvalidBand(format!(
                "need 0 < 2*delta_f < b - a, got delta_f={} for [{}, {}]",
                self.delta_f, self.a, self.b
            )));
        }
        Ok(())
    }

    /// Checks the band against the Nyquist limit of a sampling rate.
    pub fn validate_for(&self, fs: f64) -> Result<()> {
        self.validate()?;
        if self.b >= fs / 2.0 {
            return Err(SincError::InvalidBand(format!(
                "upper cutoff {} Hz is not below Nyquist {} Hz",
                self.b,
                fs / 2.0
            )));
        }
        Ok(())
    }

    /// The band seen by a clip resampled by `c`: every edge and the sparsity
    /// half-width move with the signal.
    pub fn scaled(&self, c: f64) -> Self {
        Bandlimits {
            a: self.a * c,
            b: self.b * c,
            delta_f: self.delta_f * c,
        }
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.a && f <= self.b
    }

    pub fn bpm_range(&self) -> (f64, f64) {
        (60.0 * self.a, 60.0 * self.b)
    }
}

/// One-sided power spectrum, `power[k] = |Y_k|^2` for `k = 0..=nfft/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    power: Vec<f64>,
    fs: f64,
    nfft: usize,
}

impl Spectrum {
    pub fn from_power(power: Vec<f64>, fs: f64, nfft: usize) -> Result<Self> {
        SpectralConfig::new(nfft, fs)?;
        if power.len() != nfft / 2 + 1 {
            return Err(SincError::invalid(format!(
                "spectrum length {} does not match nfft {} (expected {})",
                power.len(),
                nfft,
                nfft / 2 + 1
            )));
        }
        if power.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SincError::invalid(
                "spectrum power must be finite and nonnegative",
            ));
        }
        Ok(Spectrum { power, fs, nfft })
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    pub fn config(&self) -> SpectralConfig {
        SpectralConfig {
            nfft: self.nfft,
            fs: self.fs,
        }
    }

    pub fn freq(&self, k: usize) -> f64 {
        k as f64 * self.fs / self.nfft as f64
    }

    pub fn scaled(&self, factor: f64) -> Spectrum {
        Spectrum {
            power: self.power.iter().map(|p| p * factor).collect(),
            fs: self.fs,
            nfft: self.nfft,
        }
    }

    /// Index of the largest in-band bin; ties go to the lowest frequency.
    pub fn peak_bin(&self, bins: &RangeInclusive<usize>) -> usize {
        let mut best = *bins.start();
        for k in bins.clone() {
            if self.power[k] > self.power[best] {
                best = k;
            }
        }
        best
    }

    /// Frequency (Hz) of the in-band peak.
    pub fn peak_freq(&self, band: &Bandlimits) -> Result<f64> {
        let bins = band_bins(self, band)?;
        Ok(self.freq(self.peak_bin(&bins)))
    }
}

/// Window-centred rate estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSeries {
    times: Vec<f64>,
    rates: Vec<f64>,
}

impl RateSeries {
    pub fn new(times: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if times.len() != rates.len() {
            return Err(SincError::invalid(format!(
                "rate series has {} times but {} rates",
                times.len(),
                rates.len()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SincError::invalid(
                "rate series times must be strictly increasing",
            ));
        }
        if times.iter().chain(rates.iter()).any(|v| !v.is_finite()) {
            return Err(SincError::invalid("rate series values must be finite"));
        }
        Ok(RateSeries { times, rates })
    }

    pub fn empty() -> Self {
        RateSeries {
            times: Vec::new(),
            rates: Vec::new(),
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Rates in beats (or breaths) per minute.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

type PlanCache = (FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>);

thread_local! {
    static PLANS: RefCell<PlanCache> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

pub(crate) fn fft_plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (planner, cache) = &mut *guard;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn check_waveform(y: &[f64], cfg: &SpectralConfig) -> Result<()> {
    cfg.validate()?;
    if y.len() < 2 {
        return Err(SincError::invalid(format!(
            "waveform needs at least 2 samples, got {}",
            y.len()
        )));
    }
    if y.len() > cfg.nfft {
        return Err(SincError::invalid(format!(
            "waveform length {} exceeds nfft {}",
            y.len(),
            cfg.nfft
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(SincError::invalid("waveform contains non-finite samples"));
    }
    Ok(())
}

/// Full complex transform of the mean-subtracted, zero-padded waveform.
pub(crate) fn centered_fft(y: &[f64], cfg: &SpectralConfig) -> Result<Vec<Complex64>> {
    check_waveform(y, cfg)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.nfft];
    for (slot, v) in buf.iter_mut().zip(y) {
        slot.re = v - mean;
    }
    fft_plan(cfg.nfft, false).process(&mut buf);
    Ok(buf)
}

fn one_sided_power(transform: &[Complex64], cfg: &SpectralConfig) -> Spectrum {
    let power = transform[..cfg.n_bins()]
        .iter()
        .map(|c| c.norm_sqr())
        .collect();
    Spectrum {
        power,
        fs: cfg.fs,
        nfft: cfg.nfft,
    }
}

/// Power spectral density `|FFT(y - mean(y))|^2`, one-sided.
pub fn psd(y: &[f64], cfg: &SpectralConfig) -> Result<Spectrum> {
    let transform = centered_fft(y, cfg)?;
    Ok(one_sided_power(&transform, cfg))
}

/// PSD together with the complex transform it came from (for backpropagation).
pub(crate) fn psd_with_transform(
    y: &[f64],
    cfg: &SpectralConfig,
) -> Result<(Spectrum, Vec<Complex64>)> {
    let transform = centered_fft(y, cfg)?;
    Ok((one_sided_power(&transform, cfg), transform))
}

/// Bins `[ceil(a*nfft/fs), floor(b*nfft/fs)]`, never including DC.
pub fn band_bins(spec: &Spectrum, band: &Bandlimits) -> Result<RangeInclusive<usize>> {
    band_bins_for(&spec.config(), band)
}

pub fn band_bins_for(cfg: &SpectralConfig, band: &Bandlimits) -> Result<RangeInclusive<usize>> {
    band.validate_for(cfg.fs)?;
    let scale = cfg.nfft as f64 / cfg.fs;
    let lo = ((band.a * scale - EDGE_SLACK).ceil() as usize).max(1);
    let hi = ((band.b * scale + EDGE_SLACK).floor() as usize).min(cfg.nfft / 2);
    if lo > hi {
        return Err(SincError::InvalidBand(format!(
            "band [{}, {}] Hz contains no bin at resolution {} Hz",
            band.a,
            band.b,
            cfg.resolution()
        )));
    }
    Ok(lo..=hi)
}

/// Rate (per minute) of the in-band PSD peak of a single window.
pub fn peak_rate(y: &[f64], band: &Bandlimits, cfg: &SpectralConfig) -> Result<f64> {
    Ok(60.0 * psd(y, cfg)?.peak_freq(band)?)
}

/// Sliding-window peak-frequency tracking.
///
/// Each window of `window_s` seconds, advanced by `hop_s`, reports 60 times its
/// in-band PSD argmax frequency at the window centre.
pub fn stft_rates(
    y: &[f64],
    window_s: f64,
    hop_s: f64,
    band: &Bandlimits,
    cfg: &SpectralConfig,
) -> Result<RateSeries> {
    cfg.validate()?;
    if !(hop_s.is_finite() && hop_s > 0.0) {
        return Err(SincError::invalid(format!(
            "hop must be positive, got {hop_s}"
        )));
    }
    if !(window_s.is_finite() && window_s > 0.0) {
        return Err(SincError::invalid(format!(
            "window must be positive, got {window_s}"
        )));
    }
    let window = (window_s * cfg.fs).round() as usize;
    let hop = ((hop_s * cfg.fs).round() as usize).max(1);
    if window < 2 || y.len() < window {
        return Err(SincError::invalid(format!(
            "waveform of {} samples is shorter than one {}-sample window",
            y.len(),
            window
        )));
    }
    let bins = band_bins_for(cfg, band)?;
    let mut times = Vec::new();
    let mut rates = Vec::new();
    let mut start = 0;
    while start + window <= y.len() {
        let spec = psd(&y[start..start + window], cfg)?;
        rates.push(60.0 * spec.freq(spec.peak_bin(&bins)));
        times.push((start as f64 + window as f64 / 2.0) / cfg.fs);
        start += hop;
    }
    RateSeries::new(times, rates)
}

/// In-band power over out-of-band power (DC excluded), `P_in / (P_out + 1e-12)`.
pub fn snr(spec: &Spectrum, signal_band: &Bandlimits) -> Result<f64> {
    let bins = band_bins(spec, signal_band)?;
    let total: f64 = spec.power[1..].iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = spec.power[bins].iter().sum();
    let outside = (total - inside).max(0.0);
    Ok(inside / (outside + SNR_EPS))
}
