//! Synthetic data with known ground truth.
//!
//! Positive clips hide a quasi-periodic signal in a fixed subset of pixel and
//! channel traces (the "skin" layout, derived from the generator seed) on top
//! of a 128 baseline, white noise, an optional out-of-band distractor and an
//! optional slow, spatially graded illumination drift. Poisoned clips are one static frame plus
//! per-frame noise. Motion matrices are the respiration analog of vertical
//! optical flow.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::{Clip, ClipDims, ClipLabel};
use crate::error::{Result, SincError};
use crate::seed;
use crate::util;

pub const BASELINE: f64 = 128.0;
pub const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Distractor {
    pub freq: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub fps: f64,
    /// Range (Hz) the base rate of each clip is drawn from.
    pub rate_range: (f64, f64),
    pub signal_amplitude: f64,
    pub carrier_mask_frac: f64,
    pub noise_sigma: f64,
    /// Largest fractional deviation of the instantaneous rate from the base rate.
    pub drift: f64,
    #[serde(default)]
    pub distractor: Option<Distractor>,
    /// Amplitude of a slow (< 0.2 Hz) brightness wander from a light source at
    /// one side of the frame: it falls off linearly across the width and is
    /// tinted per channel.
    #[serde(default)]
    pub illumination_drift: f64,
    /// Per-channel multiplier of the carrier gains; empty means all ones.
    #[serde(default)]
    pub channel_gains: Vec<f64>,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec::pulse()
    }
}

impl GenSpec {
    /// Pulse analog: 120 frames at 30 fps on an 8x8x3 grid.
    pub fn pulse() -> Self {
        GenSpec {
            frames: 120,
            width: 8,
            height: 8,
            channels: 3,
            fps: 30.0,
            rate_range: (0.8, 2.5),
            signal_amplitude: 2.0,
            carrier_mask_frac: 0.5,
            noise_sigma: 3.0,
            drift: 0.05,
            distractor: Some(Distractor {
                freq: 0.3,
                amplitude: 6.0,
            }),
            illumination_drift: 0.0,
            channel_gains: Vec::new(),
            seed: 0,
        }
    }

    /// Respiration analog: 300 frames at 10 fps.
    pub fn respiration() -> Self {
        GenSpec {
            frames: 300,
            fps: 10.0,
            rate_range: (0.15, 0.45),
            distractor: Some(Distractor {
                freq: 1.2,
                amplitude: 3.0,
            }),
            ..GenSpec::pulse()
        }
    }

    pub fn dims(&self) -> ClipDims {
        ClipDims {
            frames: self.frames,
            width: self.width,
            height: self.height,
            channels: self.channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(SincError::config(
                "generator dims must be positive with frames >= 2",
            ));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(SincError::config("generator fps must be positive"));
        }
        let (lo, hi) = self.rate_range;
        if !(lo > 0.0 && lo <= hi && hi < self.fps / 2.0) {
            return Err(SincError::config(format!(
                "rate_range [{lo}, {hi}] Hz must lie inside (0, {}) Hz",
                self.fps / 2.0
            )));
        }
        let nonneg = [
            self.signal_amplitude,
            self.noise_sigma,
            self.drift,
            self.illumination_drift,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SincError::config(
                "amplitudes, noise and drift must be nonnegative",
            ));
        }
        if self.drift >= 1.0 {
            return Err(SincError::config("drift must be below 1"));
        }
        if !(self.carrier_mask_frac > 0.0 && self.carrier_mask_frac <= 1.0) {
            return Err(SincError::config("carrier_mask_frac must lie in (0, 1]"));
        }
        if !self.channel_gains.is_empty()
            && (self.channel_gains.len() != self.channels
                || self
                    .channel_gains
                    .iter()
                    .any(|g| !g.is_finite() || *g < 0.0))
        {
            return Err(SincError::config(
                "channel_gains needs one nonnegative gain per channel",
            ));
        }
        if let Some(d) = &self.distractor {
            if !(d.freq > 0.0 && d.freq < self.fps / 2.0 && d.amplitude >= 0.0) {
                return Err(SincError::config("distractor must sit below Nyquist"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML encoding.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("GenSpec always serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Carrier traces (flat index within a frame) and their signal gains.
fn carrier_layout(spec: &GenSpec) -> Vec<(usize, f64)> {
    let mut rng = seed::rng_for(spec.seed, "carrier-layout");
    let n = spec.width * spec.height * spec.channels;
    let count = ((spec.carrier_mask_frac * n as f64).round() as usize).clamp(1, n);
    let mut picked: Vec<usize> = sample(&mut rng, n, count).into_iter().collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| (i, rng.random_range(0.5..=1.0)))
        .collect()
}

const LIGHT_TINT: [f64; 3] = [1.0, 0.8, 0.6];

/// Per-trace gain of the illumination wander, from 1.5 at the first column to
/// 0.5 at the last, times the channel tint.
fn light_pattern(spec: &GenSpec) -> Vec<f64> {
    let per_column = spec.height * spec.channels;
    let span = (spec.width.max(2) - 1) as f64;
    (0..spec.width * per_column)
        .map(|i| {
            let w = (i / per_column) as f64;
            (1.5 - w / span) * LIGHT_TINT[i % spec.channels % LIGHT_TINT.len()]
        })
        .collect()
}

fn illumination_wander<R: Rng + ?Sized>(spec: &GenSpec, frames: usize, rng: &mut R) -> Vec<f64> {
    if spec.illumination_drift == 0.0 {
        return vec![0.0; frames];
    }
    let comps: Vec<(f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.02..0.15),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    (0..frames)
        .map(|n| {
            let t = n as f64 / spec.fps;
            spec.illumination_drift
                * comps
                    .iter()
                    .map(|(f, p)| (2.0 * PI * f * t + p).sin())
                    .sum::<f64>()
                / comps.len() as f64
        })
        .collect()
}

/// One positive clip; content comes from `rng`, the carrier layout from the spec seed.
pub fn gen_positive<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> Result<Clip> {
    spec.validate()?;
    let dims = spec.dims();
    let frames = spec.frames;
    let (lo, hi) = spec.rate_range;
    let base = if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    };

    // smooth instantaneous rate: one slow sinusoidal excursion of +-drift
    let period = rng.random_range(1.0..2.0) * frames as f64 / spec.fps;
    let wobble_phase = rng.random_range(0.0..2.0 * PI);
    let gt: Vec<f64> = (0..frames)
        .map(|n| {
            let t = n as f64 / spec.fps;
            let f = base * (1.0 + spec.drift * (2.0 * PI * t / period + wobble_phase).sin());
            f.clamp(lo, hi)
        })
        .collect();
    let mut phase = rng.random_range(0.0..2.0 * PI);
    let signal: Vec<f64> = gt
        .iter()
        .map(|f| {
            let s = spec.signal_amplitude * phase.sin();
            phase += 2.0 * PI * f / spec.fps;
            s
        })
        .collect();

    let distractor: Vec<f64> = match &spec.distractor {
        Some(d) => {
            let p = rng.random_range(0.0..2.0 * PI);
            (0..frames)
                .map(|n| d.amplitude * (2.0 * PI * d.freq * n as f64 / spec.fps + p).sin())
                .collect()
        }
        None => vec![0.0; frames],
    };
    let wander = illumination_wander(spec, frames, rng);

    let frame_len = dims.frame_len();
    let light = light_pattern(spec);
    let mut gains = vec![0.0; frame_len];
    for (i, g) in carrier_layout(spec) {
        gains[i] = g * spec.channel_gains.get(i % spec.channels).unwrap_or(&1.0);
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(dims.len());
    for t in 0..frames {
        let common = BASELINE + distractor[t];
        for (g, l) in gains.iter().zip(&light) {
            let v = common + l * wander[t] + g * signal[t] + noise.sample(rng);
            data.push(v as f32);
        }
    }
    Clip::new(dims, spec.fps, data, Some(gt), ClipLabel::Positive)
}

/// A static smooth frame repeated `frames` times plus per-frame white noise.
pub fn gen_poisoned<R: Rng + ?Sized>(spec: &GenSpec, rng: &mut R) -> Result<Clip> {
    spec.validate()?;
    let dims = spec.dims();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..10.0),
                rng.random_range(0.0..1.5),
                rng.random_range(0.0..1.5),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let offsets: Vec<f64> = (0..spec.channels)
        .map(|_| rng.random_range(-10.0..10.0))
        .collect();
    let mut still = Vec::with_capacity(dims.frame_len());
    for w in 0..spec.width {
        for h in 0..spec.height {
            let (u, v) = (w as f64 / spec.width as f64, h as f64 / spec.height as f64);
            let pattern: f64 = waves
                .iter()
                .map(|(a, kx, ky, p)| a * (2.0 * PI * (kx * u + ky * v) + p).cos())
                .sum();
            for off in &offsets {
                still.push(BASELINE + pattern + off);
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let mut data = Vec::with_capacity(dims.len());
    for _ in 0..spec.frames {
        data.extend(still.iter().map(|v| (v + noise.sample(rng)) as f32));
    }
    Clip::new(dims, spec.fps, data, None, ClipLabel::Poisoned)
}

/// `n_clips` positive clips of `round(source_len_factor * frames)` frames,
/// clip `i` drawn from the stream `(spec.seed, "clip", i)`.
pub fn generate_clips(spec: &GenSpec, n_clips: usize, source_len_factor: f64) -> Result<Vec<Clip>> {
    spec.validate()?;
    if !(source_len_factor >= 1.0 && source_len_factor.is_finite()) {
        return Err(SincError::config("source_len_factor must be at least 1"));
    }
    let source = GenSpec {
        frames: (source_len_factor * spec.frames as f64).round() as usize,
        ..spec.clone()
    };
    (0..n_clips)
        .into_par_iter()
        .map(|i| gen_positive(&source, &mut seed::rng_indexed(spec.seed, "clip", i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: ClipLabel,
    pub fps: f64,
    pub frames: usize,
    pub gt_mean_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub spec_hash: String,
    pub source_len_factor: f64,
    pub spec: GenSpec,
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SincError::io(path, e))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| SincError::format(path, e.to_string()))?;
        if manifest.schema_version != MANIFEST_SCHEMA {
            return Err(SincError::format(
                path,
                format!("unsupported manifest schema {}", manifest.schema_version),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if !manifest.entries.iter().all(|e| seen.insert(&e.path)) {
            return Err(SincError::format(path, "duplicate clip paths"));
        }
        Ok(manifest)
    }

    /// Loads a manifest given either its path or the directory holding it.
    pub fn locate(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::load(&file)?, dir))
    }

    pub fn load_clips(&self, dir: &Path) -> Result<Vec<Clip>> {
        self.entries
            .par_iter()
            .map(|e| Clip::load(&dir.join(&e.path)))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest always serializes")
    }
}

/// Writes clips and a manifest into `out_dir`; rerunning reproduces every byte.
pub fn gen_dataset(
    spec: &GenSpec,
    n_clips: usize,
    source_len_factor: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let clips = generate_clips(spec, n_clips, source_len_factor)?;
    std::fs::create_dir_all(out_dir).map_err(|e| SincError::io(out_dir, e))?;
    let entries = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let name = format!("clip_{i:04}.sclip");
            clip.save(&out_dir.join(&name))?;
            Ok(ManifestEntry {
                path: name,
                label: clip.label(),
                fps: clip.fps(),
                frames: clip.frames(),
                gt_mean_hz: clip.gt_mean_rate(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA,
        seed: spec.seed,
        spec_hash: spec.hash(),
        source_len_factor,
        spec: spec.clone(),
        entries,
    };
    util::write_atomic(&out_dir.join(MANIFEST_FILE), manifest.to_toml().as_bytes())?;
    Ok(manifest)
}

/// `frames x columns` matrix where a random fifth of the columns carry
/// `amplitude * sin(2 pi rate t)` with random signed gains, plus white noise.
pub fn gen_motion_matrix<R: Rng + ?Sized>(
    frames: usize,
    columns: usize,
    rate: f64,
    amplitude: f64,
    noise_sigma: f64,
    fs: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if columns == 0 || frames < 2 {
        return Err(SincError::invalid(
            "motion matrix needs >= 1 column and >= 2 frames",
        ));
    }
    if !(noise_sigma >= 0.0 && fs > 0.0 && rate >= 0.0) {
        return Err(SincError::invalid("motion matrix parameters out of range"));
    }
    let carriers = ((columns as f64 * 0.2).round() as usize).clamp(1, columns);
    let mut gains = vec![0.0; columns];
    for i in sample(rng, columns, carriers) {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        gains[i] = sign * rng.random_range(0.5..=1.0);
    }
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut m = DMatrix::zeros(frames, columns);
    for t in 0..frames {
        let s = amplitude * (2.0 * PI * rate * t as f64 / fs + phase).sin();
        for (p, g) in gains.iter().enumerate() {
            m[(t, p)] = g * s + noise.sample(rng);
        }
    }
    Ok(m)
}
