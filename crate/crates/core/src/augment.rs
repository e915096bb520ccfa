//! Clip augmentations.
//!
//! Invariant transforms (pixel noise, illumination shift, horizontal flip,
//! crop-and-resize, time reversal) leave the underlying rate untouched.
//! Frequency resampling by a factor `c` moves every embedded frequency to
//! `c * f`; the outcome records `c` so the loss can use the scaled band.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::error::{Result, SincError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub pixel_noise: bool,
    pub illumination: bool,
    pub flip: bool,
    pub crop: bool,
    pub reverse: bool,
    pub resample: bool,
    /// Per-pixel noise std on the 0-255 scale.
    pub pixel_noise_sigma: f64,
    pub illum_sigma: f64,
    pub flip_p: f64,
    pub crop_min_frac: f64,
    pub reverse_p: f64,
    pub resample_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            pixel_noise: true,
            illumination: true,
            flip: true,
            crop: true,
            reverse: true,
            resample: true,
            pixel_noise_sigma: 2.0,
            illum_sigma: 10.0,
            flip_p: 0.5,
            crop_min_frac: 0.5,
            reverse_p: 0.5,
            resample_range: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    /// Everything off.
    pub fn none() -> Self {
        AugmentConfig {
            pixel_noise: false,
            illumination: false,
            flip: false,
            crop: false,
            reverse: false,
            resample: false,
            ..Default::default()
        }
    }

    /// All but pixel noise and frequency resampling.
    pub fn personalization() -> Self {
        AugmentConfig {
            pixel_noise: false,
            resample: false,
            ..Default::default()
        }
    }

    /// Flip, illumination, crop and reversal only.
    pub fn test_time() -> Self {
        AugmentConfig {
            pixel_noise: false,
            resample: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(prob(self.flip_p) && prob(self.reverse_p)) {
            return Err(SincError::config(
                "augmentation probabilities must lie in [0, 1]",
            ));
        }
        if !(self.crop_min_frac > 0.0 && self.crop_min_frac <= 1.0) {
            return Err(SincError::config("crop_min_frac must lie in (0, 1]"));
        }
        let (lo, hi) = self.resample_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(SincError::config(
                "resample_range must satisfy 0 < lo <= hi",
            ));
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.illum_sigma >= 0.0) {
            return Err(SincError::config("noise sigmas must be nonnegative"));
        }
        Ok(())
    }

    /// Source frames needed to produce `out_len` output frames under any draw.
    pub fn source_len(&self, out_len: usize) -> usize {
        if self.resample {
            resample_source_len(self.resample_range.1, out_len)
        } else {
            out_len
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentTag {
    Resample,
    Crop,
    Flip,
    Reverse,
    Illumination,
    PixelNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub clip: Clip,
    /// Resampling factor `c`, 1.0 when no resampling was applied.
    pub band_scale: f64,
    pub applied: Vec<AugmentTag>,
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated as finite and nonnegative")
}

/// Adds iid `N(0, sigma^2)` to every value.
pub fn gaussian_pixel_noise<R: Rng + ?Sized>(clip: &Clip, sigma: f64, rng: &mut R) -> Clip {
    if sigma == 0.0 {
        return clip.clone();
    }
    let dist = normal(sigma);
    let data = clip
        .data()
        .iter()
        .map(|v| (f64::from(*v) + dist.sample(rng)) as f32)
        .collect();
    clip.map_data(data)
}

/// Adds one `N(0, sigma^2)` constant to the whole clip.
pub fn illumination_shift<R: Rng + ?Sized>(clip: &Clip, sigma: f64, rng: &mut R) -> Clip {
    if sigma == 0.0 {
        return clip.clone();
    }
    let delta = normal(sigma).sample(rng);
    let data = clip
        .data()
        .iter()
        .map(|v| (f64::from(*v) + delta) as f32)
        .collect();
    clip.map_data(data)
}

/// Mirrors every frame along the width axis.
pub fn flip_width(clip: &Clip) -> Clip {
    let d = clip.dims();
    let mut data = Vec::with_capacity(clip.data().len());
    for t in 0..d.frames {
        for w in 0..d.width {
            for h in 0..d.height {
                let src = clip.index(t, d.width - 1 - w, h, 0);
                data.extend_from_slice(&clip.data()[src..src + d.channels]);
            }
        }
    }
    clip.map_data(data)
}

pub fn horizontal_flip<R: Rng + ?Sized>(clip: &Clip, p: f64, rng: &mut R) -> Clip {
    if rng.random_bool(p) {
        flip_width(clip)
    } else {
        clip.clone()
    }
}

/// Reverses frame order (and the ground-truth trace with it).
pub fn reverse_frames(clip: &Clip) -> Clip {
    let n = clip.dims().frame_len();
    let data: Vec<f32> = clip
        .data()
        .chunks_exact(n)
        .rev()
        .flatten()
        .copied()
        .collect();
    let (dims, fps, _, gt, label) = clip.clone().into_parts();
    let gt = gt.map(|mut g| {
        g.reverse();
        g
    });
    Clip::from_parts_unchecked(dims, fps, data, gt, label)
}

pub fn time_reverse<R: Rng + ?Sized>(clip: &Clip, p: f64, rng: &mut R) -> Clip {
    if rng.random_bool(p) {
        reverse_frames(clip)
    } else {
        clip.clone()
    }
}

/// Crops the `side x side` square at `(x0, y0)` (width, height offsets) from
/// every frame and resizes it back bilinearly with aligned corners.
pub fn crop_resize_at(clip: &Clip, side: usize, x0: usize, y0: usize) -> Result<Clip> {
    let d = clip.dims();
    if d.width != d.height {
        return Err(SincError::invalid(format!(
            "crop needs square frames, got {}x{}",
            d.width, d.height
        )));
    }
    if side == 0 || x0 + side > d.width || y0 + side > d.height {
        return Err(SincError::invalid(format!(
            "crop of side {side} at ({x0}, {y0}) exceeds {}x{} frame",
            d.width, d.height
        )));
    }
    let size = d.width;
    let step = if size > 1 {
        (side - 1) as f64 / (size - 1) as f64
    } else {
        0.0
    };
    // (lower index, upper index, upper weight) per output coordinate
    let taps: Vec<(usize, usize, f64)> = (0..size)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(side - 1);
            let hi = (lo + 1).min(side - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect();

    let mut data = Vec::with_capacity(clip.data().len());
    for t in 0..d.frames {
        for &(w0, w1, fw) in &taps {
            for &(h0, h1, fh) in &taps {
                for c in 0..d.channels {
                    let at = |w: usize, h: usize| f64::from(clip.value(t, x0 + w, y0 + h, c));
                    let v = (1.0 - fw) * (1.0 - fh) * at(w0, h0)
                        + (1.0 - fw) * fh * at(w0, h1)
                        + fw * (1.0 - fh) * at(w1, h0)
                        + fw * fh * at(w1, h1);
                    data.push(v as f32);
                }
            }
        }
    }
    Ok(clip.map_data(data))
}

/// Random square crop with side in `[min_frac * W, W]`, resized back to `W x H`.
pub fn crop_resize<R: Rng + ?Sized>(clip: &Clip, min_frac: f64, rng: &mut R) -> Result<Clip> {
    let d = clip.dims();
    if d.width != d.height {
        return Err(SincError::invalid(format!(
            "crop needs square frames, got {}x{}",
            d.width, d.height
        )));
    }
    if !(min_frac > 0.0 && min_frac <= 1.0) {
        return Err(SincError::invalid(format!(
            "crop fraction {min_frac} outside (0, 1]"
        )));
    }
    let size = d.width;
    let lo = min_frac * size as f64;
    let side = if lo < size as f64 {
        rng.random_range(lo..=size as f64).round() as usize
    } else {
        size
    };
    let side = side.clamp(2.min(size), size);
    let x0 = rng.random_range(0..=size - side);
    let y0 = rng.random_range(0..=size - side);
    crop_resize_at(clip, side, x0, y0)
}

/// Source frames needed so that resampling by `c` to `out_len` frames never
/// reads past the end.
pub fn resample_source_len(c: f64, out_len: usize) -> usize {
    (c * (out_len.saturating_sub(1)) as f64 - 1e-9)
        .ceil()
        .max(0.0) as usize
        + 1
}

/// Output frame `j` is the source linearly interpolated at time index `j * c`.
pub fn freq_resample(clip: &Clip, c: f64, out_len: usize) -> Result<Clip> {
    if !(c.is_finite() && c > 0.0) {
        return Err(SincError::invalid(format!(
            "resampling factor must be positive, got {c}"
        )));
    }
    if out_len < 2 {
        return Err(SincError::invalid("resampled clip needs at least 2 frames"));
    }
    let needed = resample_source_len(c, out_len);
    if clip.frames() < needed {
        return Err(SincError::invalid(format!(
            "resampling by {c} to {out_len} frames needs {needed} source frames, clip has {}",
            clip.frames()
        )));
    }
    let n = clip.dims().frame_len();
    let last = clip.frames() - 1;
    let mut data = Vec::with_capacity(out_len * n);
    let mut gt_out = clip.gt_rate().map(|_| Vec::with_capacity(out_len));
    for j in 0..out_len {
        let pos = j as f64 * c;
        let i0 = (pos.floor() as usize).min(last);
        let i1 = (i0 + 1).min(last);
        let frac = pos - i0 as f64;
        let (a, b) = (clip.frame(i0), clip.frame(i1));
        data.extend(
            a.iter()
                .zip(b)
                .map(|(x, y)| ((1.0 - frac) * f64::from(*x) + frac * f64::from(*y)) as f32),
        );
        if let (Some(out), Some(gt)) = (gt_out.as_mut(), clip.gt_rate()) {
            out.push(c * ((1.0 - frac) * gt[i0] + frac * gt[i1]));
        }
    }
    let (dims, fps, _, _, label) = clip.clone().into_parts();
    Ok(Clip::from_parts_unchecked(
        dims.with_frames(out_len),
        fps,
        data,
        gt_out,
        label,
    ))
}

/// One augmented view of `source`, in the fixed order resample, crop, flip,
/// reverse, illumination, noise.
pub fn augment_view<R: Rng + ?Sized>(
    source: &Clip,
    out_len: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentOutcome> {
    cfg.validate()?;
    let mut applied = Vec::new();
    let mut band_scale = 1.0;
    let mut clip = if cfg.resample {
        let (lo, hi) = cfg.resample_range;
        band_scale = if lo < hi {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        applied.push(AugmentTag::Resample);
        freq_resample(source, band_scale, out_len)?
    } else if source.frames() == out_len {
        source.clone()
    } else {
        source.window(0, out_len)?
    };
    if cfg.crop {
        clip = crop_resize(&clip, cfg.crop_min_frac, rng)?;
        applied.push(AugmentTag::Crop);
    }
    if cfg.flip && rng.random_bool(cfg.flip_p) {
        clip = flip_width(&clip);
        applied.push(AugmentTag::Flip);
    }
    if cfg.reverse && rng.random_bool(cfg.reverse_p) {
        clip = reverse_frames(&clip);
        applied.push(AugmentTag::Reverse);
    }
    if cfg.illumination {
        clip = illumination_shift(&clip, cfg.illum_sigma, rng);
        applied.push(AugmentTag::Illumination);
    }
    if cfg.pixel_noise {
        clip = gaussian_pixel_noise(&clip, cfg.pixel_noise_sigma, rng);
        applied.push(AugmentTag::PixelNoise);
    }
    Ok(AugmentOutcome {
        clip,
        band_scale,
        applied,
    })
}

/// `n_views` independent views; view `i` draws from the stream
/// `(batch seed, i)`, where the batch seed is taken from `rng`.
pub fn augment_batch<R: Rng + ?Sized>(
    source: &Clip,
    out_len: usize,
    n_views: usize,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Vec<AugmentOutcome>> {
    if n_views == 0 {
        return Err(SincError::invalid("augment_batch needs at least one view"));
    }
    let batch_seed: u64 = rng.random();
    (0..n_views)
        .into_par_iter()
        .map(|i| {
            let mut view_rng = seed::rng_indexed(batch_seed, "augment-view", i as u64);
            augment_view(source, out_len, cfg, &mut view_rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::{ClipDims, ClipLabel};
    use crate::spectral::{psd, SpectralConfig};

    fn dims(frames: usize, size: usize, channels: usize) -> ClipDims {
        ClipDims {
            frames,
            width: size,
            height: size,
            channels,
        }
    }

    fn random_clip(frames: usize, size: usize, seed_: u64) -> Clip {
        let mut rng = seed::rng(seed_);
        let d = dims(frames, size, 3);
        let data = (0..d.len())
            .map(|_| rng.random_range(100.0f32..150.0))
            .collect();
        Clip::new(d, 30.0, data, Some(vec![1.2; frames]), ClipLabel::Positive).unwrap()
    }

    fn ramp_clip(frames: usize) -> Clip {
        let d = dims(frames, 1, 1);
        let data = (0..frames).map(|t| t as f32).collect();
        let gt = (0..frames).map(|t| 1.0 + t as f64).collect();
        Clip::new(d, 30.0, data, Some(gt), ClipLabel::Positive).unwrap()
    }

    #[test]
    fn pixel_noise_statistics() {
        let clip = random_clip(4, 8, 1);
        assert_eq!(gaussian_pixel_noise(&clip, 0.0, &mut seed::rng(1)), clip);
        let big = Clip::unlabeled(dims(521, 8, 3), 30.0, vec![128.0; 521 * 192]).unwrap();
        let noisy = gaussian_pixel_noise(&big, 2.0, &mut seed::rng(2));
        let diffs: Vec<f64> = noisy.data().iter().map(|v| f64::from(*v) - 128.0).collect();
        let (_, std) = crate::util::mean_std(&diffs);
        assert!(diffs.len() >= 100_000);
        assert!((1.95..=2.05).contains(&std), "std {std}");
        assert_eq!(noisy, gaussian_pixel_noise(&big, 2.0, &mut seed::rng(2)));
    }

    #[test]
    fn illumination_is_a_constant_offset() {
        let clip = random_clip(32, 4, 3);
        assert_eq!(illumination_shift(&clip, 0.0, &mut seed::rng(1)), clip);
        let shifted = illumination_shift(&clip, 10.0, &mut seed::rng(4));
        let offsets: Vec<f64> = shifted
            .data()
            .iter()
            .zip(clip.data())
            .map(|(a, b)| f64::from(*a) - f64::from(*b))
            .collect();
        assert!(offsets.iter().all(|o| (o - offsets[0]).abs() < 1e-3));
        let cfg = SpectralConfig::new(64, 30.0).unwrap();
        let trace = |c: &Clip| {
            (0..32)
                .map(|t| f64::from(c.value(t, 1, 2, 0)))
                .collect::<Vec<_>>()
        };
        let (a, b) = (
            psd(&trace(&clip), &cfg).unwrap(),
            psd(&trace(&shifted), &cfg).unwrap(),
        );
        for (x, y) in a.power().iter().zip(b.power()) {
            assert!((x - y).abs() < 1e-3 * x.max(1.0));
        }
    }

    #[test]
    fn flips_are_involutions() {
        let clip = random_clip(5, 4, 5);
        let mut rng = seed::rng(0);
        assert_eq!(
            horizontal_flip(&horizontal_flip(&clip, 1.0, &mut rng), 1.0, &mut rng),
            clip
        );
        assert_eq!(horizontal_flip(&clip, 0.0, &mut rng), clip);
        assert_ne!(flip_width(&clip), clip);
        assert_eq!(flip_width(&clip).value(2, 0, 1, 2), clip.value(2, 3, 1, 2));

        let uniform = Clip::unlabeled(dims(3, 4, 2), 30.0, vec![7.0; 96]).unwrap();
        assert_eq!(flip_width(&uniform), uniform);

        assert_eq!(
            time_reverse(&time_reverse(&clip, 1.0, &mut rng), 1.0, &mut rng),
            clip
        );
        assert_eq!(time_reverse(&clip, 0.0, &mut rng), clip);
        let ramp = reverse_frames(&ramp_clip(4));
        assert_eq!(ramp.data(), &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(ramp.gt_rate().unwrap(), &[4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn reversal_keeps_trace_spectra() {
        let clip = random_clip(40, 4, 6);
        let rev = reverse_frames(&clip);
        let cfg = SpectralConfig::new(64, 30.0).unwrap();
        let trace = |c: &Clip| {
            (0..40)
                .map(|t| f64::from(c.value(t, 2, 1, 1)))
                .collect::<Vec<_>>()
        };
        let (a, b) = (
            psd(&trace(&clip), &cfg).unwrap(),
            psd(&trace(&rev), &cfg).unwrap(),
        );
        for (x, y) in a.power().iter().zip(b.power()) {
            assert!((x - y).abs() <= 1e-9 * x.max(1.0));
        }
    }

    #[test]
    fn crop_full_side_is_identity() {
        let clip = random_clip(3, 6, 7);
        assert_eq!(crop_resize_at(&clip, 6, 0, 0).unwrap(), clip);
        let uniform = Clip::unlabeled(dims(2, 6, 1), 30.0, vec![42.5; 72]).unwrap();
        for s in 0..10 {
            assert_eq!(
                crop_resize(&uniform, 0.5, &mut seed::rng(s)).unwrap(),
                uniform
            );
        }
        let rect = Clip::unlabeled(
            ClipDims {
                frames: 2,
                width: 4,
                height: 3,
                channels: 1,
            },
            30.0,
            vec![0.0; 24],
        )
        .unwrap();
        assert!(matches!(
            crop_resize(&rect, 0.5, &mut seed::rng(0)),
            Err(SincError::InvalidInput(_))
        ));
    }

    #[test]
    fn crop_matches_hand_computed_bilinear_grid() {
        // frame value at (w, h) is 4w + h; the 2x2 block at (1, 1) holds
        // [[5, 6], [9, 10]] and is stretched with sample points 0, 1/3, 2/3, 1.
        let data = (0..16).map(|v| v as f32).collect::<Vec<_>>();
        let clip = Clip::unlabeled(dims(2, 4, 1), 30.0, [data.clone(), data].concat()).unwrap();
        let out = crop_resize_at(&clip, 2, 1, 1).unwrap();
        let third = 1.0 / 3.0;
        for w in 0..4 {
            for h in 0..4 {
                let expected = 5.0 + 4.0 * (w as f64 * third) + h as f64 * third;
                assert!((f64::from(out.value(1, w, h, 0)) - expected).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn resample_identity_and_ramp() {
        let clip = random_clip(10, 2, 8);
        assert_eq!(
            freq_resample(&clip, 1.0, 6).unwrap(),
            clip.window(0, 6).unwrap()
        );

        let ramp = freq_resample(&ramp_clip(10), 0.5, 6).unwrap();
        assert_eq!(ramp.data(), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5]);
        // gt rate interpolated then scaled by c
        assert!((ramp.gt_rate().unwrap()[1] - 0.5 * 1.5).abs() < 1e-12);

        assert_eq!(resample_source_len(1.4, 120), 168);
        assert!(matches!(
            freq_resample(&ramp_clip(10), 1.4, 8),
            Err(SincError::InvalidInput(_))
        ));
        assert!(freq_resample(&ramp_clip(11), 1.4, 8).is_ok());
    }

    #[test]
    fn batch_flags_off_copies_input() {
        let clip = random_clip(20, 4, 9);
        let views = augment_batch(&clip, 20, 3, &AugmentConfig::none(), &mut seed::rng(1)).unwrap();
        assert_eq!(views.len(), 3);
        for v in views {
            assert_eq!(v.clip, clip);
            assert_eq!(v.band_scale, 1.0);
            assert!(v.applied.is_empty());
        }
    }

    #[test]
    fn presets_never_resample() {
        let clip = random_clip(20, 4, 10);
        for cfg in [AugmentConfig::personalization(), AugmentConfig::test_time()] {
            for v in augment_batch(&clip, 20, 8, &cfg, &mut seed::rng(3)).unwrap() {
                assert_eq!(v.band_scale, 1.0);
                assert!(!v.applied.contains(&AugmentTag::PixelNoise));
                assert!(!v.applied.contains(&AugmentTag::Resample));
            }
        }
    }

    #[test]
    fn batch_is_deterministic_and_records_scale() {
        let clip = random_clip(40, 4, 11);
        let cfg = AugmentConfig::default();
        let a = augment_batch(&clip, 28, 6, &cfg, &mut seed::rng(5)).unwrap();
        let b = augment_batch(&clip, 28, 6, &cfg, &mut seed::rng(5)).unwrap();
        assert_eq!(a, b);
        for v in &a {
            assert!((0.6..1.4).contains(&v.band_scale));
            assert_eq!(v.clip.frames(), 28);
            let gt = v.clip.gt_rate().unwrap();
            assert!(gt.iter().all(|r| (r - 1.2 * v.band_scale).abs() < 1e-9));
        }
    }
}
