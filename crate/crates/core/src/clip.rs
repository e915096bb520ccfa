//! Video-like clip tensors and their single-file binary format.
//!
//! Layout is frame-major `T x W x H x C`: the value of pixel `(w, h)` in
//! channel `c` at frame `t` lives at `((t * W + w) * H + h) * C + c`.
//!
//! File layout (all little-endian):
//!
//! ```text
//! "SINCCLIP" | u32 version | u32 T | u32 W | u32 H | u32 C | f64 fps
//! | u8 label (0 positive, 1 poisoned) | u8 has_gt | [T x f64 gt rate, Hz]
//! | T*W*H*C x f32 pixel values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SincError};
use crate::util;

pub const CLIP_MAGIC: &[u8; 8] = b"SINCCLIP";
const CLIP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipLabel {
    Positive,
    Poisoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ClipDims {
    pub fn frame_len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_frames(&self, frames: usize) -> ClipDims {
        ClipDims { frames, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    dims: ClipDims,
    fps: f64,
    data: Vec<f32>,
    gt_rate: Option<Vec<f64>>,
    label: ClipLabel,
}

impl Clip {
    pub fn new(
        dims: ClipDims,
        fps: f64,
        data: Vec<f32>,
        gt_rate: Option<Vec<f64>>,
        label: ClipLabel,
    ) -> Result<Self> {
        if dims.frames < 2 || dims.frame_len() == 0 {
            return Err(SincError::invalid(format!("degenerate clip dims {dims:?}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(SincError::invalid(format!(
                "fps must be positive, got {fps}"
            )));
        }
        if data.len() != dims.len() {
            return Err(SincError::invalid(format!(
                "clip data has {} values, dims {:?} need {}",
                data.len(),
                dims,
                dims.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(SincError::invalid("clip contains non-finite values"));
        }
        match (&gt_rate, label) {
            (Some(gt), ClipLabel::Positive) => {
                if gt.len() != dims.frames || gt.iter().any(|r| !r.is_finite() || *r <= 0.0) {
                    return Err(SincError::invalid("ground-truth rate trace malformed"));
                }
            }
            (None, ClipLabel::Poisoned) => {}
            (Some(_), ClipLabel::Poisoned) => {
                return Err(SincError::invalid("poisoned clips carry no ground truth"));
            }
            (None, ClipLabel::Positive) => {
                return Err(SincError::invalid(
                    "positive clips need a ground-truth rate",
                ));
            }
        }
        Ok(Clip {
            dims,
            fps,
            data,
            gt_rate,
            label,
        })
    }

    /// Builds a clip without the label/ground-truth pairing rule, for inputs
    /// that come from outside the generator (e.g. the C ABI).
    pub fn unlabeled(dims: ClipDims, fps: f64, data: Vec<f32>) -> Result<Self> {
        let clip = Clip::new(dims, fps, data, None, ClipLabel::Poisoned)?;
        Ok(clip)
    }

    pub fn dims(&self) -> ClipDims {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn label(&self) -> ClipLabel {
        self.label
    }

    /// Per-frame instantaneous rate in Hz.
    pub fn gt_rate(&self) -> Option<&[f64]> {
        self.gt_rate.as_deref()
    }

    pub fn gt_mean_rate(&self) -> Option<f64> {
        self.gt_rate
            .as_ref()
            .map(|gt| gt.iter().sum::<f64>() / gt.len() as f64)
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn index(&self, t: usize, w: usize, h: usize, c: usize) -> usize {
        let d = &self.dims;
        ((t * d.width + w) * d.height + h) * d.channels + c
    }

    pub fn value(&self, t: usize, w: usize, h: usize, c: usize) -> f32 {
        self.data[self.index(t, w, h, c)]
    }

    /// Frames `start..start + len` as a new clip.
    pub fn window(&self, start: usize, len: usize) -> Result<Clip> {
        if len < 2 || start + len > self.frames() {
            return Err(SincError::invalid(format!(
                "window {}..{} outside clip of {} frames",
                start,
                start + len,
                self.frames()
            )));
        }
        let n = self.dims.frame_len();
        Ok(Clip {
            dims: self.dims.with_frames(len),
            fps: self.fps,
            data: self.data[start * n..(start + len) * n].to_vec(),
            gt_rate: self
                .gt_rate
                .as_ref()
                .map(|g| g[start..start + len].to_vec()),
            label: self.label,
        })
    }

    /// Mean over all pixels and channels, one value per frame.
    pub fn spatial_mean_trace(&self) -> Vec<f64> {
        let n = self.dims.frame_len();
        self.data
            .chunks_exact(n)
            .map(|f| f.iter().map(|v| f64::from(*v)).sum::<f64>() / n as f64)
            .collect()
    }

    pub(crate) fn map_data(&self, data: Vec<f32>) -> Clip {
        debug_assert_eq!(data.len(), self.data.len());
        Clip {
            data,
            ..self.clone()
        }
    }

    pub(crate) fn into_parts(self) -> (ClipDims, f64, Vec<f32>, Option<Vec<f64>>, ClipLabel) {
        (self.dims, self.fps, self.data, self.gt_rate, self.label)
    }

    pub(crate) fn from_parts_unchecked(
        dims: ClipDims,
        fps: f64,
        data: Vec<f32>,
        gt_rate: Option<Vec<f64>>,
        label: ClipLabel,
    ) -> Clip {
        Clip {
            dims,
            fps,
            data,
            gt_rate,
            label,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = &self.dims;
        let mut out = Vec::with_capacity(48 + 4 * self.data.len());
        out.extend_from_slice(CLIP_MAGIC);
        out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        for v in [d.frames, d.width, d.height, d.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.fps.to_le_bytes());
        out.push(match self.label {
            ClipLabel::Positive => 0,
            ClipLabel::Poisoned => 1,
        });
        match &self.gt_rate {
            Some(gt) => {
                out.push(1);
                gt.iter()
                    .for_each(|r| out.extend_from_slice(&r.to_le_bytes()));
            }
            None => out.push(0),
        }
        self.data
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Clip> {
        let bad = |reason: &str| SincError::format(origin, reason);
        let mut r = util::ByteReader::new(bytes);
        if r.take(8).ok_or_else(|| bad("truncated header"))? != CLIP_MAGIC {
            return Err(bad("missing SINCCLIP magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CLIP_VERSION {
            return Err(bad(&format!("unsupported clip version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.u32().ok_or_else(|| bad("truncated dims"))? as usize;
        }
        let dims = ClipDims {
            frames: dims[0],
            width: dims[1],
            height: dims[2],
            channels: dims[3],
        };
        let fps = r.f64().ok_or_else(|| bad("truncated fps"))?;
        let label = match r.u8().ok_or_else(|| bad("truncated label"))? {
            0 => ClipLabel::Positive,
            1 => ClipLabel::Poisoned,
            other => return Err(bad(&format!("unknown label tag {other}"))),
        };
        let gt_rate = match r.u8().ok_or_else(|| bad("truncated gt flag"))? {
            0 => None,
            1 => Some(
                (0..dims.frames)
                    .map(|_| r.f64())
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| bad("truncated gt trace"))?,
            ),
            other => return Err(bad(&format!("unknown gt flag {other}"))),
        };
        let data = (0..dims.len())
            .map(|_| r.f32())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| bad("truncated pixel data"))?;
        if !r.is_empty() {
            return Err(bad("trailing bytes after pixel data"));
        }
        Clip::new(dims, fps, data, gt_rate, label).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Clip> {
        let bytes = std::fs::read(path).map_err(|e| SincError::io(path, e))?;
        Clip::from_bytes(&bytes, path)
    }
}
