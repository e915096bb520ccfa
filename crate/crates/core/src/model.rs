//! A small clip-to-waveform regressor with hand-written reverse mode.
//!
//! Forward pass:
//!
//! 1. spatial projection: each channel trace `z[t][c]` is a weighted sum of that
//!    channel's pixels in frame `t`;
//! 2. each channel trace is mean-centred over time, then all channels are
//!    divided by one shared RMS, `sqrt(mean(z^2) + 1e-6)`;
//! 3. a stack of temporal convolutions (replicate-padded so the output keeps
//!    `T` frames) with `tanh` between layers and a linear final layer.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::Clip;
use crate::error::{Result, SincError};
use crate::seed;
use crate::util::{self, ByteReader};

pub const MODEL_MAGIC: &[u8; 8] = b"SINCMDL1";
const STD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(W, H, C)` of the clips the model accepts.
    pub spatial_dims: (usize, usize, usize),
    pub temporal_layers: Vec<ConvSpec>,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    /// One spatial projection, then `C -> 8 -> 8 -> 1` convolutions of width 7.
    pub fn default_for(width: usize, height: usize, channels: usize, seed: u64) -> Self {
        let conv = |i, o| ConvSpec {
            in_channels: i,
            out_channels: o,
            kernel_size: 7,
        };
        ModelConfig {
            spatial_dims: (width, height, channels),
            temporal_layers: vec![conv(channels, 8), conv(8, 8), conv(8, 1)],
            activation: Activation::Tanh,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h, c) = self.spatial_dims;
        if w == 0 || h == 0 || c == 0 {
            return Err(SincError::config("spatial dims must be positive"));
        }
        let layers = &self.temporal_layers;
        if layers.is_empty() {
            return Err(SincError::config("model needs at least one temporal layer"));
        }
        if layers[0].in_channels != c {
            return Err(SincError::config(format!(
                "first layer takes {} channels but clips have {}",
                layers[0].in_channels, c
            )));
        }
        if layers.last().map(|l| l.out_channels) != Some(1) {
            return Err(SincError::config("last layer must have one output channel"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.kernel_size % 2 == 0 || l.in_channels == 0 || l.out_channels == 0 {
                return Err(SincError::config(format!(
                    "layer {i}: kernel must be odd and channels positive"
                )));
            }
            if i > 0 && layers[i - 1].out_channels != l.in_channels {
                return Err(SincError::config(format!(
                    "layer {i} takes {} channels but layer {} emits {}",
                    l.in_channels,
                    i - 1,
                    layers[i - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    fn spatial_len(&self) -> usize {
        let (w, h, c) = self.spatial_dims;
        w * h * c
    }

    /// `(kernel offset, bias offset)` of each layer in the flat parameter vector.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut pos = self.spatial_len();
        self.temporal_layers
            .iter()
            .map(|l| {
                let kernel = pos;
                let bias = kernel + l.out_channels * l.in_channels * l.kernel_size;
                pos = bias + l.out_channels;
                (kernel, bias)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.spatial_len()
            + self
                .temporal_layers
                .iter()
                .map(|l| l.out_channels * (l.in_channels * l.kernel_size + 1))
                .sum::<usize>()
    }
}

/// Model weights stored flat in declaration order: spatial weights, then each
/// layer's kernel `[out][in][k]` followed by its bias. Gradients use the same
/// type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(ModelParams {
            values: vec![0.0; config.param_count()],
            config: config.clone(),
        })
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams {
            config: other.config.clone(),
            values: vec![0.0; other.values.len()],
        }
    }

    pub fn from_values(config: &ModelConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(SincError::invalid(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SincError::Numeric("non-finite parameter".into()));
        }
        Ok(ModelParams {
            config: config.clone(),
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn spatial(&self) -> &[f64] {
        &self.values[..self.config.spatial_len()]
    }

    pub fn kernel(&self, layer: usize) -> &[f64] {
        let (k, b) = self.config.layer_offsets()[layer];
        &self.values[k..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b) = self.config.layer_offsets()[layer];
        &self.values[b..b + self.config.temporal_layers[layer].out_channels]
    }

    pub fn kernel_mut(&mut self, layer: usize) -> &mut [f64] {
        let (k, b) = self.config.layer_offsets()[layer];
        &mut self.values[k..b]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b) = self.config.layer_offsets()[layer];
        let n = self.config.temporal_layers[layer].out_channels;
        &mut self.values[b..b + n]
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// FNV-1a over the parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            v.to_bits().to_le_bytes().iter().fold(h, |h, b| {
                (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01B3)
            })
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let mut field = |payload: Vec<u8>| {
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        };
        let (w, h, c) = cfg.spatial_dims;
        field(
            [w, h, c]
                .iter()
                .flat_map(|d| (*d as u32).to_le_bytes())
                .collect(),
        );
        field(vec![match cfg.activation {
            Activation::Tanh => 0u8,
        }]);
        field(cfg.seed.to_le_bytes().to_vec());
        field(
            cfg.temporal_layers
                .iter()
                .flat_map(|l| [l.in_channels, l.out_channels, l.kernel_size])
                .flat_map(|d| (d as u32).to_le_bytes())
                .collect(),
        );
        field(self.values.iter().flat_map(|v| v.to_le_bytes()).collect());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| SincError::format(origin, reason);
        let mut r = ByteReader::new(bytes);
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MODEL_MAGIC {
            return Err(bad("missing SINCMDL1 magic"));
        }
        let mut field = || -> Result<&[u8]> {
            let len = r.u32().ok_or_else(|| bad("truncated field length"))? as usize;
            r.take(len).ok_or_else(|| bad("truncated field"))
        };
        let u32s = |b: &[u8]| -> Vec<usize> {
            b.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
                .collect()
        };

        let dims = u32s(field()?);
        if dims.len() != 3 {
            return Err(bad("dims field must hold three values"));
        }
        let activation = match field()? {
            [0] => Activation::Tanh,
            _ => return Err(bad("unknown activation")),
        };
        let seed = ByteReader::new(field()?)
            .u64()
            .ok_or_else(|| bad("seed field too short"))?;
        let layer_words = u32s(field()?);
        if layer_words.len() % 3 != 0 {
            return Err(bad("layer field is not a list of triples"));
        }
        let temporal_layers = layer_words
            .chunks_exact(3)
            .map(|t| ConvSpec {
                in_channels: t[0],
                out_channels: t[1],
                kernel_size: t[2],
            })
            .collect();
        let params = field()?;
        if params.len() % 8 != 0 {
            return Err(bad("parameter field is not a list of f64"));
        }
        let values = params
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if !r.is_empty() {
            return Err(bad("trailing bytes after parameters"));
        }
        let config = ModelConfig {
            spatial_dims: (dims[0], dims[1], dims[2]),
            temporal_layers,
            activation,
            seed,
        };
        ModelParams::from_values(&config, values).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| SincError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Fresh weights: spatial weights drawn positive and normalized to sum 1,
/// kernels and biases uniform in `±sqrt(1 / fan_in)`.
pub fn init_model(cfg: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(cfg)?;
    let mut rng = seed::rng_for(cfg.seed, "model-init");
    let n_spatial = cfg.spatial_len();
    let spatial: Vec<f64> = (0..n_spatial).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = spatial.iter().sum();
    for (p, s) in params.values[..n_spatial].iter_mut().zip(&spatial) {
        *p = s / total;
    }
    for (l, spec) in cfg.temporal_layers.iter().enumerate() {
        let bound = (1.0 / (spec.in_channels * spec.kernel_size) as f64).sqrt();
        for w in params.kernel_mut(l) {
            *w = rng.random_range(-bound..=bound);
        }
        for b in params.bias_mut(l) {
            *b = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Intermediate values kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ActivationCache {
    params_checksum: u64,
    frames: usize,
    input: Vec<f32>,
    /// Root-mean-square of the centred traces over all channels.
    scale: f64,
    /// Input of each temporal layer, `T x in_channels`.
    layer_inputs: Vec<Vec<f64>>,
}

fn pad_index(t: isize, len: usize) -> usize {
    t.clamp(0, len as isize - 1) as usize
}

fn conv_forward(
    input: &[f64],
    frames: usize,
    spec: &ConvSpec,
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let half = (k / 2) as isize;
    let mut out = vec![0.0; frames * cout];
    for t in 0..frames {
        for o in 0..cout {
            let mut acc = bias[o];
            for i in 0..cin {
                let taps = &kernel[(o * cin + i) * k..(o * cin + i + 1) * k];
                for (j, w) in taps.iter().enumerate() {
                    let src = pad_index(t as isize + j as isize - half, frames);
                    acc += w * input[src * cin + i];
                }
            }
            out[t * cout + o] = acc;
        }
    }
    out
}

/// Accumulates kernel/bias gradients and returns the gradient for the layer input.
fn conv_backward(
    input: &[f64],
    d_out: &[f64],
    frames: usize,
    spec: &ConvSpec,
    kernel: &[f64],
    d_kernel: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let (cin, cout, k) = (spec.in_channels, spec.out_channels, spec.kernel_size);
    let half = (k / 2) as isize;
    let mut d_in = vec![0.0; frames * cin];
    for t in 0..frames {
        for o in 0..cout {
            let g = d_out[t * cout + o];
            d_bias[o] += g;
            for i in 0..cin {
                let base = (o * cin + i) * k;
                for j in 0..k {
                    let src = pad_index(t as isize + j as isize - half, frames);
                    d_kernel[base + j] += g * input[src * cin + i];
                    d_in[src * cin + i] += g * kernel[base + j];
                }
            }
        }
    }
    d_in
}

fn check_clip(params: &ModelParams, clip: &Clip) -> Result<()> {
    let d = clip.dims();
    if (d.width, d.height, d.channels) != params.config.spatial_dims {
        return Err(SincError::invalid(format!(
            "clip is {}x{}x{} but the model expects {:?}",
            d.width, d.height, d.channels, params.config.spatial_dims
        )));
    }
    Ok(())
}

/// Maps a clip to a waveform with one sample per frame.
pub fn forward(params: &ModelParams, clip: &Clip) -> Result<(Vec<f64>, ActivationCache)> {
    check_clip(params, clip)?;
    let frames = clip.frames();
    let channels = clip.dims().channels;
    let spatial = params.spatial();

    let mut traces = vec![0.0; frames * channels];
    for t in 0..frames {
        let row = &mut traces[t * channels..(t + 1) * channels];
        for (p, (x, w)) in clip.frame(t).iter().zip(spatial).enumerate() {
            row[p % channels] += w * f64::from(*x);
        }
    }
    for c in 0..channels {
        let mean = (0..frames).map(|t| traces[t * channels + c]).sum::<f64>() / frames as f64;
        (0..frames).for_each(|t| traces[t * channels + c] -= mean);
    }
    let var = traces.iter().map(|v| v * v).sum::<f64>() / traces.len() as f64;
    let scale = (var + STD_EPS).sqrt();
    traces.iter_mut().for_each(|v| *v /= scale);

    let n_layers = params.config.temporal_layers.len();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut h = traces;
    for (l, spec) in params.config.temporal_layers.iter().enumerate() {
        let mut a = conv_forward(&h, frames, spec, params.kernel(l), params.bias(l));
        if l + 1 < n_layers {
            match params.config.activation {
                Activation::Tanh => a.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
        layer_inputs.push(h);
        h = a;
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(SincError::Numeric(
            "model produced a non-finite output".into(),
        ));
    }
    let cache = ActivationCache {
        params_checksum: params.checksum(),
        frames,
        input: clip.data().to_vec(),
        scale,
        layer_inputs,
    };
    Ok((h, cache))
}

/// Gradient of `<d_waveform, forward(params, clip)>` with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    cache: &ActivationCache,
    d_waveform: &[f64],
) -> Result<ModelParams> {
    if cache.params_checksum != params.checksum() {
        return Err(SincError::InvalidState(
            "activation cache was produced with different parameters".into(),
        ));
    }
    let frames = cache.frames;
    if d_waveform.len() != frames {
        return Err(SincError::invalid(format!(
            "waveform gradient has {} samples, expected {}",
            d_waveform.len(),
            frames
        )));
    }
    let cfg = &params.config;
    let offsets = cfg.layer_offsets();
    let mut grads = ModelParams::zeros_like(params);
    let mut d = d_waveform.to_vec();
    for l in (0..cfg.temporal_layers.len()).rev() {
        let spec = &cfg.temporal_layers[l];
        let (k_off, b_off) = offsets[l];
        let (head, tail) = grads.values.split_at_mut(b_off);
        let d_kernel = &mut head[k_off..];
        let d_bias = &mut tail[..spec.out_channels];
        let input = &cache.layer_inputs[l];
        let mut d_in = conv_backward(input, &d, frames, spec, params.kernel(l), d_kernel, d_bias);
        if l > 0 {
            // input of layer l is tanh of the previous pre-activation
            match cfg.activation {
                Activation::Tanh => {
                    for (g, h) in d_in.iter_mut().zip(input) {
                        *g *= 1.0 - h * h;
                    }
                }
            }
        }
        d = d_in;
    }

    // d is now dL/d(standardized traces)
    let channels = cfg.spatial_dims.2;
    let z = &cache.layer_inputs[0];
    let proj = d.iter().zip(z).map(|(g, v)| g * v).sum::<f64>() / d.len() as f64;
    d.iter_mut()
        .zip(z)
        .for_each(|(g, v)| *g = (*g - v * proj) / cache.scale);
    for c in 0..channels {
        let mean = (0..frames).map(|t| d[t * channels + c]).sum::<f64>() / frames as f64;
        (0..frames).for_each(|t| d[t * channels + c] -= mean);
    }
    let frame_len = cfg.spatial_len();
    let d_spatial = &mut grads.values[..frame_len];
    for t in 0..frames {
        let frame = &cache.input[t * frame_len..(t + 1) * frame_len];
        let dt = &d[t * channels..(t + 1) * channels];
        for (p, (g, x)) in d_spatial.iter_mut().zip(frame).enumerate() {
            *g += dt[p % channels] * f64::from(*x);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(SincError::config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: vec![0.0; params.values.len()],
            second_moment: vec![0.0; params.values.len()],
        }
    }
}

/// Bias-corrected Adam update, applied in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
) -> Result<()> {
    let n = params.values.len();
    if grads.values.len() != n || state.first_moment.len() != n {
        return Err(SincError::invalid(
            "parameter, gradient and optimizer shapes differ",
        ));
    }
    if grads.values.iter().any(|g| !g.is_finite()) {
        return Err(SincError::Numeric(format!(
            "non-finite gradient at optimizer step {}",
            state.step + 1
        )));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let step = state.step as i32;
    let c1 = 1.0 - beta1.powi(step);
    let c2 = 1.0 - beta2.powi(step);
    for i in 0..n {
        let g = grads.values[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        params.values[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}
