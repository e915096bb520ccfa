//! Run configuration for the `sinc` binary.
//!
//! One TOML file drives every subcommand. Sections hold the experiment
//! settings; a single top-level `seed` feeds every random stream through
//! purpose-tagged derivation. Unknown keys are rejected, missing keys take
//! the pulse-analog defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::error::{Result, SincError};
use crate::losses::LossWeights;
use crate::model::{AdamConfig, ConvSpec, ModelConfig};
use crate::seed;
use crate::spectral::{Bandlimits, SpectralConfig, DEFAULT_NFFT};
use crate::synth::{Distractor, GenSpec};
use crate::train::{Objective, PersonalizeConfig, SweepConfig, TrainConfig, TtaConfig};

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub n_clips: usize,
    /// Clip length as a multiple of `frames`; room for resampling crops.
    pub source_len_factor: f64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub fps: f64,
    pub rate_range: (f64, f64),
    pub signal_amplitude: f64,
    pub carrier_mask_frac: f64,
    pub noise_sigma: f64,
    pub drift: f64,
    pub distractor: Option<Distractor>,
    pub illumination_drift: f64,
    pub channel_gains: Vec<f64>,
}

impl Default for GenSection {
    fn default() -> Self {
        let p = GenSpec::pulse();
        GenSection {
            n_clips: 48,
            source_len_factor: 1.5,
            frames: p.frames,
            width: p.width,
            height: p.height,
            channels: p.channels,
            fps: p.fps,
            rate_range: p.rate_range,
            signal_amplitude: p.signal_amplitude,
            carrier_mask_frac: p.carrier_mask_frac,
            noise_sigma: p.noise_sigma,
            drift: p.drift,
            distractor: p.distractor,
            illumination_drift: p.illumination_drift,
            channel_gains: p.channel_gains,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralSection {
    pub nfft: usize,
}

impl Default for SpectralSection {
    fn default() -> Self {
        SpectralSection { nfft: DEFAULT_NFFT }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Empty means `C -> 8 -> 8 -> 1` with kernel 7.
    pub temporal_layers: Vec<ConvSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    /// Trailing dataset clips kept out of training and used for metrics.
    pub holdout: usize,
    pub poison_alpha: f64,
    pub poison_noise_sigma: f64,
    pub lr: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip_len: t.clip_len,
            holdout: 16,
            poison_alpha: t.poison_alpha,
            poison_noise_sigma: t.poison_noise_sigma,
            lr: t.optimizer.lr,
            weights: t.weights,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizeSection {
    pub seconds: f64,
    pub clip_len: usize,
    pub stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
}

impl Default for PersonalizeSection {
    fn default() -> Self {
        let p = PersonalizeConfig::default();
        PersonalizeSection {
            seconds: p.seconds,
            clip_len: p.clip_len,
            stride: p.stride,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.optimizer.lr,
            weights: p.objective.weights,
            augment: p.augment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub n_tta: f64,
    pub clip_len: usize,
    pub stride: usize,
    pub views_per_update: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
}

impl Default for TtaSection {
    fn default() -> Self {
        let t = TtaConfig::default();
        TtaSection {
            n_tta: t.n_tta,
            clip_len: t.clip_len,
            stride: t.stride,
            views_per_update: t.views_per_update,
            lr: t.optimizer.lr,
            weights: t.weights,
            augment: t.augment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub folds: usize,
    pub seeds_per_fold: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            alphas: vec![0.0, 0.25, 0.5],
            folds: 2,
            seeds_per_fold: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub clip_len: usize,
    pub stride: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            clip_len: 120,
            stride: 60,
        }
    }
}

/// Input locations, relative to the config file's directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputsSection {
    /// Dataset directory or manifest for `train`, `poison-sweep` and the
    /// original-domain half of the forgetting report.
    pub dataset: Option<PathBuf>,
    /// Optional cross-domain dataset for `poison-sweep`.
    pub cross_dataset: Option<PathBuf>,
    /// Pretrained model for `personalize` and `tta`.
    pub checkpoint: Option<PathBuf>,
    /// Subject clip for `personalize`.
    pub subject: Option<PathBuf>,
    /// Dataset whose clips are the streams of `tta`.
    pub stream: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub gen: GenSection,
    pub band: Bandlimits,
    pub spectral: SpectralSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub personalize: PersonalizeSection,
    pub tta: TtaSection,
    pub sweep: SweepSection,
    pub eval: EvalSection,
    pub inputs: InputsSection,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA,
            seed: 0,
            gen: GenSection::default(),
            band: Bandlimits::pulse(),
            spectral: SpectralSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            personalize: PersonalizeSection::default(),
            tta: TtaSection::default(),
            sweep: SweepSection::default(),
            eval: EvalSection::default(),
            inputs: InputsSection::default(),
            base_dir: PathBuf::new(),
        }
    }
}

/// `line L, column C` of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl RunConfig {
    /// Parses and validates; `origin` names the source in diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().replace('\n', " ");
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    SincError::Config(format!("{origin}:{line}:{col}: {msg}"))
                }
                None => SincError::Config(format!("{origin}: {msg}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SincError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Resolves an input path against the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// The named input, resolved, or a config error naming the missing key.
    pub fn input(&self, key: &str) -> Result<PathBuf> {
        let i = &self.inputs;
        let value = match key {
            "dataset" => &i.dataset,
            "cross_dataset" => &i.cross_dataset,
            "checkpoint" => &i.checkpoint,
            "subject" => &i.subject,
            "stream" => &i.stream,
            _ => return Err(SincError::config(format!("unknown input `{key}`"))),
        };
        value
            .as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| SincError::config(format!("missing `inputs.{key}`")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA {
            return Err(SincError::config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        let spec = self.gen_spec();
        spec.validate()?;
        if self.gen.n_clips == 0 {
            return Err(SincError::config("gen.n_clips must be at least 1"));
        }
        if !(self.gen.source_len_factor >= 1.0 && self.gen.source_len_factor.is_finite()) {
            return Err(SincError::config(
                "gen.source_len_factor must be at least 1",
            ));
        }
        self.band.validate_for(spec.fps)?;
        self.spectral().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.personalize_config().validate()?;
        self.tta_config().validate()?;
        if self.eval.clip_len < 2 || self.eval.stride == 0 || self.eval.stride > self.eval.clip_len
        {
            return Err(SincError::config(
                "eval needs clip_len >= 2 and 1 <= stride <= clip_len",
            ));
        }
        if self.sweep.alphas.is_empty()
            || self.sweep.alphas.iter().any(|a| !(0.0..=1.0).contains(a))
        {
            return Err(SincError::config(
                "sweep.alphas must be a non-empty list within [0, 1]",
            ));
        }
        if self.sweep.folds < 2 || self.sweep.seeds_per_fold == 0 {
            return Err(SincError::config(
                "sweep needs folds >= 2 and seeds_per_fold >= 1",
            ));
        }
        Ok(())
    }

    pub fn gen_spec(&self) -> GenSpec {
        let g = &self.gen;
        GenSpec {
            frames: g.frames,
            width: g.width,
            height: g.height,
            channels: g.channels,
            fps: g.fps,
            rate_range: g.rate_range,
            signal_amplitude: g.signal_amplitude,
            carrier_mask_frac: g.carrier_mask_frac,
            noise_sigma: g.noise_sigma,
            drift: g.drift,
            distractor: g.distractor,
            illumination_drift: g.illumination_drift,
            channel_gains: g.channel_gains.clone(),
            seed: seed::derive(self.seed, "gen"),
        }
    }

    pub fn spectral(&self) -> SpectralConfig {
        SpectralConfig {
            nfft: self.spectral.nfft,
            fs: self.gen.fps,
        }
    }

    pub fn objective(&self, weights: LossWeights) -> Objective {
        Objective {
            band: self.band,
            spectral: self.spectral(),
            weights,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let g = &self.gen;
        let mut cfg = ModelConfig::default_for(
            g.width,
            g.height,
            g.channels,
            seed::derive(self.seed, "model"),
        );
        if !self.model.temporal_layers.is_empty() {
            cfg.temporal_layers = self.model.temporal_layers.clone();
        }
        cfg
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            clip_len: t.clip_len,
            poison_alpha: t.poison_alpha,
            poison_noise_sigma: t.poison_noise_sigma,
            band: self.band,
            spectral: self.spectral(),
            augment: t.augment,
            optimizer: AdamConfig::with_lr(t.lr),
            weights: t.weights,
            seed: seed::derive(self.seed, "train"),
        }
    }

    pub fn personalize_config(&self) -> PersonalizeConfig {
        let p = &self.personalize;
        PersonalizeConfig {
            seconds: p.seconds,
            clip_len: p.clip_len,
            stride: p.stride,
            epochs: p.epochs,
            batch_size: p.batch_size,
            augment: p.augment,
            optimizer: AdamConfig::with_lr(p.lr),
            objective: self.objective(p.weights),
            seed: seed::derive(self.seed, "personalize"),
        }
    }

    pub fn tta_config(&self) -> TtaConfig {
        let t = &self.tta;
        TtaConfig {
            n_tta: t.n_tta,
            clip_len: t.clip_len,
            stride: t.stride,
            views_per_update: t.views_per_update,
            augment: t.augment,
            optimizer: AdamConfig::with_lr(t.lr),
            weights: t.weights,
            seed: seed::derive(self.seed, "tta"),
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            alphas: self.sweep.alphas.clone(),
            folds: self.sweep.folds,
            seeds_per_fold: self.sweep.seeds_per_fold,
            model: self.model_config(),
            train: self.train_config(),
            eval_clip_len: self.eval.clip_len,
            eval_stride: self.eval.stride,
            seed: seed::derive(self.seed, "sweep"),
        }
    }
}
