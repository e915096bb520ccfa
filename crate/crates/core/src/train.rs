//! Training engines: from-scratch training with poison mixing, single-subject
//! personalization, sliding-window test-time adaptation and the poisoning sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig, AugmentOutcome};
use crate::clip::Clip;
use crate::error::{Result, SincError};
use crate::eval::{self, Metrics};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{self, AdamConfig, AdamState, ModelConfig, ModelParams};
use crate::seed;
use crate::spectral::{self, Bandlimits, RateSeries, SpectralConfig};
use crate::synth::{self, GenSpec};
use crate::util;

/// What the loss is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub band: Bandlimits,
    pub spectral: SpectralConfig,
    #[serde(default = "LossWeights::training")]
    pub weights: LossWeights,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        self.spectral.validate()?;
        self.band.validate_for(self.spectral.fs)?;
        self.weights.validate()
    }
}

/// Loss over a batch of views and its gradient with respect to the parameters.
///
/// Returns the band each view's bandwidth and sparsity terms were measured in.
pub fn batch_gradient(
    params: &ModelParams,
    views: &[AugmentOutcome],
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<Bandlimits>, ModelParams)> {
    let forwards = views
        .par_iter()
        .map(|v| model::forward(params, &v.clip))
        .collect::<Result<Vec<_>>>()?;
    let (waves, caches): (Vec<Vec<f64>>, Vec<model::ActivationCache>) =
        forwards.into_iter().unzip();
    let view_bands: Vec<Bandlimits> = views
        .iter()
        .map(|v| objective.band.scaled(v.band_scale))
        .collect();
    let (breakdown, d_waves) = losses::total_loss_banded(
        &waves,
        &view_bands,
        &objective.band,
        &objective.spectral,
        &objective.weights,
    )?;
    let grads = caches
        .par_iter()
        .zip(&d_waves)
        .map(|(cache, d)| model::backward(params, cache, d))
        .collect::<Result<Vec<_>>>()?;
    let mut total = ModelParams::zeros_like(params);
    for g in &grads {
        total.add_assign(g);
    }
    Ok((breakdown, view_bands, total))
}

/// Loss of the model on unaugmented clips, all of one length.
pub fn evaluate_loss(
    params: &ModelParams,
    clips: &[Clip],
    objective: &Objective,
) -> Result<LossBreakdown> {
    let views: Vec<AugmentOutcome> = clips
        .iter()
        .map(|c| AugmentOutcome {
            clip: c.clone(),
            band_scale: 1.0,
            applied: Vec::new(),
        })
        .collect();
    let waves = views
        .par_iter()
        .map(|v| model::forward(params, &v.clip).map(|(y, _)| y))
        .collect::<Result<Vec<_>>>()?;
    let (breakdown, _) = losses::total_loss(
        &waves,
        &objective.band,
        &objective.spectral,
        &objective.weights,
    )?;
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Band used by the bandwidth and sparsity terms of each view.
    pub view_bands: Vec<Bandlimits>,
    pub poisoned: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_seconds: Vec<f64>,
    pub final_checksum: u64,
}

/// Wall-clock timings are ignored.
impl PartialEq for TrainHistory {
    fn eq(&self, other: &Self) -> bool {
        self.steps == other.steps && self.final_checksum == other.final_checksum
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HistoryLine<'a> {
    Step(&'a StepRecord),
    Final { checksum: u64 },
}

impl TrainHistory {
    fn new() -> Self {
        TrainHistory {
            steps: Vec::new(),
            epoch_seconds: Vec::new(),
            final_checksum: 0,
        }
    }

    /// One JSON object per line: the steps, then the final checksum. Timings
    /// are left out so reruns produce identical bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        let mut line = |rec: HistoryLine| {
            serde_json::to_writer(&mut out, &rec).expect("history serializes");
            out.write_all(b"\n").expect("in-memory write");
        };
        self.steps.iter().for_each(|s| line(HistoryLine::Step(s)));
        line(HistoryLine::Final {
            checksum: self.final_checksum,
        });
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }

    /// Mean total loss over the steps of one epoch.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let totals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.epoch == epoch)
            .map(|s| s.loss.total)
            .collect();
        (!totals.is_empty()).then(|| totals.iter().sum::<f64>() / totals.len() as f64)
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    views: &[AugmentOutcome],
    objective: &Objective,
    step: usize,
    epoch: usize,
    poisoned: usize,
    seed: u64,
) -> Result<StepRecord> {
    let (loss, view_bands, grads) = batch_gradient(params, views, objective)?;
    if !loss.total.is_finite() {
        return Err(SincError::Numeric(format!(
            "non-finite loss at step {step} (epoch {epoch}, seed {seed}): {loss:?}"
        )));
    }
    model::adam_step(params, &grads, state).map_err(|e| {
        SincError::Numeric(format!("step {step} (epoch {epoch}, seed {seed}): {e}"))
    })?;
    Ok(StepRecord {
        step,
        epoch,
        loss,
        view_bands,
        poisoned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per training view.
    pub clip_len: usize,
    pub poison_alpha: f64,
    /// Per-frame noise of generated poisoned clips.
    pub poison_noise_sigma: f64,
    pub band: Bandlimits,
    pub spectral: SpectralConfig,
    pub augment: AugmentConfig,
    pub optimizer: AdamConfig,
    #[serde(default = "LossWeights::training")]
    pub weights: LossWeights,
    pub seed: u64,
}

/// Defaults are tuned for the 8x8x3, 30 fps pulse analog.
impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            clip_len: 120,
            poison_alpha: 0.0,
            poison_noise_sigma: 3.0,
            band: Bandlimits::pulse(),
            spectral: SpectralConfig::with_fs(30.0).expect("default spectral config"),
            augment: AugmentConfig::default(),
            optimizer: AdamConfig::with_lr(3e-3),
            weights: LossWeights::training(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> Objective {
        Objective {
            band: self.band,
            spectral: self.spectral,
            weights: self.weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SincError::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.poison_alpha) {
            return Err(SincError::config("poison_alpha must lie in [0, 1]"));
        }
        if !(self.poison_noise_sigma >= 0.0 && self.poison_noise_sigma.is_finite()) {
            return Err(SincError::config("poison_noise_sigma must be nonnegative"));
        }
        if self.clip_len < 2 || self.clip_len > self.spectral.nfft {
            return Err(SincError::config("clip_len must lie in [2, nfft]"));
        }
        self.objective().validate()?;
        self.augment.validate()?;
        self.optimizer.validate()
    }
}

fn check_clips(clips: &[Clip], model_cfg: &ModelConfig, fs: f64, min_frames: usize) -> Result<()> {
    for (i, c) in clips.iter().enumerate() {
        let d = c.dims();
        if (d.width, d.height, d.channels) != model_cfg.spatial_dims {
            return Err(SincError::config(format!(
                "clip {i} is {}x{}x{}, model expects {:?}",
                d.width, d.height, d.channels, model_cfg.spatial_dims
            )));
        }
        if (c.fps() - fs).abs() > 1e-9 * fs {
            return Err(SincError::config(format!(
                "clip {i} runs at {} fps but the spectral config assumes {fs}",
                c.fps()
            )));
        }
        if c.frames() < min_frames {
            return Err(SincError::config(format!(
                "clip {i} has {} frames, training needs {min_frames}",
                c.frames()
            )));
        }
    }
    Ok(())
}

/// Trains a freshly initialized model on `clips`.
///
/// Each step draws `batch_size` slots from a per-epoch shuffle; a slot is
/// swapped for a generated poisoned clip with probability `poison_alpha`, cut to
/// a random window long enough for the augmentations, and augmented once.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    clips: &[Clip],
) -> Result<(ModelParams, TrainHistory)> {
    let params = model::init_model(model_cfg)?;
    train_from(params, cfg, clips)
}

/// [`train`] starting from existing parameters.
pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    clips: &[Clip],
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(SincError::config("training set is empty"));
    }
    let source_len = cfg.augment.source_len(cfg.clip_len);
    check_clips(clips, params.config(), cfg.spectral.fs, source_len)?;
    let objective = cfg.objective();
    let (w, h, c) = params.config().spatial_dims;
    let poison_spec = GenSpec {
        frames: source_len,
        width: w,
        height: h,
        channels: c,
        fps: cfg.spectral.fs,
        rate_range: (cfg.band.a, cfg.band.b),
        noise_sigma: cfg.poison_noise_sigma,
        ..GenSpec::pulse()
    };

    let mut state = AdamState::new(&params, cfg.optimizer);
    let mut history = TrainHistory::new();
    let mut order_rng = seed::rng_for(cfg.seed, "train-order");
    let steps_per_epoch = clips.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut order_rng);
        for s in 0..steps_per_epoch {
            let slots: Vec<usize> = (0..cfg.batch_size)
                .map(|j| order[(s * cfg.batch_size + j) % order.len()])
                .collect();
            let prepared = slots
                .par_iter()
                .enumerate()
                .map(|(j, idx)| {
                    let mut rng = seed::rng_indexed(
                        seed::derive_indexed(cfg.seed, "train-step", step as u64),
                        "slot",
                        j as u64,
                    );
                    let poisoned = cfg.poison_alpha > 0.0 && rng.random_bool(cfg.poison_alpha);
                    let window = if poisoned {
                        synth::gen_poisoned(&poison_spec, &mut rng)?
                    } else {
                        let clip = &clips[*idx];
                        let start = rng.random_range(0..=clip.frames() - source_len);
                        clip.window(start, source_len)?
                    };
                    let view =
                        augment::augment_view(&window, cfg.clip_len, &cfg.augment, &mut rng)?;
                    Ok((view, poisoned))
                })
                .collect::<Result<Vec<_>>>()?;
            let poisoned = prepared.iter().filter(|(_, p)| *p).count();
            let views: Vec<AugmentOutcome> = prepared.into_iter().map(|(v, _)| v).collect();
            let record = apply_step(
                &mut params,
                &mut state,
                &views,
                &objective,
                step,
                epoch,
                poisoned,
                cfg.seed,
            )?;
            history.steps.push(record);
            step += 1;
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    history.final_checksum = params.checksum();
    Ok((params, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizeConfig {
    /// Leading span of the subject clip used for finetuning.
    pub seconds: f64,
    pub clip_len: usize,
    pub stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub optimizer: AdamConfig,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        PersonalizeConfig {
            seconds: 20.0,
            clip_len: 120,
            stride: 60,
            epochs: 50,
            batch_size: 20,
            augment: AugmentConfig::personalization(),
            optimizer: AdamConfig::with_lr(1e-3),
            objective: Objective {
                band: Bandlimits::pulse(),
                spectral: SpectralConfig::with_fs(30.0).expect("default spectral config"),
                weights: LossWeights::training(),
            },
            seed: 0,
        }
    }
}

impl PersonalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.seconds > 0.0 && self.seconds.is_finite()) {
            return Err(SincError::config("personalization span must be positive"));
        }
        if self.clip_len < 2 || self.stride == 0 || self.batch_size == 0 {
            return Err(SincError::config(
                "clip_len >= 2, stride >= 1 and batch_size >= 1 required",
            ));
        }
        if self.augment.resample {
            return Err(SincError::config(
                "personalization views cannot be resampled",
            ));
        }
        self.objective.validate()?;
        self.augment.validate()?;
        self.optimizer.validate()
    }
}

/// `clip_len`-frame windows at `stride` over the first `seconds` of `clip`.
pub fn personalization_windows(
    clip: &Clip,
    seconds: f64,
    clip_len: usize,
    stride: usize,
) -> Result<Vec<Clip>> {
    let span = (seconds * clip.fps()).round() as usize;
    if clip.frames() < span {
        return Err(SincError::invalid(format!(
            "subject clip has {} frames, personalization needs {span} ({seconds} s)",
            clip.frames()
        )));
    }
    if span < clip_len || stride == 0 {
        return Err(SincError::invalid(format!(
            "a {seconds} s span cannot hold a {clip_len}-frame window"
        )));
    }
    (0..=(span - clip_len) / stride)
        .map(|i| clip.window(i * stride, clip_len))
        .collect()
}

/// Finetunes a copy of `pretrained` on windows from the start of one subject's clip.
///
/// An epoch is one pass over the windows, `ceil(windows / batch_size)` steps of
/// `batch_size` views drawn with replacement.
pub fn personalize(
    pretrained: &ModelParams,
    subject: &Clip,
    cfg: &PersonalizeConfig,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    check_clips(
        std::slice::from_ref(subject),
        pretrained.config(),
        cfg.objective.spectral.fs,
        cfg.clip_len,
    )
    .map_err(|e| SincError::invalid(e.to_string()))?;
    let windows = personalization_windows(subject, cfg.seconds, cfg.clip_len, cfg.stride)?;
    let mut params = pretrained.clone();
    let mut state = AdamState::new(&params, cfg.optimizer);
    let mut history = TrainHistory::new();
    let steps_per_epoch = windows.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        for _ in 0..steps_per_epoch {
            let step_seed = seed::derive_indexed(cfg.seed, "personalize-step", step as u64);
            let views = (0..cfg.batch_size)
                .into_par_iter()
                .map(|j| {
                    let mut rng = seed::rng_indexed(step_seed, "slot", j as u64);
                    let w = &windows[rng.random_range(0..windows.len())];
                    augment::augment_view(w, cfg.clip_len, &cfg.augment, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let record = apply_step(
                &mut params,
                &mut state,
                &views,
                &cfg.objective,
                step,
                epoch,
                0,
                cfg.seed,
            )?;
            history.steps.push(record);
            step += 1;
        }
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    history.final_checksum = params.checksum();
    Ok((params, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtaConfig {
    /// Updates per clip. Values >= 1 are rounded; `0 < n < 1` means one update
    /// every `round(1 / n)` clips; 0 disables adaptation.
    pub n_tta: f64,
    pub clip_len: usize,
    pub stride: usize,
    pub views_per_update: usize,
    pub augment: AugmentConfig,
    pub optimizer: AdamConfig,
    #[serde(default = "LossWeights::training")]
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            n_tta: 1.0,
            clip_len: 120,
            stride: 60,
            views_per_update: 20,
            augment: AugmentConfig::test_time(),
            optimizer: AdamConfig::with_lr(1e-3),
            weights: LossWeights::training(),
            seed: 0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_tta >= 0.0 && self.n_tta.is_finite()) {
            return Err(SincError::config("n_tta must be a nonnegative number"));
        }
        if self.clip_len < 2 || self.stride == 0 || self.stride > self.clip_len {
            return Err(SincError::config(
                "TTA needs clip_len >= 2 and 1 <= stride <= clip_len",
            ));
        }
        if self.views_per_update == 0 {
            return Err(SincError::config("views_per_update must be at least 1"));
        }
        if self.augment.resample || self.augment.pixel_noise {
            return Err(SincError::config(
                "TTA views use flip, illumination, crop and reversal only",
            ));
        }
        self.augment.validate()?;
        self.optimizer.validate()
    }

    /// Updates to perform before predicting on clip `index`.
    pub fn updates_for(&self, index: usize) -> usize {
        if self.n_tta <= 0.0 {
            0
        } else if self.n_tta >= 1.0 {
            self.n_tta.round() as usize
        } else {
            let every = (1.0 / self.n_tta).round().max(1.0) as usize;
            usize::from(index.is_multiple_of(every))
        }
    }
}

/// Adapts a copy of `pretrained` along a long stream and predicts each clip.
///
/// Clips of `clip_len` frames are visited at `stride`; each due update draws a
/// fresh batch of views of the current clip. The rate of a clip is its in-band
/// PSD peak, reported at the clip centre.
pub fn tta_run(
    pretrained: &ModelParams,
    stream: &Clip,
    cfg: &TtaConfig,
    band: &Bandlimits,
    spectral: &SpectralConfig,
) -> Result<(RateSeries, ModelParams, TrainHistory)> {
    cfg.validate()?;
    let objective = Objective {
        band: *band,
        spectral: *spectral,
        weights: cfg.weights,
    };
    objective.validate()?;
    if stream.frames() < cfg.clip_len {
        return Err(SincError::invalid(format!(
            "stream has {} frames, shorter than one {}-frame clip",
            stream.frames(),
            cfg.clip_len
        )));
    }
    let mut params = pretrained.clone();
    let mut state = AdamState::new(&params, cfg.optimizer);
    let mut history = TrainHistory::new();
    let mut times = Vec::new();
    let mut rates = Vec::new();
    let n_clips = (stream.frames() - cfg.clip_len) / cfg.stride + 1;
    let mut step = 0;
    let started = Instant::now();
    for i in 0..n_clips {
        let start = i * cfg.stride;
        let clip = stream.window(start, cfg.clip_len)?;
        for _ in 0..cfg.updates_for(i) {
            let mut rng = seed::rng_indexed(cfg.seed, "tta-update", step as u64);
            let views = augment::augment_batch(
                &clip,
                cfg.clip_len,
                cfg.views_per_update,
                &cfg.augment,
                &mut rng,
            )?;
            let record = apply_step(
                &mut params,
                &mut state,
                &views,
                &objective,
                step,
                i,
                0,
                cfg.seed,
            )?;
            history.steps.push(record);
            step += 1;
        }
        let (y, _) = model::forward(&params, &clip)?;
        rates.push(spectral::peak_rate(&y, band, spectral)?);
        times.push((start as f64 + cfg.clip_len as f64 / 2.0) / stream.fps());
    }
    history.epoch_seconds.push(started.elapsed().as_secs_f64());
    history.final_checksum = params.checksum();
    Ok((RateSeries::new(times, rates)?, params, history))
}

/// Per-clip rates of a model without adaptation, on the same grid as [`tta_run`].
pub fn frozen_rates(
    params: &ModelParams,
    stream: &Clip,
    clip_len: usize,
    stride: usize,
    band: &Bandlimits,
    spectral: &SpectralConfig,
) -> Result<RateSeries> {
    eval::predict_rates(params, stream, clip_len, stride, band, spectral)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub folds: usize,
    pub seeds_per_fold: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Windows used to score held-out clips.
    pub eval_clip_len: usize,
    pub eval_stride: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn validate(&self, n_clips: usize) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(SincError::config(
                "alphas must be a non-empty list within [0, 1]",
            ));
        }
        if self.folds < 2 || self.folds > n_clips {
            return Err(SincError::config(format!(
                "{} folds cannot partition {n_clips} clips",
                self.folds
            )));
        }
        if self.seeds_per_fold == 0 {
            return Err(SincError::config("seeds_per_fold must be at least 1"));
        }
        self.model.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub eval_set: String,
    pub mae_mean: f64,
    pub mae_std: f64,
}

pub const WITHIN_DOMAIN: &str = "within";
pub const CROSS_DOMAIN: &str = "cross";

/// Contiguous folds of (near) equal size.
pub fn fold_ranges(n: usize, folds: usize) -> Vec<std::ops::Range<usize>> {
    (0..folds)
        .map(|f| f * n / folds..(f + 1) * n / folds)
        .collect()
}

/// MAE-versus-alpha table. Every (alpha, fold, seed) job trains on the other
/// folds and is scored on its held-out fold and on `cross_domain`. Model and
/// training seeds depend on (fold, seed) only, so alphas are compared on
/// paired runs. An empty `cross_domain` yields within-domain rows only.
pub fn poison_sweep(
    cfg: &SweepConfig,
    dataset: &[Clip],
    cross_domain: &[Clip],
) -> Result<Vec<SweepRow>> {
    cfg.validate(dataset.len())?;
    let ranges = fold_ranges(dataset.len(), cfg.folds);
    let jobs: Vec<(usize, usize, usize)> = (0..cfg.alphas.len())
        .flat_map(|a| {
            (0..cfg.folds).flat_map(move |f| (0..cfg.seeds_per_fold).map(move |s| (a, f, s)))
        })
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(a, f, s)| {
            let run = (f * cfg.seeds_per_fold + s) as u64;
            let model_cfg = ModelConfig {
                seed: seed::derive_indexed(cfg.seed, "sweep-model", run),
                ..cfg.model.clone()
            };
            let train_cfg = TrainConfig {
                poison_alpha: cfg.alphas[a],
                seed: seed::derive_indexed(cfg.seed, "sweep-train", run),
                ..cfg.train
            };
            let held = &dataset[ranges[f].clone()];
            let train_set: Vec<Clip> = dataset[..ranges[f].start]
                .iter()
                .chain(&dataset[ranges[f].end..])
                .cloned()
                .collect();
            let (params, _) = train(&model_cfg, &train_cfg, &train_set)?;
            let score = |set: &[Clip]| -> Result<Metrics> {
                eval::evaluate_model(
                    &params,
                    set,
                    cfg.eval_clip_len,
                    cfg.eval_stride,
                    &cfg.train.band,
                    &cfg.train.spectral,
                )
            };
            let cross = match cross_domain.is_empty() {
                true => None,
                false => Some(score(cross_domain)?.mae),
            };
            Ok((score(held)?.mae, cross))
        })
        .collect::<Result<Vec<(f64, Option<f64>)>>>()?;

    let per_alpha = cfg.folds * cfg.seeds_per_fold;
    let mut rows = Vec::new();
    for (a, alpha) in cfg.alphas.iter().enumerate() {
        let chunk = &results[a * per_alpha..(a + 1) * per_alpha];
        let within: Vec<f64> = chunk.iter().map(|r| r.0).collect();
        let cross: Option<Vec<f64>> = chunk.iter().map(|r| r.1).collect();
        let sets = [(WITHIN_DOMAIN, Some(within)), (CROSS_DOMAIN, cross)];
        for (name, maes) in sets.into_iter().filter_map(|(n, m)| Some((n, m?))) {
            let (mae_mean, mae_std) = util::mean_std(&maes);
            rows.push(SweepRow {
                alpha: *alpha,
                eval_set: name.to_string(),
                mae_mean,
                mae_std,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    if rows.is_empty() {
        w.write_record(["alpha", "eval_set", "mae_mean", "mae_std"])
            .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::ClipDims;

    fn tiny_clips(n: usize, frames: usize) -> Vec<Clip> {
        let spec = GenSpec {
            frames,
            width: 4,
            height: 4,
            ..GenSpec::pulse()
        };
        (0..n)
            .map(|i| synth::gen_positive(&spec, &mut seed::rng(i as u64)).unwrap())
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 3,
            clip_len: 60,
            spectral: SpectralConfig::new(600, 30.0).unwrap(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_initial_params() {
        let model_cfg = ModelConfig::default_for(4, 4, 3, 9);
        let cfg = TrainConfig {
            optimizer: AdamConfig::with_lr(0.0),
            epochs: 5,
            ..tiny_cfg()
        };
        let (params, history) = train(&model_cfg, &cfg, &tiny_clips(4, 120)).unwrap();
        assert_eq!(params, model::init_model(&model_cfg).unwrap());
        assert_eq!(history.steps.len(), 5 * 2);
        assert!(history.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn training_is_deterministic_and_records_scaled_bands() {
        let model_cfg = ModelConfig::default_for(4, 4, 3, 1);
        let cfg = TrainConfig {
            poison_alpha: 0.5,
            ..tiny_cfg()
        };
        let clips = tiny_clips(5, 90);
        let a = train(&model_cfg, &cfg, &clips).unwrap();
        let b = train(&model_cfg, &cfg, &clips).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.1.steps.iter().any(|s| s.poisoned > 0));
        for s in &a.1.steps {
            for vb in &s.view_bands {
                let c = vb.a / cfg.band.a;
                assert!((0.6..=1.4).contains(&c));
                assert!((vb.b - c * cfg.band.b).abs() < 1e-12);
                assert!((vb.delta_f - c * cfg.band.delta_f).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_or_short_datasets_are_rejected() {
        let model_cfg = ModelConfig::default_for(4, 4, 3, 1);
        assert!(matches!(
            train(&model_cfg, &tiny_cfg(), &[]),
            Err(SincError::Config(_))
        ));
        // resampling by up to 1.4 needs 84 source frames for 60-frame views
        assert!(train(&model_cfg, &tiny_cfg(), &tiny_clips(2, 80)).is_err());
    }

    #[test]
    fn personalization_window_arithmetic() {
        let dims = ClipDims {
            frames: 900,
            width: 2,
            height: 2,
            channels: 1,
        };
        let clip = Clip::unlabeled(dims, 30.0, vec![0.0; dims.len()]).unwrap();
        assert_eq!(
            personalization_windows(&clip, 20.0, 120, 60).unwrap().len(),
            9
        );
        let short = clip.window(0, 500).unwrap();
        assert!(matches!(
            personalization_windows(&short, 20.0, 120, 60),
            Err(SincError::InvalidInput(_))
        ));
    }

    #[test]
    fn personalize_zero_epochs_is_identity() {
        let model_cfg = ModelConfig::default_for(4, 4, 3, 2);
        let pre = model::init_model(&model_cfg).unwrap();
        let subject = tiny_clips(1, 600).remove(0);
        let cfg = PersonalizeConfig {
            epochs: 0,
            ..PersonalizeConfig::default()
        };
        let (p, h) = personalize(&pre, &subject, &cfg).unwrap();
        assert_eq!(p, pre);
        assert!(h.steps.is_empty());

        let cfg = PersonalizeConfig {
            epochs: 2,
            batch_size: 4,
            objective: Objective {
                spectral: SpectralConfig::new(600, 30.0).unwrap(),
                ..cfg.objective
            },
            ..cfg
        };
        let before = pre.clone();
        let (p, h) = personalize(&pre, &subject, &cfg).unwrap();
        assert_eq!(pre, before);
        assert_ne!(p, pre);
        assert_eq!(h.steps.len(), 2 * 3);
    }

    #[test]
    fn tta_schedule() {
        let cfg = |n| TtaConfig {
            n_tta: n,
            ..TtaConfig::default()
        };
        let count = |n: f64| (0..10).map(|i| cfg(n).updates_for(i)).sum::<usize>();
        assert_eq!(count(0.5), 5);
        assert_eq!(count(1.0), 10);
        assert_eq!(count(3.0), 30);
        assert_eq!(count(0.04), 1);
        assert_eq!(count(0.0), 0);
    }

    #[test]
    fn tta_without_updates_matches_frozen_inference() {
        let model_cfg = ModelConfig::default_for(4, 4, 3, 5);
        let params = model::init_model(&model_cfg).unwrap();
        let stream = tiny_clips(1, 400).remove(0);
        let band = Bandlimits::pulse();
        let spectral = SpectralConfig::new(600, 30.0).unwrap();
        let cfg = TtaConfig {
            n_tta: 0.0,
            ..TtaConfig::default()
        };
        let (rates, adapted, history) = tta_run(&params, &stream, &cfg, &band, &spectral).unwrap();
        assert_eq!(adapted, params);
        assert!(history.steps.is_empty());
        assert_eq!(
            rates,
            frozen_rates(&params, &stream, 120, 60, &band, &spectral).unwrap()
        );
        assert_eq!(rates.len(), 5);

        let cfg = TtaConfig {
            n_tta: 0.5,
            views_per_update: 4,
            ..cfg
        };
        let (_, adapted, history) = tta_run(&params, &stream, &cfg, &band, &spectral).unwrap();
        assert_eq!(history.steps.len(), 3);
        assert_ne!(adapted, params);
    }

    #[test]
    fn folds_are_contiguous_and_cover() {
        let r = fold_ranges(10, 3);
        assert_eq!(r, vec![0..3, 3..6, 6..10]);
    }

    #[test]
    fn history_jsonl_lines() {
        let model_cfg = ModelConfig::default_for(4, 4, 3, 1);
        let (_, h) = train(&model_cfg, &tiny_cfg(), &tiny_clips(3, 90)).unwrap();
        let text = h.to_jsonl();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), h.steps.len() + 1);
        assert_eq!(lines[0]["kind"], "step");
        assert_eq!(lines.last().unwrap()["checksum"], h.final_checksum);
    }
}
