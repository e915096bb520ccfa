#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sinc_core::config::RunConfig;
use sinc_core::eval::{self, ForgettingReport, Metrics};
use sinc_core::losses::{self, SpectrumGrad};
use sinc_core::model::{self, Activation, ConvSpec};
use sinc_core::synth::{self, GenSpec};
use sinc_core::train::{self, PersonalizeConfig, SweepConfig, SweepRow, TrainConfig, TtaConfig};
use sinc_core::{
    augment, spectral, Bandlimits, Clip, ClipDims, LossWeights, ModelConfig, ModelParams,
    RateSeries, SpectralConfig, Spectrum,
};

pub const GRADIENT_CASES: u64 = 24;
pub const LOSS_TOL: f64 = 1e-6;
pub const CHAIN_TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `||a - b|| / ||b||` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

const SMALL_FS: f64 = 8.0;
const SMALL_NFFT: usize = 64;

fn small_band() -> Bandlimits {
    Bandlimits::new(0.66, 3.0, 0.2).unwrap()
}

fn spectrum(power: &[f64]) -> Spectrum {
    Spectrum::from_power(power.to_vec(), SMALL_FS, SMALL_NFFT).unwrap()
}

fn random_power(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..SMALL_NFFT / 2 + 1)
        .map(|_| rng.random_range(0.1..1.0))
        .collect()
}

fn band_range() -> std::ops::RangeInclusive<usize> {
    spectral::band_bins(&spectrum(&random_power(&mut rng(0))), &small_band()).unwrap()
}

pub fn bandwidth_errors() -> Vec<f64> {
    (0..GRADIENT_CASES)
        .map(|seed| {
            let p = random_power(&mut rng(seed));
            let (_, g) = losses::bandwidth_loss(&spectrum(&p), &small_band()).unwrap();
            let fd = central_diff(&p, 1e-5, |q| {
                losses::bandwidth_loss(&spectrum(q), &small_band())
                    .unwrap()
                    .0
            });
            rel_err(&g.d_power, &fd)
        })
        .collect()
}

/// Spectra with a planted in-band peak well above every other bin, so the
/// argmax cannot move under the probe step.
pub fn sparsity_errors() -> Vec<f64> {
    let bins = band_range();
    (0..GRADIENT_CASES)
        .map(|seed| {
            let mut r = rng(100 + seed);
            let mut p = random_power(&mut r);
            let peak = r.random_range(bins.clone());
            p[peak] = 3.0;
            let (_, g) = losses::sparsity_loss(&spectrum(&p), &small_band()).unwrap();
            let fd = central_diff(&p, 1e-5, |q| {
                losses::sparsity_loss(&spectrum(q), &small_band())
                    .unwrap()
                    .0
            });
            rel_err(&g.d_power, &fd)
        })
        .collect()
}

pub fn variance_errors() -> Vec<f64> {
    (0..GRADIENT_CASES)
        .map(|seed| {
            let mut r = rng(200 + seed);
            let n = r.random_range(2..6);
            let bins = SMALL_NFFT / 2 + 1;
            let flat: Vec<f64> = (0..n).flat_map(|_| random_power(&mut r)).collect();
            let batch = |x: &[f64]| -> Vec<Spectrum> { x.chunks(bins).map(spectrum).collect() };
            let (_, grads) = losses::variance_loss(&batch(&flat), &small_band()).unwrap();
            let analytic: Vec<f64> = grads.iter().flat_map(|g| g.d_power.clone()).collect();
            let fd = central_diff(&flat, 1e-5, |x| {
                losses::variance_loss(&batch(x), &small_band()).unwrap().0
            });
            rel_err(&analytic, &fd)
        })
        .collect()
}

/// Gradient of `sum_k c_k F_k(y)` for random weights `c`.
pub fn psd_backward_errors() -> Vec<f64> {
    (0..GRADIENT_CASES)
        .map(|seed| {
            let mut r = rng(300 + seed);
            let len = r.random_range(8..40);
            let nfft = r.random_range(len..3 * len).max(2);
            let cfg = SpectralConfig::new(nfft, SMALL_FS).unwrap();
            let y: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..cfg.n_bins())
                .map(|_| r.random_range(-1.0..1.0))
                .collect();
            let weighted = |x: &[f64]| -> f64 {
                let s = spectral::psd(x, &cfg).unwrap();
                s.power().iter().zip(&c).map(|(p, w)| p * w).sum()
            };
            let grad = SpectrumGrad { d_power: c.clone() };
            let analytic = losses::psd_backward(&grad, &y, &cfg).unwrap();
            let fd = central_diff(&y, 1e-6, weighted);
            rel_err(&analytic, &fd)
        })
        .collect()
}

fn chain_config(seed: u64) -> ModelConfig {
    let conv = |i, o, k| ConvSpec {
        in_channels: i,
        out_channels: o,
        kernel_size: k,
    };
    ModelConfig {
        spatial_dims: (4, 4, 2),
        temporal_layers: vec![conv(2, 3, 5), conv(3, 3, 3), conv(3, 1, 5)],
        activation: Activation::Tanh,
        seed,
    }
}

fn random_clip(r: &mut ChaCha8Rng, frames: usize) -> Clip {
    let dims = ClipDims {
        frames,
        width: 4,
        height: 4,
        channels: 2,
    };
    let data = (0..dims.len())
        .map(|_| r.random_range(-2.0f32..2.0))
        .collect();
    Clip::unlabeled(dims, SMALL_FS, data).unwrap()
}

fn chain_loss(params: &ModelParams, clips: &[Clip], cfg: &SpectralConfig) -> (f64, Vec<usize>) {
    let waves: Vec<Vec<f64>> = clips
        .iter()
        .map(|c| model::forward(params, c).unwrap().0)
        .collect();
    let band = small_band();
    let peaks = waves
        .iter()
        .map(|y| {
            let s = spectral::psd(y, cfg).unwrap();
            s.peak_bin(&spectral::band_bins(&s, &band).unwrap())
        })
        .collect();
    let (loss, _) = losses::total_loss(&waves, &band, cfg, &LossWeights::default()).unwrap();
    (loss.total, peaks)
}

/// Full loss-of-model gradients on 16-frame 4x4x2 clips, batches of three.
/// Cases whose probe step moves a sparsity peak are skipped and replaced.
pub fn chain_errors() -> Vec<f64> {
    let cfg = SpectralConfig::new(SMALL_NFFT, SMALL_FS).unwrap();
    let band = small_band();
    let mut errors = Vec::new();
    let mut seed = 400;
    while (errors.len() as u64) < GRADIENT_CASES {
        seed += 1;
        let mut r = rng(seed);
        let params = model::init_model(&chain_config(seed)).unwrap();
        let clips: Vec<Clip> = (0..3).map(|_| random_clip(&mut r, 16)).collect();
        let (_, base_peaks) = chain_loss(&params, &clips, &cfg);

        let fwd: Vec<_> = clips
            .iter()
            .map(|c| model::forward(&params, c).unwrap())
            .collect();
        let waves: Vec<Vec<f64>> = fwd.iter().map(|f| f.0.clone()).collect();
        let (_, d_waves) =
            losses::total_loss(&waves, &band, &cfg, &LossWeights::default()).unwrap();
        let mut analytic = vec![0.0; params.values().len()];
        for ((_, cache), d) in fwd.iter().zip(&d_waves) {
            let g = model::backward(&params, cache, d).unwrap();
            analytic
                .iter_mut()
                .zip(g.values())
                .for_each(|(a, b)| *a += b);
        }

        let mut stable = true;
        let fd = central_diff(params.values(), 1e-6, |x| {
            let p = ModelParams::from_values(params.config(), x.to_vec()).unwrap();
            let (l, peaks) = chain_loss(&p, &clips, &cfg);
            stable &= peaks == base_peaks;
            l
        });
        if stable {
            errors.push(rel_err(&analytic, &fd));
        }
    }
    errors
}

/// One-sided Parseval: `P_0 + 2 sum P_k + P_{N/2} = N sum (y - mean)^2` for even N.
pub fn parseval_errors() -> Vec<f64> {
    (0..20)
        .map(|seed| {
            let mut r = rng(500 + seed);
            let len = r.random_range(16..200);
            let nfft = 2 * r.random_range(len / 2 + 1..len * 2);
            let cfg = SpectralConfig::new(nfft, 30.0).unwrap();
            let y: Vec<f64> = (0..len).map(|_| r.random_range(-5.0..5.0)).collect();
            let p = spectral::psd(&y, &cfg).unwrap();
            let p = p.power();
            let spectral_energy = p[0] + 2.0 * p[1..nfft / 2].iter().sum::<f64>() + p[nfft / 2];
            let mean = y.iter().sum::<f64>() / len as f64;
            let energy = nfft as f64 * y.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            (spectral_energy - energy).abs() / energy
        })
        .collect()
}

pub fn reversal_errors() -> Vec<f64> {
    (0..20)
        .map(|seed| {
            let mut r = rng(600 + seed);
            let len = r.random_range(16..300);
            let cfg = SpectralConfig::new(r.random_range(len..4 * len), 30.0).unwrap();
            let y: Vec<f64> = (0..len).map(|_| r.random_range(-5.0..5.0)).collect();
            let rev: Vec<f64> = y.iter().rev().copied().collect();
            let a = spectral::psd(&y, &cfg).unwrap();
            let b = spectral::psd(&rev, &cfg).unwrap();
            let scale = a.power().iter().fold(0.0f64, |m, v| m.max(*v));
            let diff = a
                .power()
                .iter()
                .zip(b.power())
                .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            diff / scale
        })
        .collect()
}

/// Peak-bin error (in bins) of a resampled tone against `c * f0`.
pub fn resample_bin_errors() -> Vec<f64> {
    let fs = 30.0;
    let cfg = SpectralConfig::with_fs(fs).unwrap();
    let wide = Bandlimits::new(0.3, 5.0, 0.1).unwrap();
    (0..20)
        .map(|seed| {
            let mut r = rng(700 + seed);
            let f0 = r.random_range(0.7..2.5);
            let c = r.random_range(0.6..1.4);
            let out_len = 240;
            let src_len = augment::resample_source_len(c, out_len);
            let dims = ClipDims {
                frames: src_len,
                width: 1,
                height: 1,
                channels: 1,
            };
            let phase = r.random_range(0.0..std::f64::consts::TAU);
            let data = (0..src_len)
                .map(|n| (std::f64::consts::TAU * f0 * n as f64 / fs + phase).sin() as f32)
                .collect();
            let clip = Clip::unlabeled(dims, fs, data).unwrap();
            let out = augment::freq_resample(&clip, c, out_len).unwrap();
            let trace: Vec<f64> = out.data().iter().map(|v| *v as f64).collect();
            let peak = spectral::psd(&trace, &cfg)
                .unwrap()
                .peak_freq(&wide)
                .unwrap();
            (peak - c * f0).abs() / cfg.resolution()
        })
        .collect()
}

fn exact_tone(bin: usize, cfg: &SpectralConfig) -> Vec<f64> {
    (0..cfg.nfft)
        .map(|n| (std::f64::consts::TAU * bin as f64 * n as f64 / cfg.nfft as f64).sin())
        .collect()
}

pub struct LossSemantics {
    pub spanning_total: f64,
    pub out_of_band_bandwidth: f64,
    pub uniform_variance: f64,
}

/// Exact-bin tones (length `nfft`, one per in-band bin), an out-of-band tone
/// and a batch of flat spectra, all at the pulse defaults.
pub fn loss_semantics() -> LossSemantics {
    let cfg = SpectralConfig::with_fs(30.0).unwrap();
    let band = Bandlimits::pulse();
    let bins = spectral::band_bins_for(&cfg, &band).unwrap();
    let tones: Vec<Vec<f64>> = bins.clone().map(|k| exact_tone(k, &cfg)).collect();
    let (spanning, _) = losses::total_loss(&tones, &band, &cfg, &LossWeights::default()).unwrap();

    let out_bin = (5.0 / cfg.resolution()).round() as usize;
    let spec = spectral::psd(&exact_tone(out_bin, &cfg), &cfg).unwrap();
    let (bw, _) = losses::bandwidth_loss(&spec, &band).unwrap();

    let flat: Vec<Spectrum> = (0..4)
        .map(|i| Spectrum::from_power(vec![1.0 + i as f64; cfg.n_bins()], 30.0, cfg.nfft).unwrap())
        .collect();
    let (var, _) = losses::variance_loss(&flat, &band).unwrap();
    LossSemantics {
        spanning_total: spanning.total,
        out_of_band_bandwidth: bw,
        uniform_variance: var,
    }
}

pub const DATA_SEED: u64 = 1;
pub const MODEL_SEED: u64 = 3;

pub fn pulse_data() -> (Vec<Clip>, Vec<Clip>) {
    let spec = GenSpec {
        seed: DATA_SEED,
        ..GenSpec::pulse()
    };
    let mut all = synth::generate_clips(&spec, 48, 1.5).unwrap();
    let held = all.split_off(32);
    (all, held)
}

fn metrics_row(name: &str, m: &Metrics) -> String {
    let r = m.pearson_r.map_or(String::new(), |r| format!("{r:.12}"));
    format!("{name},{:.12},{:.12},{r},{}\n", m.mae, m.rmse, m.n)
}

const METRICS_HEADER: &str = "name,mae,rmse,pearson_r,n\n";

pub struct TrainingOutcome {
    pub trained: ModelParams,
    pub trained_metrics: Metrics,
    pub untrained_metrics: Metrics,
    pub csv: String,
}

pub fn training_experiment(train_set: &[Clip], held: &[Clip]) -> TrainingOutcome {
    let cfg = TrainConfig {
        seed: MODEL_SEED,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig::default_for(8, 8, 3, MODEL_SEED);
    let (trained, _) = train::train(&model_cfg, &cfg, train_set).unwrap();
    let untrained = model::init_model(&model_cfg).unwrap();
    let score =
        |p: &ModelParams| eval::evaluate_model(p, held, 120, 60, &cfg.band, &cfg.spectral).unwrap();
    let trained_metrics = score(&trained);
    let untrained_metrics = score(&untrained);
    let csv = format!(
        "{METRICS_HEADER}{}{}",
        metrics_row("trained", &trained_metrics),
        metrics_row("untrained", &untrained_metrics)
    );
    TrainingOutcome {
        trained,
        trained_metrics,
        untrained_metrics,
        csv,
    }
}

pub fn sweep_experiment() -> (Vec<SweepRow>, String) {
    let spec = GenSpec {
        seed: DATA_SEED,
        ..GenSpec::pulse()
    };
    let data = synth::generate_clips(&spec, 32, 1.5).unwrap();
    let cross_spec = GenSpec {
        seed: 77,
        noise_sigma: 1.5 * spec.noise_sigma,
        ..spec
    };
    let cross = synth::generate_clips(&cross_spec, 16, 1.5).unwrap();
    let cfg = SweepConfig {
        alphas: vec![0.0, 0.25, 0.5],
        folds: 2,
        seeds_per_fold: 2,
        model: ModelConfig::default_for(8, 8, 3, 0),
        train: TrainConfig::default(),
        eval_clip_len: 120,
        eval_stride: 60,
        seed: 0,
    };
    let rows = train::poison_sweep(&cfg, &data, &cross).unwrap();
    let csv = train::sweep_to_csv(&rows);
    (rows, csv)
}

pub fn shifted_spec(seed: u64, frames: usize) -> GenSpec {
    let clean = GenSpec::pulse();
    GenSpec {
        seed,
        frames,
        noise_sigma: 3.0 * clean.noise_sigma,
        illumination_drift: 500.0,
        ..clean
    }
}

fn chain(parts: Vec<(RateSeries, f64)>) -> RateSeries {
    eval::chain_series(&parts).unwrap()
}

pub struct TtaOutcome {
    pub frozen: Metrics,
    pub adapted: Metrics,
    pub zero_matches_frozen: bool,
    pub csv: String,
}

pub fn tta_experiment(pretrained: &ModelParams) -> TtaOutcome {
    let streams = synth::generate_clips(&shifted_spec(500, 900), 2, 1.0).unwrap();
    let band = Bandlimits::pulse();
    let spectral = SpectralConfig::with_fs(30.0).unwrap();
    let cfg = TtaConfig::default();
    let zero = TtaConfig { n_tta: 0.0, ..cfg };
    let mut frozen = Vec::new();
    let mut adapted = Vec::new();
    let mut truth = Vec::new();
    let mut zero_matches_frozen = true;
    for s in &streams {
        let dur = s.frames() as f64 / s.fps();
        let f = train::frozen_rates(pretrained, s, 120, 60, &band, &spectral).unwrap();
        let (a, _, _) = train::tta_run(pretrained, s, &cfg, &band, &spectral).unwrap();
        let (z, zp, _) = train::tta_run(pretrained, s, &zero, &band, &spectral).unwrap();
        zero_matches_frozen &= z == f && zp == *pretrained;
        frozen.push((f, dur));
        adapted.push((a, dur));
        truth.push((eval::truth_rates(s, 120, 60).unwrap(), dur));
    }
    let (frozen, adapted, truth) = (chain(frozen), chain(adapted), chain(truth));
    let frozen_m = eval::rate_metrics(&frozen, &truth).unwrap();
    let adapted_m = eval::rate_metrics(&adapted, &truth).unwrap();
    let csv = format!(
        "{METRICS_HEADER}{}{}",
        metrics_row("frozen", &frozen_m),
        metrics_row("tta", &adapted_m)
    );
    TtaOutcome {
        frozen: frozen_m,
        adapted: adapted_m,
        zero_matches_frozen,
        csv,
    }
}

pub struct PersonalizeOutcome {
    pub windows: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub report: ForgettingReport,
    pub csv: String,
}

pub fn personalize_experiment(
    pretrained: &ModelParams,
    original_set: &[Clip],
) -> PersonalizeOutcome {
    let subject = synth::generate_clips(&shifted_spec(900, 1800), 1, 1.0)
        .unwrap()
        .remove(0);
    let cfg = PersonalizeConfig::default();
    let windows =
        train::personalization_windows(&subject, cfg.seconds, cfg.clip_len, cfg.stride).unwrap();
    let loss_before = train::evaluate_loss(pretrained, &windows, &cfg.objective)
        .unwrap()
        .total;
    let (adapted, _) = train::personalize(pretrained, &subject, &cfg).unwrap();
    let loss_after = train::evaluate_loss(&adapted, &windows, &cfg.objective)
        .unwrap()
        .total;
    let span = (cfg.seconds * subject.fps()).round() as usize;
    let rest = subject.window(span, subject.frames() - span).unwrap();
    let report = eval::forgetting_report(
        pretrained,
        &adapted,
        original_set,
        &[rest],
        120,
        60,
        &cfg.objective.band,
        &cfg.objective.spectral,
    )
    .unwrap();
    let mut csv = METRICS_HEADER.to_string();
    for (name, m) in [
        ("original_on_original", &report.original_on_original),
        ("original_on_new", &report.original_on_new),
        ("adapted_on_original", &report.adapted_on_original),
        ("adapted_on_new", &report.adapted_on_new),
    ] {
        csv += &metrics_row(name, m);
    }
    csv += &format!("loss_before,{loss_before:.12},,,\nloss_after,{loss_after:.12},,,\n");
    PersonalizeOutcome {
        windows: windows.len(),
        loss_before,
        loss_after,
        report,
        csv,
    }
}

pub struct RespirationOutcome {
    pub metrics: Metrics,
    pub zca_bin_error: f64,
    pub band: Bandlimits,
    pub csv: String,
}

/// Trains from the shipped respiration config; only configuration differs
/// from the pulse run.
pub fn respiration_experiment() -> RespirationOutcome {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/respiration.toml");
    let cfg = RunConfig::load(&path).unwrap();
    let mut clips =
        synth::generate_clips(&cfg.gen_spec(), cfg.gen.n_clips, cfg.gen.source_len_factor).unwrap();
    let held = clips.split_off(clips.len() - cfg.train.holdout);
    let (params, _) = train::train(&cfg.model_config(), &cfg.train_config(), &clips).unwrap();
    let metrics = eval::evaluate_model(
        &params,
        &held,
        cfg.eval.clip_len,
        cfg.eval.stride,
        &cfg.band,
        &cfg.spectral(),
    )
    .unwrap();

    let spectral = cfg.spectral();
    let motion =
        synth::gen_motion_matrix(1200, 100, 0.3, 4.0, 1.0, spectral.fs, &mut rng(11)).unwrap();
    let y = eval::zca_baseline(&motion, &cfg.band, &spectral).unwrap();
    let f = spectral::psd(&y, &spectral)
        .unwrap()
        .peak_freq(&cfg.band)
        .unwrap();
    let zca_bin_error = (f - 0.3).abs() / spectral.resolution();
    let csv = format!(
        "{METRICS_HEADER}{}zca_peak_hz,{f:.12},,,\n",
        metrics_row("respiration", &metrics)
    );
    RespirationOutcome {
        metrics,
        zca_bin_error,
        band: cfg.band,
        csv,
    }
}

pub struct CollapseOutcome {
    pub std_without: Vec<f64>,
    pub std_with: Vec<f64>,
    pub csv: String,
}

/// Spread of predicted peak rates over the first window of each held-out clip,
/// for models trained with and without the variance term.
pub fn collapse_experiment(train_set: &[Clip], held: &[Clip]) -> CollapseOutcome {
    let mut std_without = Vec::new();
    let mut std_with = Vec::new();
    let mut csv = String::from("seed,variance_weight,pred_std_bpm,pred_mean_bpm\n");
    for seed in 0..3 {
        for (weight, out) in [(0.0, &mut std_without), (1.0, &mut std_with)] {
            let cfg = TrainConfig {
                weights: LossWeights {
                    variance: weight,
                    ..LossWeights::training()
                },
                seed,
                ..TrainConfig::default()
            };
            let (params, _) =
                train::train(&ModelConfig::default_for(8, 8, 3, seed), &cfg, train_set).unwrap();
            let preds: Vec<f64> = held
                .iter()
                .map(|c| {
                    let (y, _) = model::forward(&params, &c.window(0, 120).unwrap()).unwrap();
                    spectral::peak_rate(&y, &cfg.band, &cfg.spectral).unwrap()
                })
                .collect();
            let (mean, std) = sinc_core::util::mean_std(&preds);
            csv += &format!("{seed},{weight},{std:.12},{mean:.12}\n");
            out.push(std);
        }
    }
    CollapseOutcome {
        std_without,
        std_with,
        csv,
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}
