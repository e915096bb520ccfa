//! `sinc`: generate synthetic data, train, personalize, adapt at test time,
//! sweep poisoning rates and score rate files.
//!
//! Exit status is 0 on success, 1 on a configuration or usage error and 2 on
//! any other failure. Diagnostics are single lines on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use sinc_core::config::RunConfig;
use sinc_core::eval::{self, ForgettingReport, Metrics};
use sinc_core::synth::{self, DatasetManifest};
use sinc_core::train::{self, TrainHistory};
use sinc_core::{util, Clip, ModelParams, RateSeries, Result, SincError};

#[derive(Parser)]
#[command(
    name = "sinc",
    version,
    about = "Unsupervised rate estimation from synthetic video-like clips"
)]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Gen,
    /// Train on `inputs.dataset`, scoring the trailing `train.holdout` clips.
    Train,
    /// Finetune `inputs.checkpoint` on the start of `inputs.subject`.
    Personalize,
    /// Adapt `inputs.checkpoint` along each clip of `inputs.stream`.
    Tta,
    /// MAE versus poisoning rate over folds of `inputs.dataset`.
    PoisonSweep,
    /// Score a predicted rate file against a reference rate file.
    Eval { pred: PathBuf, gt: PathBuf },
}

fn exit_code(e: &SincError) -> u8 {
    match e {
        SincError::Config(_) | SincError::InvalidBand(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(SincError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| SincError::Config(format!("cannot size thread pool: {e}")))?;
    }
    if let Command::Eval { pred, gt } = &cli.command {
        return cmd_eval(pred, gt, cli.out.as_deref());
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .ok_or_else(|| SincError::Config("--out DIR is required".into()))?;
    util::write_atomic(&out.join("run_config.toml"), cfg.to_toml().as_bytes())?;
    match cli.command {
        Command::Gen => cmd_gen(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::Personalize => cmd_personalize(&cfg, &out),
        Command::Tta => cmd_tta(&cfg, &out),
        Command::PoisonSweep => cmd_poison_sweep(&cfg, &out),
        Command::Eval { .. } => unreachable!("handled above"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
    text.push('\n');
    util::write_atomic(path, text.as_bytes())
}

fn load_dataset(cfg: &RunConfig, key: &str) -> Result<Vec<Clip>> {
    let (manifest, dir) = DatasetManifest::locate(&cfg.input(key)?)?;
    manifest.load_clips(&dir)
}

/// A single clip file, or the first clip of a dataset.
fn load_subject(path: &Path) -> Result<Clip> {
    if path.is_dir() || path.extension().is_some_and(|e| e == "toml") {
        let (manifest, dir) = DatasetManifest::locate(path)?;
        let first = manifest
            .entries
            .first()
            .ok_or_else(|| SincError::InvalidInput(format!("{} lists no clips", path.display())))?;
        Clip::load(&dir.join(&first.path))
    } else {
        Clip::load(path)
    }
}

fn clip_seconds(clip: &Clip) -> f64 {
    clip.frames() as f64 / clip.fps()
}

/// Predicted and reference rates of every clip, laid end to end.
fn chained_rates(
    clips: &[Clip],
    mut predict: impl FnMut(&Clip) -> Result<RateSeries>,
    clip_len: usize,
    stride: usize,
) -> Result<(RateSeries, Option<RateSeries>)> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for clip in clips {
        pred.push((predict(clip)?, clip_seconds(clip)));
        if clip.gt_rate().is_some() {
            truth.push((
                eval::truth_rates(clip, clip_len, stride)?,
                clip_seconds(clip),
            ));
        }
    }
    let truth = match truth.len() == clips.len() {
        true => Some(eval::chain_series(&truth)?),
        false => None,
    };
    Ok((eval::chain_series(&pred)?, truth))
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.gen_spec();
    let manifest = synth::gen_dataset(&spec, cfg.gen.n_clips, cfg.gen.source_len_factor, out)?;
    let frames = manifest.entries.first().map_or(0, |e| e.frames);
    println!(
        "wrote {} clips of {} frames ({}x{}x{} at {} fps), band [{}, {}] Hz, seed {} to {}",
        manifest.entries.len(),
        frames,
        spec.width,
        spec.height,
        spec.channels,
        spec.fps,
        cfg.band.a,
        cfg.band.b,
        cfg.seed,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let clips = load_dataset(cfg, "dataset")?;
    let holdout = cfg.train.holdout;
    if holdout >= clips.len() {
        return Err(SincError::Config(format!(
            "train.holdout = {holdout} leaves no training clips out of {}",
            clips.len()
        )));
    }
    let (train_set, held) = clips.split_at(clips.len() - holdout);
    let started = Instant::now();
    let (params, history) = train::train(&cfg.model_config(), &cfg.train_config(), train_set)?;
    eprintln!(
        "trained {} steps on {} clips in {:.1} s",
        history.steps.len(),
        train_set.len(),
        started.elapsed().as_secs_f64()
    );
    params.save(&out.join("model.sinc"))?;
    history.save(&out.join("history.jsonl"))?;
    report_final_loss(&history);
    if !held.is_empty() {
        let (len, stride) = (cfg.eval.clip_len, cfg.eval.stride);
        let spectral = cfg.spectral();
        let (pred, truth) = chained_rates(
            held,
            |c| eval::predict_rates(&params, c, len, stride, &cfg.band, &spectral),
            len,
            stride,
        )?;
        eval::write_rates_csv(&out.join("pred_rates.csv"), &pred)?;
        if let Some(truth) = truth {
            eval::write_rates_csv(&out.join("gt_rates.csv"), &truth)?;
            let metrics = eval::rate_metrics(&pred, &truth)?;
            write_json(&out.join("metrics.json"), &metrics)?;
            println!("held-out {} clips: {}", held.len(), summary(&metrics));
        }
    }
    Ok(())
}

fn report_final_loss(history: &TrainHistory) {
    if let Some(last) = history.steps.last() {
        let epoch = last.epoch;
        if let Some(loss) = history.epoch_mean_loss(epoch) {
            println!("epoch {epoch} mean loss {loss:.4}");
        }
    }
}

fn summary(m: &Metrics) -> String {
    let r = m.pearson_r.map_or("n/a".to_string(), |r| format!("{r:.3}"));
    format!("mae {:.3} rmse {:.3} r {r} n {}", m.mae, m.rmse, m.n)
}

#[derive(Serialize)]
struct PersonalizeSummary {
    windows: usize,
    loss_before: f64,
    loss_after: f64,
    forgetting: Option<ForgettingReport>,
}

fn cmd_personalize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pretrained = ModelParams::load(&cfg.input("checkpoint")?)?;
    let subject = load_subject(&cfg.input("subject")?)?;
    let pcfg = cfg.personalize_config();
    let windows =
        train::personalization_windows(&subject, pcfg.seconds, pcfg.clip_len, pcfg.stride)?;
    let loss_before = train::evaluate_loss(&pretrained, &windows, &pcfg.objective)?.total;
    let (adapted, history) = train::personalize(&pretrained, &subject, &pcfg)?;
    let loss_after = train::evaluate_loss(&adapted, &windows, &pcfg.objective)?.total;
    eprintln!("personalized in {:.1} s", history.total_seconds());
    adapted.save(&out.join("model.sinc"))?;
    history.save(&out.join("history.jsonl"))?;

    let span = (pcfg.seconds * subject.fps()).round() as usize;
    let rest = subject.frames().saturating_sub(span);
    let forgetting = match (
        &cfg.inputs.dataset,
        subject.gt_rate(),
        rest >= cfg.eval.clip_len,
    ) {
        (Some(_), Some(_), true) => {
            let original = load_dataset(cfg, "dataset")?;
            let holdout = cfg.train.holdout.min(original.len());
            let original_set = match holdout {
                0 => &original[..],
                h => &original[original.len() - h..],
            };
            let new_set = [subject.window(span, rest)?];
            Some(eval::forgetting_report(
                &pretrained,
                &adapted,
                original_set,
                &new_set,
                cfg.eval.clip_len,
                cfg.eval.stride,
                &cfg.band,
                &cfg.spectral(),
            )?)
        }
        _ => None,
    };
    println!(
        "{} windows, subject loss {loss_before:.4} -> {loss_after:.4}",
        windows.len()
    );
    if let Some(f) = &forgetting {
        println!(
            "subject mae {:.3} -> {:.3}, original-set mae {:.3} -> {:.3}",
            f.original_on_new.mae,
            f.adapted_on_new.mae,
            f.original_on_original.mae,
            f.adapted_on_original.mae
        );
    }
    let summary = PersonalizeSummary {
        windows: windows.len(),
        loss_before,
        loss_after,
        forgetting,
    };
    write_json(&out.join("personalize.json"), &summary)
}

#[derive(Serialize)]
struct TtaMetrics {
    frozen: Metrics,
    tta: Metrics,
}

fn cmd_tta(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pretrained = ModelParams::load(&cfg.input("checkpoint")?)?;
    let streams = load_dataset(cfg, "stream")?;
    let tcfg = cfg.tta_config();
    let spectral = cfg.spectral();
    let (len, stride) = (tcfg.clip_len, tcfg.stride);
    let started = Instant::now();
    let (adapted, truth) = chained_rates(
        &streams,
        |c| train::tta_run(&pretrained, c, &tcfg, &cfg.band, &spectral).map(|r| r.0),
        len,
        stride,
    )?;
    eprintln!(
        "adapted over {} streams in {:.1} s",
        streams.len(),
        started.elapsed().as_secs_f64()
    );
    let (frozen, _) = chained_rates(
        &streams,
        |c| train::frozen_rates(&pretrained, c, len, stride, &cfg.band, &spectral),
        len,
        stride,
    )?;
    eval::write_rates_csv(&out.join("tta_rates.csv"), &adapted)?;
    eval::write_rates_csv(&out.join("frozen_rates.csv"), &frozen)?;
    if let Some(truth) = truth {
        eval::write_rates_csv(&out.join("gt_rates.csv"), &truth)?;
        let metrics = TtaMetrics {
            frozen: eval::rate_metrics(&frozen, &truth)?,
            tta: eval::rate_metrics(&adapted, &truth)?,
        };
        println!("frozen: {}", summary(&metrics.frozen));
        println!("tta:    {}", summary(&metrics.tta));
        write_json(&out.join("metrics.json"), &metrics)?;
    }
    Ok(())
}

fn cmd_poison_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = load_dataset(cfg, "dataset")?;
    let cross = match cfg.inputs.cross_dataset {
        Some(_) => load_dataset(cfg, "cross_dataset")?,
        None => Vec::new(),
    };
    let started = Instant::now();
    let rows = train::poison_sweep(&cfg.sweep_config(), &dataset, &cross)?;
    eprintln!(
        "swept {} rows in {:.1} s",
        rows.len(),
        started.elapsed().as_secs_f64()
    );
    for r in &rows {
        println!(
            "alpha {:.2} {:<6} mae {:.3} +- {:.3}",
            r.alpha, r.eval_set, r.mae_mean, r.mae_std
        );
    }
    util::write_atomic(
        &out.join("sweep.csv"),
        train::sweep_to_csv(&rows).as_bytes(),
    )
}

fn cmd_eval(pred: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let p = eval::read_rates_csv(pred)?;
    let g = eval::read_rates_csv(gt)?;
    let metrics = eval::rate_metrics(&p, &g)?;
    println!("{}", metrics.to_json());
    if let Some(dir) = out {
        write_json(&dir.join("metrics.json"), &metrics)?;
    }
    Ok(())
}
