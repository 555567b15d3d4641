//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{autoencoder_checkpoint, forecaster_checkpoint, Checkpoint};
use crate::config::{AeModeKind, Tap, TrainConfig};
use crate::data::Part;
use crate::diagnostics::{
    compare_runs, read_trace, write_spectra, write_trace, EmbeddingTrace, TraceMeta, TraceSource,
};
use crate::error::{Error, Result};
use crate::training::{
    raw_trace, run_baseline, run_stage1, run_stage2, Forecaster, Metrics, PreparedData, RunKind, RunRecord,
    TrainOutcome,
};

#[derive(Debug, Parser)]
#[command(name = "latenttsf", version, about = "Latent-space time series forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain and freeze the point-wise autoencoder.
    PretrainAe(PretrainArgs),
    /// Train a forecaster on autoencoder latents, or the plain baseline.
    Train(TrainArgs),
    /// Recompute test metrics of a saved forecaster.
    Eval(EvalArgs),
    /// Compare embedding exports of two training runs.
    Diagnose(DiagnoseArgs),
    /// Write a synthetic multichannel periodic series as CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunOptions {
    /// TOML configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Run seed; overrides `training.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Treat a missing `--seed` as an error.
    #[arg(long)]
    pub strict: bool,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunOptions,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOptions,
    /// Pretrained autoencoder checkpoint.
    #[arg(long, conflicts_with = "baseline")]
    pub ae: Option<PathBuf>,
    /// Train the backbone directly on observations.
    #[arg(long)]
    pub baseline: bool,
    /// Comma-separated horizons; overrides `data.pred_lens`.
    #[arg(long, value_delimiter = ',')]
    pub pred_lens: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    #[arg(long, default_value = "decoder_pre")]
    pub tap: String,
    #[arg(long, default_value = "runs/diagnose")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub len: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainAe(a) => cmd_pretrain_ae(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => {
            let m = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }
        Command::Diagnose(a) => cmd_diagnose(&a).map(|_| ()),
        Command::Synth(a) => {
            let ds = crate::synthetic::periodic(a.len, a.channels, a.seed)?;
            crate::synthetic::write_csv(&ds, &a.out)
        }
    }
}

fn resolve_config(opts: &RunOptions) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(&opts.config)?;
    match opts.seed {
        Some(s) => cfg.training.seed = s,
        None if opts.strict => {
            return Err(Error::Config("--seed is required with --strict".into()));
        }
        None => log::warn!("no --seed given; using seed {} from the config", cfg.training.seed),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_resolved(cfg: &TrainConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.resolved.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

/// Pretrains the autoencoder; writes `autoencoder.ckpt` and `run.json`.
pub fn cmd_pretrain_ae(args: &PretrainArgs) -> Result<RunRecord> {
    let cfg = resolve_config(&args.run)?;
    let data = PreparedData::load(&cfg)?;
    let out = &args.run.out;
    create_dir(out)?;
    write_resolved(&cfg, out)?;
    let (ae, record) = run_stage1(&cfg, &data)?;
    let final_rec = record.stage1.as_ref().map(|r| r.best_val_rec);
    let meta = serde_json::json!({
        "dataset": cfg.data.dataset,
        "seed": cfg.training.seed,
        "channels": ae.in_dim(),
        "latent_dim": ae.latent_dim(),
        "final_val_rec": final_rec,
    });
    autoencoder_checkpoint(&ae, meta)?.save(&out.join("autoencoder.ckpt"))?;
    write_json(&out.join("run.json"), &record)?;
    log::info!("autoencoder written to {}", out.join("autoencoder.ckpt").display());
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub pred_len: usize,
    pub mse: f64,
    pub mae: f64,
}

/// Deterministic summary of a training invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: RunKind,
    pub dataset: String,
    pub seed: u64,
    pub horizons: Vec<HorizonMetrics>,
    pub average: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: MetricsReport,
    pub runs: Vec<RunRecord>,
}

/// Trains one model per horizon. Each horizon gets `T<h>/model.ckpt`,
/// `T<h>/run.json` and optional embedding exports; the output directory
/// receives `metrics.json`, `run.json` and the resolved config.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let mut cfg = resolve_config(&args.run)?;
    if let Some(p) = &args.pred_lens {
        cfg.data.pred_lens = p.clone();
        cfg.validate()?;
    }
    let ae = match (&args.ae, args.baseline, cfg.training.ae_mode) {
        (_, true, _) => None,
        (Some(path), false, _) => Some(Checkpoint::load(path)?.autoencoder()?),
        (None, false, AeModeKind::Scratch) => None,
        (None, false, _) => {
            return Err(Error::Config(
                "latent training needs --ae <checkpoint> (or --baseline, or training.ae_mode = \"scratch\")".into(),
            ))
        }
    };
    let data = PreparedData::load(&cfg)?;
    let out = &args.run.out;
    create_dir(out)?;
    write_resolved(&cfg, out)?;

    let mut runs = Vec::new();
    let mut horizons = Vec::new();
    for &h in &cfg.data.pred_lens {
        let outcome = if args.baseline {
            run_baseline(&cfg, &data, h)?
        } else {
            run_stage2(&cfg, &data, ae.clone(), h)?
        };
        let dir = out.join(format!("T{h}"));
        create_dir(&dir)?;
        save_outcome(&cfg, &data, &outcome, &dir)?;
        let test = outcome.record.test.expect("training always reports test metrics");
        log::info!("T={h}: test mse {:.6} mae {:.6}", test.mse, test.mae);
        horizons.push(HorizonMetrics {
            pred_len: h,
            mse: test.mse,
            mae: test.mae,
        });
        runs.push(outcome.record);
    }
    let n = horizons.len() as f64;
    let metrics = MetricsReport {
        kind: if args.baseline {
            RunKind::Baseline
        } else {
            RunKind::Latent
        },
        dataset: cfg.data.dataset.clone(),
        seed: cfg.training.seed,
        average: Metrics {
            mse: horizons.iter().map(|m| m.mse).sum::<f64>() / n,
            mae: horizons.iter().map(|m| m.mae).sum::<f64>() / n,
        },
        horizons,
    };
    let report = TrainReport { metrics, runs };
    write_json(&out.join("metrics.json"), &report.metrics)?;
    write_json(&out.join("run.json"), &report)?;
    Ok(report)
}

fn save_outcome(cfg: &TrainConfig, data: &PreparedData, outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    let r = &outcome.record;
    let meta = serde_json::json!({
        "dataset": r.dataset,
        "seed": r.seed,
        "horizon": r.horizon,
        "best_epoch": r.best_epoch,
        "test": r.test,
    });
    forecaster_checkpoint(&outcome.model, meta)?.save(&dir.join("model.ckpt"))?;
    write_json(&dir.join("run.json"), r)?;
    if cfg.diagnostics.export {
        export_embeddings(cfg, data, &outcome.snapshots, &dir.join("embeddings"))?;
    }
    Ok(())
}

/// Writes `<tap>_p<progress>.csv` for every snapshot and tap, plus the raw
/// observations at the same steps as `raw.csv`.
pub fn export_embeddings(
    cfg: &TrainConfig,
    data: &PreparedData,
    snapshots: &[(u32, Forecaster)],
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    let steps = cfg.diagnostics.steps;
    let Some((_, first)) = snapshots.first() else {
        return Ok(());
    };
    let base = |source, model: &str, tap, progress| TraceMeta {
        source,
        model: model.to_string(),
        dataset: cfg.data.dataset.clone(),
        tap,
        progress,
        seed: Some(cfg.training.seed),
        horizon: Some(first.horizon()),
    };
    let (index, raw) = raw_trace(data, Part::Test, first.lookback(), first.horizon(), steps)?;
    let raw = EmbeddingTrace::new(raw, index, base(TraceSource::RawObservations, "raw", None, 100))?;
    write_trace(&raw, &dir.join("raw.csv"))?;
    for (progress, model) in snapshots {
        let label = match model.kind() {
            RunKind::Latent => "latent",
            _ => "baseline",
        };
        for &tap in &cfg.diagnostics.taps {
            let (index, m) = model.embeddings(data, Part::Test, tap, steps)?;
            let trace = EmbeddingTrace::new(
                m,
                index,
                base(TraceSource::BackboneEmbeddings, label, Some(tap), *progress),
            )?;
            write_trace(&trace, &dir.join(format!("{}_p{progress:03}.csv", tap.as_str())))?;
        }
    }
    Ok(())
}

/// Test metrics of a saved forecaster on the configured dataset.
pub fn cmd_eval(args: &EvalArgs) -> Result<Metrics> {
    let cfg = TrainConfig::from_file(&args.config)?;
    let model = Checkpoint::load(&args.checkpoint)?.forecaster()?;
    let data = PreparedData::load(&cfg)?;
    let metrics = model.evaluate(&data, Part::Test)?.metrics();
    if let Some(path) = &args.out {
        write_json(path, &metrics)?;
    }
    Ok(metrics)
}

/// Embedding directory of a run: `<run>/embeddings`, or the single
/// `<run>/T*/embeddings` of a one-horizon run.
fn embeddings_dir(run: &Path) -> Option<PathBuf> {
    let direct = run.join("embeddings");
    if direct.is_dir() {
        return Some(direct);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(run)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("embeddings"))
        .filter(|p| p.is_dir())
        .collect();
    (found.len() == 1).then(|| found.remove(0))
}

fn final_export(run: &Path, tap: Tap) -> Result<PathBuf> {
    let file = format!("{}_p100.csv", tap.as_str());
    embeddings_dir(run)
        .map(|d| d.join(&file))
        .filter(|p| p.is_file())
        .ok_or_else(|| {
            Error::Config(format!(
                "{} has no {} embedding export ({file})",
                run.display(),
                tap.as_str()
            ))
        })
}

/// Compares the final embedding exports of two runs; writes
/// `comparison.json` and `spectra.csv`.
pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<crate::diagnostics::Comparison> {
    let tap = Tap::parse(&args.tap)?;
    let a = read_trace(&final_export(&args.run_a, tap)?)?;
    let b = read_trace(&final_export(&args.run_b, tap)?)?;
    let raw_path = embeddings_dir(&args.run_a)
        .map(|d| d.join("raw.csv"))
        .filter(|p| p.is_file());
    let raw = raw_path.map(|p| read_trace(&p)).transpose()?;
    let cmp = compare_runs(&a, &b, raw.as_ref())?;
    create_dir(&args.out)?;
    write_json(&args.out.join("comparison.json"), &cmp)?;
    let mut spectra = vec![("a", &cmp.a.spectrum), ("b", &cmp.b.spectrum)];
    if let Some(r) = &cmp.raw {
        spectra.push(("raw", &r.spectrum));
    }
    write_spectra(&args.out.join("spectra.csv"), &spectra)?;
    println!(
        "adjacent distance a {:.6} b {:.6} difference {:+.6}",
        cmp.a.adjacent_distance, cmp.b.adjacent_distance, cmp.difference
    );
    Ok(cmp)
}
