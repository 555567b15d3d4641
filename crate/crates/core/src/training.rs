//! Two-stage pipeline: autoencoder pretraining, latent forecasting with a
//! frozen (or trainable) autoencoder, and the observation-space baseline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{init_autoencoder, pretrain, shuffle, AutoEncoder, PretrainConfig, PretrainReport};
use crate::backbones::{build_backbone, Backbone};
use crate::config::{AeMode, Scheduler, Tap, TrainConfig};
use crate::data::{
    channel_block, load_csv, split, standardize_fit_apply, window_starts, Part, SeriesDataset, Splits, Standardizer,
};
use crate::error::{Error, Result};
use crate::layers::{MlpCache, ParamRef};
use crate::objectives::{loss_perceptual, loss_total};
use crate::optim::{clip_scale, cosine_lr, grad_norm, AdamState};
use crate::rng::{epoch_rng, rng_for, stream};
use crate::tensor::Tensor;

/// Windows per evaluation batch.
const EVAL_BATCH: usize = 256;
/// Rows per block when encoding a whole series.
const ENCODE_BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once the best (first minimal) value lies more than `patience`
/// epochs behind the latest one.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let Some(best) = history
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if !(v < b) => best,
            _ => Some((i, v)),
        })
    else {
        return StopDecision::Continue;
    };
    if history.len() - 1 - best.0 > patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

/// A standardized dataset with its split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: SeriesDataset,
    pub scaler: Standardizer,
    pub splits: Splits,
}

impl PreparedData {
    /// Splits `raw` and standardizes it with training-split statistics.
    pub fn new(raw: &SeriesDataset, ratios: Option<[f64; 3]>) -> Result<PreparedData> {
        let splits = split(raw, ratios.map(|r| (r[0], r[1], r[2])))?;
        let (dataset, scaler) = standardize_fit_apply(raw, &splits)?;
        Ok(PreparedData {
            dataset,
            scaler,
            splits,
        })
    }

    /// Loads the configured CSV file and prepares it.
    pub fn load(cfg: &TrainConfig) -> Result<PreparedData> {
        let raw = load_csv(&cfg.data.path)?;
        PreparedData::new(&raw, cfg.data.split_ratios)
    }

    pub fn channels(&self) -> usize {
        self.dataset.channels()
    }

    pub fn values(&self) -> &Tensor {
        &self.dataset.values
    }

    /// Absolute start rows of every window of `part`.
    pub fn window_starts(&self, part: Part, lookback: usize, horizon: usize) -> Vec<usize> {
        let seg = self.splits.segment(part, lookback);
        window_starts(seg.len(), lookback, horizon, 1)
            .into_iter()
            .map(|s| s + seg.start)
            .collect()
    }

    /// Rows of `part` it owns, time-major.
    pub fn rows(&self, part: Part) -> Tensor {
        let r = self.splits.owned(part);
        self.values().slice_outer(r.start, r.end)
    }
}

/// Channel-major blocks `B×W×len` read from the time-major `N×W` series at
/// rows `start + offset ..`.
pub fn gather_blocks(series: &Tensor, starts: &[usize], offset: usize, len: usize) -> Tensor {
    let w = series.shape()[1];
    let mut out = Vec::with_capacity(starts.len() * w * len);
    for &s in starts {
        out.extend(channel_block(series, s + offset, len).into_data());
    }
    Tensor::new(&[starts.len(), w, len], out).expect("non-empty batch")
}

/// Time-major rows `B×len×W`.
fn gather_rows(series: &Tensor, starts: &[usize], offset: usize, len: usize) -> Tensor {
    let w = series.shape()[1];
    let src = series.data();
    let mut out = Vec::with_capacity(starts.len() * w * len);
    for &s in starts {
        out.extend_from_slice(&src[(s + offset) * w..(s + offset + len) * w]);
    }
    Tensor::new(&[starts.len(), len, w], out).expect("non-empty batch")
}

/// Encodes a time-major `N×C` series to `N×D` in fixed-size blocks.
pub fn encode_series(ae: &AutoEncoder, values: &Tensor) -> Result<Tensor> {
    let n = values.shape()[0];
    let mut out = Vec::with_capacity(n * ae.latent_dim());
    let mut start = 0;
    while start < n {
        let end = (start + ENCODE_BLOCK).min(n);
        out.extend(ae.encode_points(&values.slice_outer(start, end))?.into_data());
        start = end;
    }
    Tensor::new(&[n, ae.latent_dim()], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse: f64,
    pub mae: f64,
    /// Element-mean squared error between forecast and encoded future
    /// latent blocks (latent models only).
    pub latent_mse: Option<f64>,
}

impl Evaluation {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            mse: self.mse,
            mae: self.mae,
        }
    }
}

/// A trained forecaster: a backbone either on autoencoder latents or
/// directly on observations.
#[derive(Clone)]
pub enum Forecaster {
    Latent {
        ae: AutoEncoder,
        backbone: Box<dyn Backbone>,
    },
    Direct {
        backbone: Box<dyn Backbone>,
    },
}

impl std::fmt::Debug for Forecaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Forecaster")
            .field("kind", &self.kind())
            .field("backbone", self.backbone().spec())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Autoencoder,
    Latent,
    Baseline,
}

impl Forecaster {
    pub fn kind(&self) -> RunKind {
        match self {
            Forecaster::Latent { .. } => RunKind::Latent,
            Forecaster::Direct { .. } => RunKind::Baseline,
        }
    }

    pub fn backbone(&self) -> &dyn Backbone {
        match self {
            Forecaster::Latent { backbone, .. } | Forecaster::Direct { backbone } => backbone.as_ref(),
        }
    }

    pub fn autoencoder(&self) -> Option<&AutoEncoder> {
        match self {
            Forecaster::Latent { ae, .. } => Some(ae),
            Forecaster::Direct { .. } => None,
        }
    }

    pub fn lookback(&self) -> usize {
        self.backbone().spec().lookback
    }

    pub fn horizon(&self) -> usize {
        self.backbone().spec().horizon
    }

    /// Number of observed channels the model reads.
    pub fn channels(&self) -> usize {
        match self {
            Forecaster::Latent { ae, .. } => ae.in_dim(),
            Forecaster::Direct { backbone } => backbone.spec().channels,
        }
    }

    /// The series the backbone reads: latents for latent models, the
    /// observations otherwise.
    fn backbone_series(&self, values: &Tensor) -> Result<Option<Tensor>> {
        match self {
            Forecaster::Latent { ae, .. } => encode_series(ae, values).map(Some),
            Forecaster::Direct { .. } => Ok(None),
        }
    }

    fn check_data(&self, data: &PreparedData) -> Result<()> {
        if data.channels() != self.channels() {
            return Err(Error::shape("forecaster_input", &[self.channels()], &[data.channels()]));
        }
        Ok(())
    }

    /// Forecast for windows starting at `starts`. Returns the observation
    /// forecast `B×C×T` and, for latent models, the latent forecast `B×D×T`.
    fn predict(&self, values: &Tensor, latents: Option<&Tensor>, starts: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
        let l = self.lookback();
        match self {
            Forecaster::Latent { ae, backbone } => {
                let z = latents.ok_or_else(|| Error::Internal("latent series missing".into()))?;
                let z_hat = backbone.forward(&gather_blocks(z, starts, 0, l))?;
                let y_hat = ae.decode(&z_hat)?;
                Ok((y_hat, Some(z_hat)))
            }
            Forecaster::Direct { backbone } => Ok((backbone.forward(&gather_blocks(values, starts, 0, l))?, None)),
        }
    }

    /// Forecast for the window starting at absolute row `start` of a
    /// standardized series, `C×T`.
    pub fn forecast_window(&self, values: &Tensor, start: usize) -> Result<Tensor> {
        let l = self.lookback();
        let rows = values.slice_outer(start, start + l);
        let latents = self.backbone_series(&rows)?;
        let (y, _) = self.predict(&rows, latents.as_ref(), &[0])?;
        let s = y.shape().to_vec();
        y.reshape(&s[1..])
    }

    /// MSE/MAE over every window of `part`, in standardized units.
    pub fn evaluate(&self, data: &PreparedData, part: Part) -> Result<Evaluation> {
        self.check_data(data)?;
        let (l, t) = (self.lookback(), self.horizon());
        let starts = data.window_starts(part, l, t);
        if starts.is_empty() {
            return Err(Error::Data(format!(
                "{part:?} split has no windows for lookback {l} and horizon {t}"
            )));
        }
        let values = data.values();
        let latents = self.backbone_series(values)?;
        let (mut se, mut ae_sum, mut lse, mut n, mut ln) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in starts.chunks(EVAL_BATCH) {
            let (y_hat, z_hat) = self.predict(values, latents.as_ref(), batch)?;
            let y = gather_blocks(values, batch, l, t);
            for (a, b) in y.data().iter().zip(y_hat.data()) {
                se += (b - a) * (b - a);
                ae_sum += (b - a).abs();
            }
            n += y.len();
            if let (Some(z_hat), Some(z)) = (z_hat, latents.as_ref()) {
                let z_y = gather_blocks(z, batch, l, t);
                lse += z_y
                    .data()
                    .iter()
                    .zip(z_hat.data())
                    .fold(0.0, |acc, (a, b)| acc + (b - a) * (b - a));
                ln += z_y.len();
            }
        }
        Ok(Evaluation {
            mse: se / n as f64,
            mae: ae_sum / n as f64,
            latent_mse: (ln > 0).then(|| lse / ln as f64),
        })
    }

    /// Embeddings at `tap` for `steps` consecutive forecast origins starting
    /// with the first window of `part`. Row `i` belongs to the origin whose
    /// first forecast step is `step_index[i]`.
    pub fn embeddings(&self, data: &PreparedData, part: Part, tap: Tap, steps: usize) -> Result<(Vec<usize>, Tensor)> {
        self.check_data(data)?;
        let (l, t) = (self.lookback(), self.horizon());
        let starts = data.window_starts(part, l, t);
        if starts.len() < steps {
            return Err(Error::Data(format!(
                "{part:?} split has {} windows, {steps} embedding steps requested",
                starts.len()
            )));
        }
        let starts = &starts[..steps];
        let values = data.values();
        let latents = self.backbone_series(values)?;
        let series = latents.as_ref().unwrap_or(values);
        let mut rows = Vec::new();
        let mut dims = 0;
        for batch in starts.chunks(EVAL_BATCH) {
            let x = gather_blocks(series, batch, 0, l);
            let e = match (tap, self) {
                (Tap::DecoderPre, Forecaster::Latent { backbone, .. }) => {
                    // first forecast latent state of each origin
                    let z_hat = backbone.forward(&x)?;
                    let (b, d, t) = (z_hat.shape()[0], z_hat.shape()[1], z_hat.shape()[2]);
                    let mut out = Vec::with_capacity(b * d);
                    for i in 0..b {
                        for j in 0..d {
                            out.push(z_hat.data()[(i * d + j) * t]);
                        }
                    }
                    Tensor::new(&[b, d], out)?
                }
                (Tap::DecoderPre, Forecaster::Direct { backbone })
                | (Tap::BackboneHidden, Forecaster::Direct { backbone }) => flatten_samples(backbone.hidden(&x)?)?,
                (Tap::BackboneHidden, Forecaster::Latent { backbone, .. }) => flatten_samples(backbone.hidden(&x)?)?,
            };
            dims = e.inner();
            rows.extend(e.into_data());
        }
        let index = starts.iter().map(|s| s + l).collect();
        Ok((index, Tensor::new(&[steps, dims], rows)?))
    }
}

fn flatten_samples(t: Tensor) -> Result<Tensor> {
    let b = t.shape()[0];
    let rest = t.len() / b;
    t.reshape(&[b, rest])
}

/// First observed step of each of `steps` consecutive windows of `part`,
/// aligned with [`Forecaster::embeddings`].
pub fn raw_trace(
    data: &PreparedData,
    part: Part,
    lookback: usize,
    horizon: usize,
    steps: usize,
) -> Result<(Vec<usize>, Tensor)> {
    let starts = data.window_starts(part, lookback, horizon);
    if starts.len() < steps {
        return Err(Error::Data(format!(
            "{part:?} split has {} windows, {steps} steps requested",
            starts.len()
        )));
    }
    let index: Vec<usize> = starts[..steps].iter().map(|s| s + lookback).collect();
    let c = data.channels();
    let mut rows = Vec::with_capacity(steps * c);
    for &i in &index {
        rows.extend_from_slice(data.values().row(i));
    }
    Ok((index, Tensor::new(&[steps, c], rows)?))
}

/// Mean training losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLosses {
    pub total: f64,
    pub pred: Option<f64>,
    pub align: Option<f64>,
    pub perc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: TrainLosses,
    pub val_mse: f64,
    pub val_mae: f64,
    pub val_latent_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: RunKind,
    pub dataset: String,
    pub seed: u64,
    pub horizon: Option<usize>,
    pub ae_mode: Option<AeMode>,
    pub config: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<PretrainReport>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub test: Option<Metrics>,
    pub ae_checksum_before: Option<String>,
    pub ae_checksum_after: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(kind: RunKind, cfg: &TrainConfig, horizon: Option<usize>) -> RunRecord {
        RunRecord {
            kind,
            dataset: cfg.data.dataset.clone(),
            seed: cfg.training.seed,
            horizon,
            ae_mode: None,
            config: cfg.clone(),
            stage1: None,
            epochs: Vec::new(),
            best_epoch: None,
            best_val_mse: None,
            test: None,
            ae_checksum_before: None,
            ae_checksum_after: None,
            wall_clock_secs: 0.0,
        }
    }
}

/// Pretrains the autoencoder on the training split and freezes it.
pub fn run_stage1(cfg: &TrainConfig, data: &PreparedData) -> Result<(AutoEncoder, RunRecord)> {
    let clock = Instant::now();
    let mut ae = init_autoencoder(cfg.ae_spec(data.channels()), cfg.training.seed)?;
    let a = &cfg.autoencoder;
    let pcfg = PretrainConfig {
        epochs: a.epochs,
        patience: a.patience,
        lr: a.lr,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        seed: cfg.training.seed,
        grad_clip: cfg.grad_clip(),
    };
    let report = pretrain(&mut ae, &data.rows(Part::Train), &data.rows(Part::Val), &pcfg)?;
    ae.freeze();
    let mut record = RunRecord::new(RunKind::Autoencoder, cfg, None);
    record.best_epoch = report.best_epoch;
    record.ae_checksum_after = Some(ae.checksum());
    record.stage1 = Some(report);
    record.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok((ae, record))
}

/// Result of a stage-2 or baseline run.
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Forecaster,
    pub record: RunRecord,
    /// Progress-tagged models (`0`, `50`, `100` percent) when the config asks
    /// for embedding exports.
    pub snapshots: Vec<(u32, Forecaster)>,
}

/// Trains a backbone on autoencoder latents for horizon `horizon`.
///
/// `ae` is the pretrained autoencoder; it is required for the frozen and
/// finetune modes and ignored in scratch mode.
pub fn run_stage2(
    cfg: &TrainConfig,
    data: &PreparedData,
    ae: Option<AutoEncoder>,
    horizon: usize,
) -> Result<TrainOutcome> {
    let mode = cfg.ae_mode();
    let mut ae = match (mode, ae) {
        (AeMode::Scratch { .. }, given) => {
            if given.is_some() {
                log::warn!("scratch mode ignores the supplied autoencoder");
            }
            init_autoencoder(cfg.ae_spec(data.channels()), cfg.training.seed)?
        }
        (_, Some(ae)) => ae,
        (_, None) => {
            return Err(Error::Config(
                "latent training needs a pretrained autoencoder checkpoint".into(),
            ))
        }
    };
    if ae.in_dim() != data.channels() {
        return Err(Error::shape("autoencoder_input", &[ae.in_dim()], &[data.channels()]));
    }
    ae.frozen = mode.trainable().is_none();
    let spec = cfg.backbone_spec(horizon, ae.latent_dim());
    let backbone = build_backbone(spec, &mut rng_for(cfg.training.seed, stream::BACKBONE_INIT))?;
    let mut record = RunRecord::new(RunKind::Latent, cfg, Some(horizon));
    record.ae_mode = Some(mode);
    train(cfg, data, Forecaster::Latent { ae, backbone }, record)
}

/// Trains the backbone directly on observations with an MSE loss.
pub fn run_baseline(cfg: &TrainConfig, data: &PreparedData, horizon: usize) -> Result<TrainOutcome> {
    let spec = cfg.backbone_spec(horizon, data.channels());
    let backbone = build_backbone(spec, &mut rng_for(cfg.training.seed, stream::BACKBONE_INIT))?;
    let record = RunRecord::new(RunKind::Baseline, cfg, Some(horizon));
    train(cfg, data, Forecaster::Direct { backbone }, record)
}

fn scheduled(cfg: &TrainConfig, base: f64, epoch: usize) -> f64 {
    match cfg.training.scheduler {
        Scheduler::Cosine => cosine_lr(base, epoch, cfg.training.epochs),
        Scheduler::Constant => base,
    }
}

fn clip_of(params: &[ParamRef<'_>], max_norm: Option<f64>) -> f64 {
    clip_scale(grad_norm(params), max_norm)
}

struct Optimizers {
    backbone: AdamState,
    encoder: AdamState,
    decoder: AdamState,
}

fn train(cfg: &TrainConfig, data: &PreparedData, mut model: Forecaster, mut record: RunRecord) -> Result<TrainOutcome> {
    let clock = Instant::now();
    model.check_data(data)?;
    let (l, t) = (model.lookback(), model.horizon());
    let seed = cfg.training.seed;
    let train_starts = data.window_starts(Part::Train, l, t);
    if train_starts.is_empty() {
        return Err(Error::Data(format!(
            "training split has no windows for lookback {l} and horizon {t}"
        )));
    }
    let frozen_checksum = match &model {
        Forecaster::Latent { ae, .. } if ae.frozen => Some(ae.checksum()),
        _ => None,
    };
    record.ae_checksum_before = model.autoencoder().map(AutoEncoder::checksum);
    let keep_snapshots = cfg.diagnostics.export;
    let mut history: Vec<Forecaster> = Vec::new();
    let initial = keep_snapshots.then(|| model.clone());

    let mut opt = Optimizers {
        backbone: AdamState::default(),
        encoder: AdamState::default(),
        decoder: AdamState::default(),
    };
    // latents of a frozen autoencoder never change
    let frozen_latents = match &model {
        Forecaster::Latent { ae, .. } if ae.frozen => Some(encode_series(ae, data.values())?),
        _ => None,
    };

    let mut best = (f64::INFINITY, model.clone(), None);
    let mut val_history = Vec::new();
    for epoch in 0..cfg.training.epochs {
        let mut order = train_starts.clone();
        shuffle(&mut order, &mut epoch_rng(seed, stream::SHUFFLE, epoch));
        let mut drop_rng = epoch_rng(seed, stream::DROPOUT, epoch);
        let lr = scheduled(cfg, cfg.training.lr, epoch);
        let mut sums = TrainLosses::default();
        let mut batches = 0usize;
        for batch in order.chunks(cfg.training.batch_size) {
            let step = match &mut model {
                Forecaster::Direct { backbone } => {
                    let x = gather_blocks(data.values(), batch, 0, l);
                    let y = gather_blocks(data.values(), batch, l, t);
                    let y_hat = backbone.forward_train(&x, Some(&mut drop_rng))?;
                    let loss = loss_perceptual(&y, &y_hat)?;
                    check_finite(loss.value, epoch)?;
                    backbone.zero_grads();
                    backbone.backward_params(&loss.grad)?;
                    let scale = clip_of(&backbone.params(), cfg.grad_clip());
                    opt.backbone.step(backbone.params(), lr, scale)?;
                    TrainLosses {
                        total: loss.value,
                        ..TrainLosses::default()
                    }
                }
                Forecaster::Latent { ae, backbone } => latent_step(
                    cfg,
                    data,
                    ae,
                    backbone.as_mut(),
                    frozen_latents.as_ref(),
                    batch,
                    &mut drop_rng,
                    &mut opt,
                    epoch,
                    lr,
                )?,
            };
            sums.total += step.total;
            accumulate_opt(&mut sums.pred, step.pred);
            accumulate_opt(&mut sums.align, step.align);
            accumulate_opt(&mut sums.perc, step.perc);
            batches += 1;
        }
        let nb = batches as f64;
        let train_losses = TrainLosses {
            total: sums.total / nb,
            pred: sums.pred.map(|v| v / nb),
            align: sums.align.map(|v| v / nb),
            perc: sums.perc.map(|v| v / nb),
        };
        let val = model.evaluate(data, Part::Val)?;
        if !val.mse.is_finite() {
            return Err(Error::Training(format!(
                "validation MSE is not finite at epoch {epoch}"
            )));
        }
        log::info!(
            "{:?} T={t} epoch {epoch}: lr {lr:.2e} train {:.5} val mse {:.5} mae {:.5}",
            record.kind,
            train_losses.total,
            val.mse,
            val.mae
        );
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train: train_losses,
            val_mse: val.mse,
            val_mae: val.mae,
            val_latent_mse: val.latent_mse,
        });
        if val.mse < best.0 {
            best = (val.mse, model.clone(), Some(epoch));
        }
        if keep_snapshots {
            history.push(model.clone());
        }
        val_history.push(val.mse);
        if early_stop_check(&val_history, cfg.training.patience) == StopDecision::Stop {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }

    let (best_val, best_model, best_epoch) = best;
    if let (Some(before), Forecaster::Latent { ae, .. }) = (&frozen_checksum, &model) {
        let after = ae.checksum();
        let kept = best_model.autoencoder().map(AutoEncoder::checksum);
        if &after != before || kept.as_ref() != Some(before) {
            return Err(Error::Internal(
                "frozen autoencoder parameters changed during training".into(),
            ));
        }
    }
    record.ae_checksum_after = best_model.autoencoder().map(AutoEncoder::checksum);
    record.best_epoch = best_epoch;
    record.best_val_mse = best_epoch.map(|_| best_val);
    record.test = Some(best_model.evaluate(data, Part::Test)?.metrics());

    let mut snapshots = Vec::new();
    if let Some(initial) = initial {
        snapshots.push((0, initial));
        if !history.is_empty() {
            let mid = (history.len() - 1) / 2;
            snapshots.push((50, history.swap_remove(mid)));
        }
        snapshots.push((100, best_model.clone()));
    }
    record.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model: best_model,
        record,
        snapshots,
    })
}

fn accumulate_opt(acc: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *acc = Some(acc.unwrap_or(0.0) + v);
    }
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("training loss is not finite at epoch {epoch}")))
    }
}

/// Encoder forward over time-major rows `B×len×C`, returning the
/// channel-major latent block `B×D×len` and the cache for backward.
fn encode_train(ae: &AutoEncoder, rows: &Tensor) -> Result<(Tensor, MlpCache)> {
    let (z, cache) = ae.encoder.forward_train(rows, None)?;
    Ok((z.swap_last_two(), cache))
}

#[allow(clippy::too_many_arguments)]
fn latent_step(
    cfg: &TrainConfig,
    data: &PreparedData,
    ae: &mut AutoEncoder,
    backbone: &mut dyn Backbone,
    frozen_latents: Option<&Tensor>,
    batch: &[usize],
    drop_rng: &mut crate::rng::Rng,
    opt: &mut Optimizers,
    epoch: usize,
    lr: f64,
) -> Result<TrainLosses> {
    let spec = *backbone.spec();
    let (l, t) = (spec.lookback, spec.horizon);
    let values = data.values();
    let trainable = cfg.ae_mode().trainable().filter(|_| !ae.frozen);

    let (z_x, z_y, caches) = match frozen_latents {
        Some(z) => (gather_blocks(z, batch, 0, l), gather_blocks(z, batch, l, t), None),
        None => {
            let (z_x, cx) = encode_train(ae, &gather_rows(values, batch, 0, l))?;
            let (z_y, cy) = encode_train(ae, &gather_rows(values, batch, l, t))?;
            (z_x, z_y, Some((cx, cy)))
        }
    };
    let z_hat = backbone.forward_train(&z_x, Some(drop_rng))?;

    let w = &cfg.losses;
    let decoded = if w.perc > 0.0 {
        let (y_hat_rows, cache) = ae.decoder.forward_train(&z_hat.swap_last_two(), None)?;
        Some((gather_blocks(values, batch, l, t), y_hat_rows.swap_last_two(), cache))
    } else {
        None
    };
    let loss = loss_total(w, &z_y, &z_hat, decoded.as_ref().map(|(y, y_hat, _)| (y, y_hat)))?;
    check_finite(loss.value, epoch)?;

    backbone.zero_grads();
    ae.zero_grads();
    let mut grad_z_hat = loss.grad_z_hat;
    if let (Some((_, _, cache)), Some(g)) = (&decoded, &loss.grad_y_hat) {
        let g_rows = ae.decoder.backward(cache, &g.swap_last_two(), trainable.is_some())?;
        grad_z_hat.add_assign(&g_rows.swap_last_two())?;
    }

    let clip = cfg.grad_clip();
    match (trainable, caches) {
        (Some((enc_lr, dec_lr)), Some((cx, cy))) => {
            let grad_z_x = backbone.backward(&grad_z_hat)?;
            ae.encoder.backward(&cx, &grad_z_x.swap_last_two(), true)?;
            ae.encoder.backward(&cy, &loss.grad_z_y.swap_last_two(), true)?;
            let scale = clip_of(&backbone.params(), clip);
            opt.backbone.step(backbone.params(), lr, scale)?;
            let scale = clip_of(&ae.encoder_params(), clip);
            opt.encoder
                .step(ae.encoder_params(), scheduled(cfg, enc_lr, epoch), scale)?;
            let scale = clip_of(&ae.decoder_params(), clip);
            opt.decoder
                .step(ae.decoder_params(), scheduled(cfg, dec_lr, epoch), scale)?;
        }
        _ => {
            backbone.backward_params(&grad_z_hat)?;
            let scale = clip_of(&backbone.params(), clip);
            opt.backbone.step(backbone.params(), lr, scale)?;
        }
    }
    Ok(TrainLosses {
        total: loss.value,
        pred: Some(loss.pred),
        align: Some(loss.align),
        perc: loss.perc,
    })
}
