//! Run configuration: the TOML file users write and the fully resolved
//! [`TrainConfig`] the pipeline consumes.
//!
//! Every key is optional in the file. Missing keys take the common defaults
//! (lookback 720, 100 epochs, patience 5, 2/1 encoder/decoder layers,
//! dropout 0.1, autoencoder chunk length 24, loss weights 10/15, cosine
//! schedule, frozen autoencoder; 10/10/10 including the decoded-forecast
//! loss when the autoencoder is trainable) or, for the per-dataset keys (latent width,
//! hidden width, batch size, learning rate), the dataset's row in
//! [`DatasetDefaults::lookup`]. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeSpec;
use crate::backbones::{BackboneKind, BackboneSpec};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::objectives::{AlignKind, LossWeights, PredNorm};

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "LATENTTSF_DATA_DIR";

/// Per-dataset architecture and optimization defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetDefaults {
    pub channels: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl DatasetDefaults {
    pub fn lookup(name: &str) -> Option<DatasetDefaults> {
        let row = |channels, d_model, d_ff, batch_size, lr| DatasetDefaults {
            channels,
            d_model,
            d_ff,
            batch_size,
            lr,
        };
        match name.to_ascii_lowercase().as_str() {
            "etth1" | "ettm1" => Some(row(7, 32, 64, 256, 3e-4)),
            "etth2" | "ettm2" => Some(row(7, 64, 128, 256, 3e-4)),
            "electricity" | "ecl" => Some(row(321, 512, 1024, 32, 1e-3)),
            "traffic" => Some(row(862, 512, 1024, 32, 1e-3)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub losses: LossSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Option<String>,
    pub path: Option<PathBuf>,
    pub seq_len: Option<usize>,
    pub pred_lens: Option<Vec<usize>>,
    /// `[train, val, test]` fractions; overrides the registered split.
    pub split_ratios: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub latent_dim: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub activation: Option<Activation>,
    pub dropout: Option<f64>,
    pub seq_len: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: Option<BackboneKind>,
    pub kernel: Option<usize>,
    pub d_ff: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub perc: Option<f64>,
    pub align_kind: Option<AlignKind>,
    pub temperature: Option<f64>,
    pub pred_norm: Option<PredNorm>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    pub ae_mode: Option<AeModeKind>,
    pub enc_lr: Option<f64>,
    pub dec_lr: Option<f64>,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: Option<f64>,
    pub scheduler: Option<Scheduler>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub export: Option<bool>,
    pub taps: Option<Vec<Tap>>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeModeKind {
    FrozenPretrained,
    Finetune,
    Scratch,
}

/// How the autoencoder takes part in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AeMode {
    /// Pretrained and frozen.
    FrozenPretrained,
    /// Pretrained, then updated with separate encoder/decoder rates.
    Finetune { enc_lr: f64, dec_lr: f64 },
    /// Randomly initialized and trained jointly with the backbone.
    Scratch { enc_lr: f64, dec_lr: f64 },
}

impl AeMode {
    pub fn trainable(&self) -> Option<(f64, f64)> {
        match *self {
            AeMode::FrozenPretrained => None,
            AeMode::Finetune { enc_lr, dec_lr } | AeMode::Scratch { enc_lr, dec_lr } => Some((enc_lr, dec_lr)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    #[default]
    Cosine,
    Constant,
}

/// Where embeddings are read out of a trained forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    /// Input of the map that produces observation-space forecasts.
    DecoderPre,
    /// Last hidden representation inside the backbone.
    BackboneHidden,
}

impl Tap {
    pub fn as_str(self) -> &'static str {
        match self {
            Tap::DecoderPre => "decoder_pre",
            Tap::BackboneHidden => "backbone_hidden",
        }
    }

    pub fn parse(s: &str) -> Result<Tap> {
        match s {
            "decoder_pre" => Ok(Tap::DecoderPre),
            "backbone_hidden" => Ok(Tap::BackboneHidden),
            other => Err(Error::Config(format!(
                "unknown tap point {other:?} (expected decoder_pre or backbone_hidden)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub dataset: String,
    pub path: PathBuf,
    pub seq_len: usize,
    pub pred_lens: Vec<usize>,
    pub split_ratios: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub kernel: usize,
    pub d_ff: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub ae_mode: AeModeKind,
    pub enc_lr: f64,
    pub dec_lr: f64,
    pub grad_clip: f64,
    pub scheduler: Scheduler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub export: bool,
    pub taps: Vec<Tap>,
    pub steps: usize,
}

/// Fully resolved configuration. Serializes to the same TOML layout as
/// [`ConfigFile`], so a resolved config can be read back as a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub autoencoder: AutoencoderConfig,
    pub backbone: BackboneConfig,
    pub losses: LossWeights,
    pub training: TrainingConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<ConfigFile> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        ConfigFile::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fills every default. Relative data paths are taken relative to
    /// `base_dir`; a missing path falls back to `$LATENTTSF_DATA_DIR/<dataset>.csv`
    /// and then `data/<dataset>.csv`.
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<TrainConfig> {
        let dataset = self
            .data
            .dataset
            .clone()
            .ok_or_else(|| Error::Config("data.dataset is required".into()))?;
        let defaults = DatasetDefaults::lookup(&dataset);
        let need = |what: &str| {
            Error::Config(format!(
                "dataset {dataset:?} has no built-in defaults; set {what} explicitly"
            ))
        };

        let path = match &self.data.path {
            Some(p) if p.is_relative() => base_dir.map_or_else(|| p.clone(), |b| b.join(p)),
            Some(p) => p.clone(),
            None => {
                let dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
                dir.join(format!("{dataset}.csv"))
            }
        };

        let a = &self.autoencoder;
        let latent_dim = match a.latent_dim.or(defaults.map(|d| d.d_model)) {
            Some(d) => d,
            None => return Err(need("autoencoder.latent_dim")),
        };
        let base_lr = match self.training.lr.or(defaults.map(|d| d.lr)) {
            Some(lr) => lr,
            None => return Err(need("training.lr")),
        };
        let d_ff = match self.backbone.d_ff.or(defaults.map(|d| d.d_ff)) {
            Some(v) => v,
            None => 2 * latent_dim,
        };
        let batch_size = self
            .training
            .batch_size
            .or(defaults.map(|d| d.batch_size))
            .unwrap_or(256);

        let ae_mode = self.training.ae_mode.unwrap_or(AeModeKind::FrozenPretrained);
        let mut losses = LossWeights::default();
        if ae_mode != AeModeKind::FrozenPretrained {
            // a trainable decoder only learns through the loss on decoded forecasts
            losses.beta = 10.0;
            losses.perc = 10.0;
        }
        let l = &self.losses;
        losses.alpha = l.alpha.unwrap_or(losses.alpha);
        losses.beta = l.beta.unwrap_or(losses.beta);
        losses.perc = l.perc.unwrap_or(losses.perc);
        losses.align_kind = l.align_kind.unwrap_or(losses.align_kind);
        losses.temperature = l.temperature.unwrap_or(losses.temperature);
        losses.pred_norm = l.pred_norm.unwrap_or(losses.pred_norm);

        let t = &self.training;
        let cfg = TrainConfig {
            data: DataConfig {
                dataset,
                path,
                seq_len: self.data.seq_len.unwrap_or(720),
                pred_lens: self.data.pred_lens.clone().unwrap_or_else(|| vec![96, 192, 336, 720]),
                split_ratios: self.data.split_ratios,
            },
            autoencoder: AutoencoderConfig {
                latent_dim,
                enc_layers: a.enc_layers.unwrap_or(2),
                dec_layers: a.dec_layers.unwrap_or(1),
                activation: a.activation.unwrap_or(Activation::Gelu),
                dropout: a.dropout.unwrap_or(0.1),
                seq_len: a.seq_len.unwrap_or(24),
                batch_size: a.batch_size.unwrap_or(batch_size),
                lr: a.lr.unwrap_or(base_lr),
                epochs: a.epochs.unwrap_or(100),
                patience: a.patience.unwrap_or(5),
            },
            backbone: BackboneConfig {
                kind: self.backbone.kind.unwrap_or(BackboneKind::Dlinear),
                kernel: self.backbone.kernel.unwrap_or(25),
                d_ff,
                hidden_layers: self.backbone.hidden_layers.unwrap_or(1),
                dropout: self.backbone.dropout.unwrap_or(0.1),
            },
            losses,
            training: TrainingConfig {
                batch_size,
                lr: base_lr,
                epochs: t.epochs.unwrap_or(100),
                patience: t.patience.unwrap_or(5),
                seed: t.seed.unwrap_or(2024),
                ae_mode,
                enc_lr: t.enc_lr.unwrap_or(5e-5),
                dec_lr: t.dec_lr.unwrap_or(1e-5),
                grad_clip: t.grad_clip.unwrap_or(5.0),
                scheduler: t.scheduler.unwrap_or_default(),
            },
            diagnostics: DiagnosticsConfig {
                export: self.diagnostics.export.unwrap_or(false),
                taps: self.diagnostics.taps.clone().unwrap_or_else(|| vec![Tap::DecoderPre]),
                steps: self.diagnostics.steps.unwrap_or(256),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    /// Reads and resolves a config file.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        ConfigFile::load(path)?.resolve(path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.seq_len == 0 {
            return bad("data.seq_len must be positive".into());
        }
        if self.data.pred_lens.is_empty() || self.data.pred_lens.contains(&0) {
            return bad(format!(
                "data.pred_lens must be non-empty and positive, got {:?}",
                self.data.pred_lens
            ));
        }
        if let Some(r) = self.data.split_ratios {
            if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("data.split_ratios must be positive and sum to 1, got {r:?}"));
            }
        }
        let t = &self.training;
        for (name, v) in [("training.lr", t.lr), ("autoencoder.lr", self.autoencoder.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("training.enc_lr", t.enc_lr), ("training.dec_lr", t.dec_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if t.batch_size == 0 || self.autoencoder.batch_size == 0 || self.autoencoder.seq_len == 0 {
            return bad("batch sizes and autoencoder.seq_len must be positive".into());
        }
        if !(t.grad_clip >= 0.0) {
            return bad(format!("training.grad_clip must be >= 0, got {}", t.grad_clip));
        }
        if self.diagnostics.steps < 4 {
            return bad("diagnostics.steps must be at least 4".into());
        }
        self.losses.validate()?;
        self.backbone_spec(self.data.pred_lens[0], 1).validate()?;
        if let Some(d) = DatasetDefaults::lookup(&self.data.dataset) {
            if self.autoencoder.latent_dim <= d.channels {
                return bad(format!(
                    "autoencoder.latent_dim={} must exceed the {} channels of {}",
                    self.autoencoder.latent_dim, d.channels, self.data.dataset
                ));
            }
        }
        Ok(())
    }

    pub fn ae_mode(&self) -> AeMode {
        let t = &self.training;
        match t.ae_mode {
            AeModeKind::FrozenPretrained => AeMode::FrozenPretrained,
            AeModeKind::Finetune => AeMode::Finetune {
                enc_lr: t.enc_lr,
                dec_lr: t.dec_lr,
            },
            AeModeKind::Scratch => AeMode::Scratch {
                enc_lr: t.enc_lr,
                dec_lr: t.dec_lr,
            },
        }
    }

    pub fn ae_spec(&self, channels: usize) -> AeSpec {
        let a = &self.autoencoder;
        AeSpec {
            in_dim: channels,
            latent_dim: a.latent_dim,
            enc_layers: a.enc_layers,
            dec_layers: a.dec_layers,
            activation: a.activation,
            dropout: a.dropout,
        }
    }

    pub fn backbone_spec(&self, horizon: usize, channels: usize) -> BackboneSpec {
        let b = &self.backbone;
        BackboneSpec {
            kind: b.kind,
            lookback: self.data.seq_len,
            horizon,
            channels,
            kernel: b.kernel,
            d_ff: b.d_ff,
            hidden_layers: b.hidden_layers,
            dropout: b.dropout,
        }
    }

    pub fn grad_clip(&self) -> Option<f64> {
        (self.training.grad_clip > 0.0).then_some(self.training.grad_clip)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }
}
