//! Point-wise expanding autoencoder (stage 1).
//!
//! The encoder maps each observation vector `x_t ∈ R^C` to a latent state
//! `z_t ∈ R^D` with `D > C`; the decoder maps latent states back. Both act on
//! one time step at a time, so encoding a `C×L` block is the same as
//! encoding its columns one by one.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::{Activation, Mlp, MlpCache, ParamRef};
use crate::objectives::loss_rec;
use crate::optim::{clip_scale, cosine_lr, grad_norm, AdamState};
use crate::rng::{epoch_rng, rng_for, stream, Rng};
use crate::tensor::Tensor;
use crate::training::{early_stop_check, StopDecision};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeSpec {
    pub in_dim: usize,
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub activation: Activation,
    /// Dropout between encoder layers; only active while pretraining.
    pub dropout: f64,
}

impl AeSpec {
    pub fn new(in_dim: usize, latent_dim: usize) -> Self {
        AeSpec {
            in_dim,
            latent_dim,
            enc_layers: 2,
            dec_layers: 1,
            activation: Activation::Gelu,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 {
            return Err(Error::Config("autoencoder input dimension must be positive".into()));
        }
        if self.latent_dim <= self.in_dim {
            return Err(Error::Config(format!(
                "latent dimension D={} must exceed the channel count C={}",
                self.latent_dim, self.in_dim
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn encoder_dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim)
            .chain(std::iter::repeat_n(self.latent_dim, self.enc_layers))
            .collect()
    }

    fn decoder_dims(&self) -> Vec<usize> {
        std::iter::repeat_n(self.latent_dim, self.dec_layers)
            .chain(std::iter::once(self.in_dim))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub spec: AeSpec,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub frozen: bool,
}

impl AutoEncoder {
    pub fn new(spec: AeSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let encoder = Mlp::new(&spec.encoder_dims(), spec.activation, spec.dropout, rng);
        let decoder = Mlp::new(&spec.decoder_dims(), spec.activation, spec.dropout, rng);
        Ok(AutoEncoder {
            spec,
            encoder,
            decoder,
            frozen: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.in_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Point-wise encoding of time-major rows (`...×C` to `...×D`).
    pub fn encode_points(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Point-wise decoding of time-major rows (`...×D` to `...×C`).
    pub fn decode_points(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    /// Encodes an observation vector `[C]`, a channel-major block `[C×L]` or
    /// a batch of blocks `[B×C×L]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise(x, self.in_dim(), "encode", |rows| self.encode_points(rows))
    }

    /// Inverse layout of [`encode`](Self::encode): `[D]`, `[D×T]` or `[B×D×T]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.pointwise(z, self.latent_dim(), "decode", |rows| self.decode_points(rows))
    }

    fn pointwise(
        &self,
        x: &Tensor,
        dim: usize,
        op: &'static str,
        f: impl Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<Tensor> {
        let lead = match x.rank() {
            1 => x.shape()[0],
            2 => x.shape()[0],
            3 => x.shape()[1],
            _ => return Err(Error::shape(op, &[dim], x.shape())),
        };
        if lead != dim {
            return Err(Error::shape(op, &[dim], x.shape()));
        }
        match x.rank() {
            1 => {
                let out = f(&x.clone().reshape(&[1, dim])?)?;
                let n = out.len();
                out.reshape(&[n])
            }
            _ => Ok(f(&x.swap_last_two())?.swap_last_two()),
        }
    }

    pub fn reconstruct_points(&self, x: &Tensor) -> Result<Tensor> {
        self.decode_points(&self.encode_points(x)?)
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        self.decoder.zero_grads();
    }

    pub fn encoder_params(&mut self) -> Vec<ParamRef<'_>> {
        self.encoder.params("encoder")
    }

    pub fn decoder_params(&mut self) -> Vec<ParamRef<'_>> {
        self.decoder.params("decoder")
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_tensors("encoder");
        out.extend(self.decoder.named_tensors("decoder"));
        out
    }

    /// SHA-256 over every parameter's little-endian bytes.
    pub fn checksum(&self) -> String {
        checksum_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }
}

pub(crate) fn checksum_tensors<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Records of a training-mode forward pass over time-major rows.
pub struct AeTrace {
    pub latent: Tensor,
    pub reconstruction: Tensor,
    enc: MlpCache,
    dec: MlpCache,
}

impl AutoEncoder {
    /// Training-mode encode+decode with dropout drawn from `rng`.
    pub fn forward_train(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<AeTrace> {
        let (latent, enc) = self.encoder.forward_train(x, rng)?;
        let (reconstruction, dec) = self.decoder.forward_train(&latent, None)?;
        Ok(AeTrace {
            latent,
            reconstruction,
            enc,
            dec,
        })
    }

    pub fn backward(&mut self, trace: &AeTrace, grad_reconstruction: &Tensor) -> Result<()> {
        let g = self.decoder.backward(&trace.dec, grad_reconstruction, true)?;
        self.encoder.backward(&trace.enc, &g, true)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    /// Chunks per minibatch.
    pub batch_size: usize,
    /// Consecutive time steps per chunk.
    pub seq_len: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_rec: f64,
    pub val_rec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Validation reconstruction loss before any update.
    pub initial_val_rec: f64,
    pub epochs: Vec<PretrainEpoch>,
    pub best_epoch: Option<usize>,
    pub best_val_rec: f64,
}

/// Mean absolute reconstruction error over time-major rows, evaluated in
/// fixed-size blocks.
pub fn reconstruction_loss(ae: &AutoEncoder, rows: &Tensor) -> Result<f64> {
    let n = rows.shape()[0];
    let block = 4096;
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + block).min(n);
        let x = rows.slice_outer(start, end);
        let r = loss_rec(&x, &ae.reconstruct_points(&x)?)?;
        total += r.value * x.len() as f64;
        start = end;
    }
    Ok(total / rows.len() as f64)
}

/// Minimizes the mean absolute reconstruction error over `train` rows
/// (time-major `N×C`) with Adam and a cosine schedule, keeping the
/// parameters of the epoch with the lowest validation loss.
pub fn pretrain(ae: &mut AutoEncoder, train: &Tensor, val: &Tensor, cfg: &PretrainConfig) -> Result<PretrainReport> {
    if ae.frozen {
        return Err(Error::Config("cannot pretrain a frozen autoencoder".into()));
    }
    if cfg.seq_len == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "autoencoder seq_len and batch_size must be positive".into(),
        ));
    }
    train.expect_shape("pretrain", &[train.shape()[0], ae.in_dim()])?;
    val.expect_shape("pretrain", &[val.shape()[0], ae.in_dim()])?;
    let n = train.shape()[0];
    let c = ae.in_dim();
    // every stride-1 chunk of `seq_len` consecutive steps is one sample
    let chunk = cfg.seq_len.min(n);
    let chunk_starts: Vec<usize> = (0..=n - chunk).collect();

    let initial_val_rec = reconstruction_loss(ae, val)?;
    let mut best = (initial_val_rec, ae.clone(), None);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut opt_enc = AdamState::default();
    let mut opt_dec = AdamState::default();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order = chunk_starts.clone();
        shuffle(&mut order, &mut epoch_rng(cfg.seed, stream::AE_SHUFFLE, epoch));
        let mut drop_rng = epoch_rng(cfg.seed, stream::AE_DROPOUT, epoch);
        let mut sum = 0.0;
        let mut count = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(batch.len() * chunk * c);
            for &s in batch {
                rows.extend_from_slice(&train.data()[s * c..(s + chunk) * c]);
            }
            let x = Tensor::new(&[batch.len() * chunk, c], rows)?;
            let trace = ae.forward_train(&x, Some(&mut drop_rng))?;
            let loss = loss_rec(&x, &trace.reconstruction)?;
            if !loss.value.is_finite() {
                return Err(Error::Training(format!(
                    "autoencoder reconstruction loss is not finite at epoch {epoch}"
                )));
            }
            ae.zero_grads();
            ae.backward(&trace, &loss.grad)?;
            let scale = {
                let mut ps = ae.encoder.params("encoder");
                ps.extend(ae.decoder.params("decoder"));
                clip_scale(grad_norm(&ps), cfg.grad_clip)
            };
            opt_enc.step(ae.encoder_params(), lr, scale)?;
            opt_dec.step(ae.decoder_params(), lr, scale)?;
            sum += loss.value * x.len() as f64;
            count += x.len() as f64;
        }
        let val_rec = reconstruction_loss(ae, val)?;
        if !val_rec.is_finite() {
            return Err(Error::Training(format!(
                "autoencoder validation loss is not finite at epoch {epoch}"
            )));
        }
        log::info!(
            "ae epoch {epoch}: lr {lr:.2e} train {:.5} val {val_rec:.5}",
            sum / count.max(1.0)
        );
        epochs.push(PretrainEpoch {
            epoch,
            lr,
            train_rec: sum / count.max(1.0),
            val_rec,
        });
        if val_rec < best.0 {
            best = (val_rec, ae.clone(), Some(epoch));
        }
        history.push(val_rec);
        if early_stop_check(&history, cfg.patience) == StopDecision::Stop {
            break;
        }
    }
    let (best_val_rec, best_ae, best_epoch) = best;
    *ae = best_ae;
    ae.zero_grads();
    Ok(PretrainReport {
        initial_val_rec,
        epochs,
        best_epoch,
        best_val_rec,
    })
}

/// Fisher-Yates shuffle driven by the run's generator.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    use rand::Rng as _;
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Fresh autoencoder initialized from the run seed.
pub fn init_autoencoder(spec: AeSpec, seed: u64) -> Result<AutoEncoder> {
    AutoEncoder::new(spec, &mut rng_for(seed, stream::AE_INIT))
}
