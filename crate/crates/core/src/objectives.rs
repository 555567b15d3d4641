//! Training objectives and evaluation metrics.
//!
//! Every loss takes batched tensors whose axis 0 is the sample axis; the
//! remaining axes of one sample are flattened where a loss needs a vector
//! (e.g. the whole `D×T` latent block for cosine similarity).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norm floor used by the cosine similarity.
pub const NORM_EPS: f64 = 1e-12;

/// Value of a loss and its gradient w.r.t. the prediction.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor,
}

/// Loss over a (prediction, target) pair with gradients for both sides. The
/// target side matters when the encoder that produced it is trainable.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub value: f64,
    pub grad_pred: Tensor,
    pub grad_target: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignKind {
    /// Negative cosine similarity of positive pairs only.
    #[default]
    Cosine,
    /// Contrastive estimator with in-batch negatives.
    Infonce,
}

/// Normalization of the latent prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredNorm {
    /// Batch mean of each sample's squared Frobenius distance.
    #[default]
    SampleSum,
    /// Mean over every element.
    ElementMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the latent prediction loss.
    pub alpha: f64,
    /// Weight of the alignment loss.
    pub beta: f64,
    /// Weight of the observation-space loss on decoded forecasts.
    pub perc: f64,
    pub align_kind: AlignKind,
    /// InfoNCE temperature.
    pub temperature: f64,
    pub pred_norm: PredNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 15.0,
            perc: 0.0,
            align_kind: AlignKind::Cosine,
            temperature: 0.1,
            pred_norm: PredNorm::SampleSum,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.beta, self.perc];
        if ws.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got alpha={}, beta={}, perc={}",
                self.alpha, self.beta, self.perc
            )));
        }
        if ws.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "InfoNCE temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn batch_of(t: &Tensor) -> usize {
    t.shape()[0]
}

/// Mean absolute reconstruction error over every element.
pub fn loss_rec(x: &Tensor, x_hat: &Tensor) -> Result<LossOutput> {
    x.same_shape(x_hat, "loss_rec")?;
    let n = x.len() as f64;
    let value = x
        .data()
        .iter()
        .zip(x_hat.data())
        .fold(0.0, |acc, (a, b)| acc + (b - a).abs())
        / n;
    let grad = x_hat.zip_map(x, |p, t| {
        let d = p - t;
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })?;
    Ok(LossOutput { value, grad })
}

/// Squared Frobenius distance between predicted and target latent blocks.
pub fn loss_pred(z_y: &Tensor, z_hat: &Tensor, norm: PredNorm) -> Result<PairLoss> {
    z_y.same_shape(z_hat, "loss_pred")?;
    let denom = match norm {
        PredNorm::SampleSum => batch_of(z_y) as f64,
        PredNorm::ElementMean => z_y.len() as f64,
    };
    let diff = z_hat.sub(z_y)?;
    let value = diff.sum_sq() / denom;
    let grad_pred = diff.scale(2.0 / denom);
    let grad_target = grad_pred.scale(-1.0);
    Ok(PairLoss {
        value,
        grad_pred,
        grad_target,
    })
}

/// Cosine similarity of two flat vectors plus its partial derivatives.
struct Cosine {
    value: f64,
    d_a: Vec<f64>,
    d_b: Vec<f64>,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<Cosine> {
    let dot = a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y);
    let na_raw = a.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    let nb_raw = b.iter().fold(0.0, |acc, x| acc + x * x).sqrt();
    if na_raw <= NORM_EPS && nb_raw <= NORM_EPS {
        return None;
    }
    let na = na_raw.max(NORM_EPS);
    let nb = nb_raw.max(NORM_EPS);
    let value = dot / (na * nb);
    // A norm held at the floor is a constant, so its derivative term drops.
    let ka = if na_raw > NORM_EPS { value / (na * na) } else { 0.0 };
    let kb = if nb_raw > NORM_EPS { value / (nb * nb) } else { 0.0 };
    let inv = 1.0 / (na * nb);
    let d_a = a.iter().zip(b).map(|(x, y)| y * inv - ka * x).collect();
    let d_b = a.iter().zip(b).map(|(x, y)| x * inv - kb * y).collect();
    Some(Cosine { value, d_a, d_b })
}

/// `1 - cos(Z, Ẑ)` per sample, averaged over the batch. Lies in `[0, 2]`.
///
/// A sample where both blocks are zero contributes 1 with zero gradient.
pub fn loss_align(z_y: &Tensor, z_hat: &Tensor) -> Result<PairLoss> {
    z_y.same_shape(z_hat, "loss_align")?;
    let b = batch_of(z_y);
    let m = z_y.len() / b;
    let mut grad_pred = Tensor::zeros(z_hat.shape());
    let mut grad_target = Tensor::zeros(z_y.shape());
    let mut total = 0.0;
    for i in 0..b {
        let span = i * m..(i + 1) * m;
        match cosine(&z_hat.data()[span.clone()], &z_y.data()[span.clone()]) {
            Some(c) => {
                total += 1.0 - c.value;
                for (g, d) in grad_pred.data_mut()[span.clone()].iter_mut().zip(&c.d_a) {
                    *g = -d / b as f64;
                }
                for (g, d) in grad_target.data_mut()[span].iter_mut().zip(&c.d_b) {
                    *g = -d / b as f64;
                }
            }
            None => {
                log::warn!("alignment loss: sample {i} has zero prediction and target");
                total += 1.0;
            }
        }
    }
    Ok(PairLoss {
        value: total / b as f64,
        grad_pred,
        grad_target,
    })
}

/// InfoNCE over a square score matrix `scores[i][j] = s(pred_i, target_j)`.
/// Returns the loss and its gradient w.r.t. the scores.
pub fn info_nce_from_scores(scores: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if scores.rank() != 2 || scores.shape()[0] != scores.shape()[1] {
        return Err(Error::shape(
            "info_nce",
            &[scores.outer(), scores.outer()],
            scores.shape(),
        ));
    }
    let b = scores.shape()[0];
    if b < 2 {
        return Err(Error::Config(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    let mut grad = Tensor::zeros(&[b, b]);
    let mut total = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = scores.row(i).iter().map(|s| s / temperature).collect();
        let k = (0..b).fold(0, |k, j| if logits[j] > logits[k] { j } else { k });
        let max = logits[k];
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        // log-sum-exp as max + ln(1 + rest), exact for a dominant logit
        let rest = (0..b).filter(|&j| j != k).fold(0.0, |a, j| a + exps[j]);
        let z = 1.0 + rest;
        total += (max - logits[i]) + rest.ln_1p();
        let row = &mut grad.data_mut()[i * b..(i + 1) * b];
        for j in 0..b {
            let p = exps[j] / z;
            let target = if i == j { 1.0 } else { 0.0 };
            row[j] = (p - target) / (b as f64 * temperature);
        }
    }
    Ok((total / b as f64, grad))
}

/// Contrastive alignment with in-batch negatives.
pub fn loss_align_nce(z_hat: &Tensor, z_y: &Tensor, temperature: f64) -> Result<PairLoss> {
    z_y.same_shape(z_hat, "loss_align_nce")?;
    let b = batch_of(z_y);
    if b < 2 {
        return Err(Error::Config(format!("InfoNCE needs a batch of at least 2, got {b}")));
    }
    let m = z_y.len() / b;
    let sample = |t: &Tensor, i: usize| -> Vec<f64> { t.data()[i * m..(i + 1) * m].to_vec() };
    let mut scores = Tensor::zeros(&[b, b]);
    let mut partials = Vec::with_capacity(b * b);
    for i in 0..b {
        let p = sample(z_hat, i);
        for j in 0..b {
            let c = cosine(&p, &sample(z_y, j));
            scores.data_mut()[i * b + j] = c.as_ref().map_or(0.0, |c| c.value);
            partials.push(c);
        }
    }
    let (value, g_scores) = info_nce_from_scores(&scores, temperature)?;
    let mut grad_pred = Tensor::zeros(z_hat.shape());
    let mut grad_target = Tensor::zeros(z_y.shape());
    for i in 0..b {
        for j in 0..b {
            let Some(c) = &partials[i * b + j] else { continue };
            let g = g_scores.data()[i * b + j];
            for (dst, d) in grad_pred.data_mut()[i * m..(i + 1) * m].iter_mut().zip(&c.d_a) {
                *dst += g * d;
            }
            for (dst, d) in grad_target.data_mut()[j * m..(j + 1) * m].iter_mut().zip(&c.d_b) {
                *dst += g * d;
            }
        }
    }
    Ok(PairLoss {
        value,
        grad_pred,
        grad_target,
    })
}

/// Mutual-information lower bound `log|B| - L_NCE`.
pub fn nce_mi_bound(batch: usize, loss: f64) -> f64 {
    (batch as f64).ln() - loss
}

/// Mean squared error on decoded forecasts, with gradient w.r.t. `y_hat`.
pub fn loss_perceptual(y: &Tensor, y_hat: &Tensor) -> Result<LossOutput> {
    y.same_shape(y_hat, "loss_perceptual")?;
    let n = y.len() as f64;
    let diff = y_hat.sub(y)?;
    Ok(LossOutput {
        value: diff.sum_sq() / n,
        grad: diff.scale(2.0 / n),
    })
}

/// Weighted objective and its gradients.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub pred: f64,
    pub align: f64,
    pub perc: Option<f64>,
    pub grad_z_hat: Tensor,
    pub grad_z_y: Tensor,
    pub grad_y_hat: Option<Tensor>,
}

/// `alpha·L_pred + beta·L_align + perc·L_perc`.
///
/// `observed` carries `(y, y_hat)` and is required when `perc > 0`.
pub fn loss_total(
    weights: &LossWeights,
    z_y: &Tensor,
    z_hat: &Tensor,
    observed: Option<(&Tensor, &Tensor)>,
) -> Result<TotalLoss> {
    if weights.perc > 0.0 && observed.is_none() {
        return Err(Error::Config(
            "perceptual weight is positive but no decoded forecasts were supplied".into(),
        ));
    }
    let pred = loss_pred(z_y, z_hat, weights.pred_norm)?;
    let align = match weights.align_kind {
        AlignKind::Cosine => loss_align(z_y, z_hat)?,
        AlignKind::Infonce => loss_align_nce(z_hat, z_y, weights.temperature)?,
    };
    let mut grad_z_hat = pred.grad_pred.scale(weights.alpha);
    grad_z_hat.axpy(weights.beta, &align.grad_pred)?;
    let mut grad_z_y = pred.grad_target.scale(weights.alpha);
    grad_z_y.axpy(weights.beta, &align.grad_target)?;
    let mut value = weights.alpha * pred.value + weights.beta * align.value;

    let (perc, grad_y_hat) = match observed {
        Some((y, y_hat)) => {
            let p = loss_perceptual(y, y_hat)?;
            value += weights.perc * p.value;
            (Some(p.value), Some(p.grad.scale(weights.perc)))
        }
        None => (None, None),
    };
    Ok(TotalLoss {
        value,
        pred: pred.value,
        align: align.value,
        perc,
        grad_z_hat,
        grad_z_y,
        grad_y_hat,
    })
}

pub fn metric_mse(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    y.same_shape(y_hat, "metric_mse")?;
    Ok(y.data()
        .iter()
        .zip(y_hat.data())
        .fold(0.0, |acc, (a, b)| acc + (b - a) * (b - a))
        / y.len() as f64)
}

pub fn metric_mae(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    y.same_shape(y_hat, "metric_mae")?;
    Ok(y.data()
        .iter()
        .zip(y_hat.data())
        .fold(0.0, |acc, (a, b)| acc + (b - a).abs())
        / y.len() as f64)
}
