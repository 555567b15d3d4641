//! Adam with bias correction and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::layers::ParamRef;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    /// First and second moments, one pair per parameter in registration order.
    moments: Vec<(Tensor, Tensor)>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn first_moment(&self, i: usize) -> Option<&Tensor> {
        self.moments.get(i).map(|(m, _)| m)
    }

    pub fn second_moment(&self, i: usize) -> Option<&Tensor> {
        self.moments.get(i).map(|(_, v)| v)
    }

    /// One Adam update over `params`, reading each parameter's accumulated
    /// gradient multiplied by `grad_scale` (used for clipping).
    ///
    /// The parameter list must be presented in the same order on every call.
    pub fn step(&mut self, params: Vec<ParamRef<'_>>, lr: f64, grad_scale: f64) -> Result<()> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        for p in &params {
            if !p.grad.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Internal(format!(
                "optimizer tracks {} parameters but was given {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            p.value.same_shape(m, "adam_step")?;
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g * grad_scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over the gradients of `params`.
pub fn grad_norm(params: &[ParamRef<'_>]) -> f64 {
    params.iter().fold(0.0, |acc, p| acc + p.grad.sum_sq()).sqrt()
}

/// Multiplier that brings a gradient of norm `norm` down to `max_norm`.
pub fn clip_scale(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(c) if norm > c && norm > 0.0 => c / norm,
        _ => 1.0,
    }
}

/// Cosine annealing from `base_lr` towards zero over `total_epochs`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    debug_assert!(epoch < total_epochs.max(1));
    let total = total_epochs.max(1) as f64;
    base_lr * (1.0 + (PI * epoch as f64 / total).cos()) / 2.0
}
