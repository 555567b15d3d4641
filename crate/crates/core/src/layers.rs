//! Differentiable building blocks with hand-written backward passes.
//!
//! Layers act on the last axis of their input; every leading axis is treated
//! as a batch of independent rows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// A trainable tensor together with its gradient accumulator.
pub struct ParamRef<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub weight_grad: Tensor,
    pub bias_grad: Tensor,
}

impl LinearLayer {
    /// Uniform initialization in `±1/sqrt(in_dim)`.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::from_parts(
            Tensor::new(&[out_dim, in_dim], w).expect("sized"),
            Tensor::new(&[out_dim], b).expect("sized"),
        )
        .expect("consistent shapes")
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(Tensor::zeros(&[out_dim, in_dim]), Tensor::zeros(&[out_dim])).expect("consistent shapes")
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("LinearLayer", weight.shape(), bias.shape()));
        }
        Ok(LinearLayer {
            weight_grad: Tensor::zeros(weight.shape()),
            bias_grad: Tensor::zeros(bias.shape()),
            weight,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.inner() != self.in_dim() {
            return Err(Error::shape("linear", self.weight.shape(), input.shape()));
        }
        Ok(())
    }

    /// `out[r] = W · input[r] + b` for every row `r`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let (rows, din, dout) = (input.outer(), self.in_dim(), self.out_dim());
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(self.bias.data());
        }
        gemm(
            rows,
            din,
            dout,
            1.0,
            input.data(),
            false,
            self.weight.data(),
            true,
            1.0,
            &mut out,
        );
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        Tensor::new(&shape, out)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `input`.
    pub fn backward(&mut self, input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        self.accumulate(input, upstream)?;
        self.backward_input(upstream)
    }

    /// Parameter-gradient half of [`backward`](Self::backward).
    pub fn accumulate(&mut self, input: &Tensor, upstream: &Tensor) -> Result<()> {
        self.check_upstream(input, upstream)?;
        let (rows, din, dout) = (input.outer(), self.in_dim(), self.out_dim());
        gemm(
            dout,
            rows,
            din,
            1.0,
            upstream.data(),
            true,
            input.data(),
            false,
            1.0,
            self.weight_grad.data_mut(),
        );
        let bg = self.bias_grad.data_mut();
        for r in 0..rows {
            for (g, &u) in bg.iter_mut().zip(upstream.row(r)) {
                *g += u;
            }
        }
        Ok(())
    }

    /// Input gradient only; parameter accumulators are left untouched.
    pub fn backward_input(&self, upstream: &Tensor) -> Result<Tensor> {
        if upstream.inner() != self.out_dim() {
            return Err(Error::shape("linear_backward", &[self.out_dim()], upstream.shape()));
        }
        let (rows, din, dout) = (upstream.outer(), self.in_dim(), self.out_dim());
        let mut dx = vec![0.0; rows * din];
        gemm(
            rows,
            dout,
            din,
            1.0,
            upstream.data(),
            false,
            self.weight.data(),
            false,
            0.0,
            &mut dx,
        );
        let mut shape = upstream.shape().to_vec();
        *shape.last_mut().unwrap() = din;
        Tensor::new(&shape, dx)
    }

    fn check_upstream(&self, input: &Tensor, upstream: &Tensor) -> Result<()> {
        self.check_input(input)?;
        let mut expected = input.shape().to_vec();
        *expected.last_mut().unwrap() = self.out_dim();
        upstream.expect_shape("linear_backward", &expected)
    }

    pub fn zero_grads(&mut self) {
        self.weight_grad.fill(0.0);
        self.bias_grad.fill(0.0);
    }

    pub fn params(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        vec![
            ParamRef {
                name: format!("{prefix}.weight"),
                value: &mut self.weight,
                grad: &self.weight_grad,
            },
            ParamRef {
                name: format!("{prefix}.bias"),
                value: &mut self.bias,
                grad: &self.bias_grad,
            },
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => gelu(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => gelu_grad(x),
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        x.map(|v| self.apply(v))
    }

    /// Gradient w.r.t. the pre-activation `x`.
    pub fn backward(self, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        x.zip_map(upstream, |v, g| g * self.derivative(v))
    }
}

/// Inverted dropout: kept units are scaled by `1/(1-p)` at train time.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 - p;
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("sized")
}

/// Stack of linear layers with an activation (and optional dropout) between
/// consecutive layers. No activation follows the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
    pub dropout: f64,
}

/// Values recorded by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    masks: Vec<Option<Tensor>>,
}

impl MlpCache {
    /// Output of the last hidden layer (input of the final linear map).
    pub fn last_hidden(&self) -> &Tensor {
        self.inputs.last().expect("at least one layer")
    }
}

impl Mlp {
    /// Layer widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn new(dims: &[usize], activation: Activation, dropout: f64, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims.windows(2).map(|w| LinearLayer::new(w[0], w[1], rng)).collect();
        Mlp {
            layers,
            activation,
            dropout,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Deterministic forward pass (dropout off).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_train(x, None)?.0)
    }

    /// Forward pass that records what backward needs. Dropout is active only
    /// when `rng` is given and the rate is positive.
    pub fn forward_train(&self, x: &Tensor, mut rng: Option<&mut Rng>) -> Result<(Tensor, MlpCache)> {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre_activations: Vec::with_capacity(n - 1),
            masks: Vec::with_capacity(n - 1),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(&h)?;
            cache.inputs.push(h);
            if i + 1 == n {
                return Ok((out, cache));
            }
            let mut act = self.activation.forward(&out);
            cache.pre_activations.push(out);
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let m = dropout_mask(act.shape(), self.dropout, r);
                    act = act.zip_map(&m, |a, k| a * k)?;
                    Some(m)
                }
                _ => None,
            };
            cache.masks.push(mask);
            h = act;
        }
        unreachable!("loop returns at the last layer")
    }

    /// Backpropagates `upstream` (gradient w.r.t. the output). Parameter
    /// gradients are accumulated only when `accumulate` is set; the input
    /// gradient is always returned.
    pub fn backward(&mut self, cache: &MlpCache, upstream: &Tensor, accumulate: bool) -> Result<Tensor> {
        self.backward_impl(cache, upstream, accumulate, true)
            .map(|g| g.expect("input gradient requested"))
    }

    /// Accumulates parameter gradients without forming the input gradient.
    pub fn backward_params(&mut self, cache: &MlpCache, upstream: &Tensor) -> Result<()> {
        self.backward_impl(cache, upstream, true, false).map(|_| ())
    }

    fn backward_impl(
        &mut self,
        cache: &MlpCache,
        upstream: &Tensor,
        accumulate: bool,
        input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let mut g = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                if let Some(mask) = &cache.masks[i] {
                    g = g.zip_map(mask, |a, k| a * k)?;
                }
                g = self.activation.backward(&cache.pre_activations[i], &g)?;
            }
            let layer = &mut self.layers[i];
            if accumulate {
                layer.accumulate(&cache.inputs[i], &g)?;
            }
            if i == 0 && !input_grad {
                return Ok(None);
            }
            g = layer.backward_input(&g)?;
        }
        Ok(Some(g))
    }

    pub fn zero_grads(&mut self) {
        self.layers.iter_mut().for_each(LinearLayer::zero_grads);
    }

    pub fn params(&mut self, prefix: &str) -> Vec<ParamRef<'_>> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| l.params(&format!("{prefix}.{i}")))
            .collect()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }
}
