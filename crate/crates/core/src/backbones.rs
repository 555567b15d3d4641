//! Forecasting backbones mapping a `B×Ch×L` history to a `B×Ch×T` forecast.
//!
//! Both shipped backbones are channel independent: the same temporal maps
//! are applied to every channel (latent dimension in latent mode, observed
//! channel in the baseline). New backbones plug in through [`Backbone`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, LinearLayer, Mlp, MlpCache, ParamRef};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Dlinear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub lookback: usize,
    pub horizon: usize,
    /// Channels the backbone sees: `D` in latent mode, `C` for the baseline.
    pub channels: usize,
    /// Moving-average kernel of the trend/seasonal split (odd).
    pub kernel: usize,
    /// Hidden width of the MLP backbone.
    pub d_ff: usize,
    /// Hidden layers of the MLP backbone.
    pub hidden_layers: usize,
    pub dropout: f64,
}

impl BackboneSpec {
    pub fn dlinear(lookback: usize, horizon: usize, channels: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Dlinear,
            lookback,
            horizon,
            channels,
            kernel: 25,
            d_ff: 64,
            hidden_layers: 1,
            dropout: 0.1,
        }
    }

    pub fn mlp(lookback: usize, horizon: usize, channels: usize, d_ff: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Mlp,
            d_ff,
            ..Self::dlinear(lookback, horizon, channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::Config(
                "backbone lookback, horizon and channels must be positive".into(),
            ));
        }
        match self.kind {
            BackboneKind::Dlinear => check_kernel(self.kernel, self.lookback),
            BackboneKind::Mlp => {
                if self.d_ff == 0 || self.hidden_layers == 0 {
                    return Err(Error::Config(
                        "MLP backbone needs d_ff > 0 and at least one hidden layer".into(),
                    ));
                }
                if !(0.0..1.0).contains(&self.dropout) {
                    return Err(Error::Config(format!(
                        "dropout must be in [0, 1), got {}",
                        self.dropout
                    )));
                }
                Ok(())
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 3 || x.shape()[1] != self.channels || x.shape()[2] != self.lookback {
            return Err(Error::shape(
                "forecast_latent",
                &[x.shape().first().copied().unwrap_or(1), self.channels, self.lookback],
                x.shape(),
            ));
        }
        Ok(())
    }
}

fn check_kernel(kernel: usize, len: usize) -> Result<()> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "moving-average kernel must be odd and >= 1, got {kernel}"
        )));
    }
    if kernel > len {
        return Err(Error::Config(format!(
            "moving-average kernel {kernel} exceeds series length {len}"
        )));
    }
    Ok(())
}

/// A forecasting function over channel-major histories.
pub trait Backbone: Send {
    fn spec(&self) -> &BackboneSpec;

    /// Evaluation-mode forecast (dropout off, nothing cached).
    fn forward(&self, x: &Tensor) -> Result<Tensor>;

    /// Training-mode forecast; caches what [`backward`](Self::backward)
    /// needs. Dropout is drawn from `rng` when given.
    fn forward_train(&mut self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor>;

    /// Accumulates parameter gradients for the cached forward pass and
    /// returns the gradient w.r.t. its input.
    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor>;

    /// Like [`backward`](Self::backward) but skips the input gradient, for
    /// inputs that are not trainable.
    fn backward_params(&mut self, upstream: &Tensor) -> Result<()> {
        self.backward(upstream).map(|_| ())
    }

    /// Representation consumed by the final output map, `B×Ch×H`.
    fn hidden(&self, x: &Tensor) -> Result<Tensor>;

    fn zero_grads(&mut self);

    fn params(&mut self) -> Vec<ParamRef<'_>>;

    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn clone_box(&self) -> Box<dyn Backbone>;
}

impl Clone for Box<dyn Backbone> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Builds a backbone with `±1/sqrt(fan_in)` uniform weights.
pub fn build_backbone(spec: BackboneSpec, rng: &mut Rng) -> Result<Box<dyn Backbone>> {
    spec.validate()?;
    Ok(match spec.kind {
        BackboneKind::Dlinear => Box::new(DLinear::new(spec, rng)),
        BackboneKind::Mlp => Box::new(TemporalMlp::new(spec, rng)),
    })
}

/// Centered moving average along the last axis with replicate padding,
/// and the remainder `series - trend`.
pub fn dlinear_decompose(series: &Tensor, kernel: usize) -> Result<(Tensor, Tensor)> {
    check_kernel(kernel, series.inner())?;
    let trend = moving_average(series, kernel);
    let seasonal = series.sub(&trend)?;
    Ok((trend, seasonal))
}

fn moving_average(series: &Tensor, kernel: usize) -> Tensor {
    let len = series.inner();
    let half = (kernel - 1) / 2;
    let inv = 1.0 / kernel as f64;
    let mut out = Tensor::zeros(series.shape());
    let src = series.data();
    let dst = out.data_mut();
    for r in 0..series.outer() {
        let row = &src[r * len..(r + 1) * len];
        let at = |i: isize| row[i.clamp(0, len as isize - 1) as usize];
        let mut sum = 0.0;
        for j in -(half as isize)..=(half as isize) {
            sum += at(j);
        }
        let out_row = &mut dst[r * len..(r + 1) * len];
        out_row[0] = sum * inv;
        for i in 1..len as isize {
            sum += at(i + half as isize) - at(i - 1 - half as isize);
            out_row[i as usize] = sum * inv;
        }
    }
    out
}

/// Adjoint of [`moving_average`].
fn moving_average_backward(upstream: &Tensor, kernel: usize) -> Tensor {
    let len = upstream.inner();
    let half = (kernel - 1) as isize / 2;
    let inv = 1.0 / kernel as f64;
    let mut out = Tensor::zeros(upstream.shape());
    let src = upstream.data();
    let dst = out.data_mut();
    for r in 0..upstream.outer() {
        let g = &src[r * len..(r + 1) * len];
        let d = &mut dst[r * len..(r + 1) * len];
        for (i, &gi) in g.iter().enumerate() {
            let gi = gi * inv;
            for j in -half..=half {
                let k = (i as isize + j).clamp(0, len as isize - 1) as usize;
                d[k] += gi;
            }
        }
    }
    out
}

/// Trend/remainder decomposition followed by one linear map per component.
#[derive(Debug, Clone)]
pub struct DLinear {
    spec: BackboneSpec,
    pub seasonal: LinearLayer,
    pub trend: LinearLayer,
    cache: Option<(Tensor, Tensor)>,
}

impl DLinear {
    pub fn new(spec: BackboneSpec, rng: &mut Rng) -> Self {
        DLinear {
            seasonal: LinearLayer::new(spec.lookback, spec.horizon, rng),
            trend: LinearLayer::new(spec.lookback, spec.horizon, rng),
            spec,
            cache: None,
        }
    }

    fn decompose(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.spec.check_input(x)?;
        dlinear_decompose(x, self.spec.kernel)
    }
}

impl Backbone for DLinear {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (trend, seasonal) = self.decompose(x)?;
        self.seasonal.forward(&seasonal)?.add(&self.trend.forward(&trend)?)
    }

    fn forward_train(&mut self, x: &Tensor, _rng: Option<&mut Rng>) -> Result<Tensor> {
        let (trend, seasonal) = self.decompose(x)?;
        let out = self.seasonal.forward(&seasonal)?.add(&self.trend.forward(&trend)?)?;
        self.cache = Some((trend, seasonal));
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let (trend, seasonal) = self
            .cache
            .take()
            .ok_or_else(|| Error::Internal("DLinear backward without a cached forward".into()))?;
        self.seasonal.accumulate(&seasonal, upstream)?;
        self.trend.accumulate(&trend, upstream)?;
        let d_seasonal = self.seasonal.backward_input(upstream)?;
        let d_trend = self.trend.backward_input(upstream)?;
        // seasonal = x - MA(x), trend = MA(x)
        let through_ma = moving_average_backward(&d_trend.sub(&d_seasonal)?, self.spec.kernel);
        d_seasonal.add(&through_ma)
    }

    fn backward_params(&mut self, upstream: &Tensor) -> Result<()> {
        let (trend, seasonal) = self
            .cache
            .take()
            .ok_or_else(|| Error::Internal("DLinear backward without a cached forward".into()))?;
        self.seasonal.accumulate(&seasonal, upstream)?;
        self.trend.accumulate(&trend, upstream)
    }

    fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        let (trend, seasonal) = self.decompose(x)?;
        let (b, ch, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Vec::with_capacity(2 * x.len());
        for r in 0..b * ch {
            out.extend_from_slice(seasonal.row(r));
            out.extend_from_slice(trend.row(r));
        }
        Tensor::new(&[b, ch, 2 * l], out)
    }

    fn zero_grads(&mut self) {
        self.seasonal.zero_grads();
        self.trend.zero_grads();
    }

    fn params(&mut self) -> Vec<ParamRef<'_>> {
        let mut p = self.seasonal.params("backbone.seasonal");
        p.extend(self.trend.params("backbone.trend"));
        p
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("backbone.seasonal.weight".into(), &self.seasonal.weight),
            ("backbone.seasonal.bias".into(), &self.seasonal.bias),
            ("backbone.trend.weight".into(), &self.trend.weight),
            ("backbone.trend.bias".into(), &self.trend.bias),
        ]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("backbone.seasonal.weight".into(), &mut self.seasonal.weight),
            ("backbone.seasonal.bias".into(), &mut self.seasonal.bias),
            ("backbone.trend.weight".into(), &mut self.trend.weight),
            ("backbone.trend.bias".into(), &mut self.trend.bias),
        ]
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(DLinear {
            spec: self.spec,
            seasonal: self.seasonal.clone(),
            trend: self.trend.clone(),
            cache: None,
        })
    }
}

/// Per-channel temporal MLP `L -> d_ff -> ... -> T`.
#[derive(Debug, Clone)]
pub struct TemporalMlp {
    spec: BackboneSpec,
    pub net: Mlp,
    cache: Option<MlpCache>,
}

impl TemporalMlp {
    pub fn new(spec: BackboneSpec, rng: &mut Rng) -> Self {
        let mut dims = vec![spec.lookback];
        dims.extend(std::iter::repeat_n(spec.d_ff, spec.hidden_layers));
        dims.push(spec.horizon);
        TemporalMlp {
            net: Mlp::new(&dims, Activation::Gelu, spec.dropout, rng),
            spec,
            cache: None,
        }
    }
}

impl Backbone for TemporalMlp {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.spec.check_input(x)?;
        self.net.forward(x)
    }

    fn forward_train(&mut self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.spec.check_input(x)?;
        let (out, cache) = self.net.forward_train(x, rng)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Internal("MLP backward without a cached forward".into()))?;
        self.net.backward(&cache, upstream, true)
    }

    fn backward_params(&mut self, upstream: &Tensor) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Internal("MLP backward without a cached forward".into()))?;
        self.net.backward_params(&cache, upstream)
    }

    fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        self.spec.check_input(x)?;
        let (_, cache) = self.net.forward_train(x, None)?;
        Ok(cache.last_hidden().clone())
    }

    fn zero_grads(&mut self) {
        self.net.zero_grads();
    }

    fn params(&mut self) -> Vec<ParamRef<'_>> {
        self.net.params("backbone.mlp")
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.net.named_tensors("backbone.mlp")
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.net
            .layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("backbone.mlp.{i}.weight"), &mut l.weight),
                    (format!("backbone.mlp.{i}.bias"), &mut l.bias),
                ]
            })
            .collect()
    }

    fn clone_box(&self) -> Box<dyn Backbone> {
        Box::new(TemporalMlp {
            spec: self.spec,
            net: self.net.clone(),
            cache: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn zero_params(b: &mut dyn Backbone) {
        for (_, t) in b.named_tensors_mut() {
            t.fill(0.0);
        }
    }

    #[test]
    fn output_shape_contract() {
        let mut rng = rng_for(0, 0);
        for spec in [BackboneSpec::dlinear(720, 96, 32), BackboneSpec::mlp(720, 96, 32, 64)] {
            let b = build_backbone(spec, &mut rng).unwrap();
            let y = b.forward(&Tensor::zeros(&[4, 32, 720])).unwrap();
            assert_eq!(y.shape(), &[4, 32, 96]);
            assert!(b.forward(&Tensor::zeros(&[4, 31, 720])).is_err());
            assert!(b.forward(&Tensor::zeros(&[4, 32, 719])).is_err());
        }
    }

    #[test]
    fn zero_weights_forecast_zero() {
        let mut rng = rng_for(0, 0);
        let mut dlinear = BackboneSpec::dlinear(8, 4, 3);
        dlinear.kernel = 5;
        for spec in [dlinear, BackboneSpec::mlp(8, 4, 3, 5)] {
            let mut b = build_backbone(spec, &mut rng).unwrap();
            zero_params(b.as_mut());
            let x = Tensor::new(&[2, 3, 8], (0..48).map(|v| v as f64).collect()).unwrap();
            assert_eq!(b.forward(&x).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn decomposition_hand_values() {
        let x = Tensor::new(&[1, 5], vec![1., 2., 3., 4., 5.]).unwrap();
        let (trend, seasonal) = dlinear_decompose(&x, 3).unwrap();
        let expected = [4. / 3., 2., 3., 4., 14. / 3.];
        for (a, b) in trend.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        for ((t, s), v) in trend.data().iter().zip(seasonal.data()).zip(x.data()) {
            assert!((t + s - v).abs() <= 1e-15);
        }

        let c = Tensor::full(&[2, 30], 5.0);
        let (trend, seasonal) = dlinear_decompose(&c, 25).unwrap();
        assert_eq!(trend, c);
        assert_eq!(seasonal.max_abs(), 0.0);
    }

    #[test]
    fn even_or_oversized_kernel_is_rejected() {
        let x = Tensor::zeros(&[1, 5]);
        assert!(matches!(dlinear_decompose(&x, 4), Err(Error::Config(_))));
        assert!(matches!(dlinear_decompose(&x, 7), Err(Error::Config(_))));
        assert!(dlinear_decompose(&x, 1).is_ok());
    }

    #[test]
    fn moving_average_adjoint_identity() {
        // <MA x, g> == <x, MA^T g>
        let mut rng = rng_for(5, 0);
        use rand::Rng as _;
        let x = Tensor::new(&[3, 11], (0..33).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let g = Tensor::new(&[3, 11], (0..33).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let lhs: f64 = moving_average(&x, 5)
            .data()
            .iter()
            .zip(g.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(moving_average_backward(&g, 5).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn mlp_hand_computed_single_unit() {
        let spec = BackboneSpec {
            hidden_layers: 1,
            ..BackboneSpec::mlp(2, 1, 1, 1)
        };
        let mut b = TemporalMlp::new(spec, &mut rng_for(0, 0));
        b.net.layers[0].weight = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        b.net.layers[0].bias = Tensor::from_vec(vec![0.5]);
        b.net.layers[1].weight = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        b.net.layers[1].bias = Tensor::from_vec(vec![0.25]);
        let x = Tensor::new(&[1, 1, 2], vec![3.0, 1.0]).unwrap();
        // hidden pre-activation 3 - 1 + 0.5 = 2.5
        let expected = 2.0 * Activation::Gelu.apply(2.5) + 0.25;
        assert_eq!(b.forward(&x).unwrap().data(), &[expected]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = rng_for(2, 0);
        let b = build_backbone(BackboneSpec::mlp(16, 4, 3, 8), &mut rng).unwrap();
        let x = Tensor::new(&[2, 3, 16], (0..96).map(|v| (v as f64).sin()).collect()).unwrap();
        assert_eq!(b.forward(&x).unwrap(), b.forward(&x).unwrap());
    }
}
