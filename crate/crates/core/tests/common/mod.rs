//! Shared test oracles: central finite differences over every loss and
//! layer backward pass, plus small fixtures.
#![allow(dead_code)]

use latent_tsf::autoencoder::{init_autoencoder, AeSpec};
use latent_tsf::backbones::{build_backbone, Backbone, BackboneSpec};
use latent_tsf::layers::{Activation, LinearLayer, Mlp};
use latent_tsf::objectives::{
    loss_align, loss_align_nce, loss_perceptual, loss_pred, loss_rec, loss_total, AlignKind, LossWeights, PredNorm,
};
use latent_tsf::rng::{rng_for, Rng};
use latent_tsf::Tensor;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-6;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.sub(numeric).unwrap().norm();
    let scale = analytic.norm() + numeric.norm();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest relative error per checked gradient over `trials` randomized
/// trials.
pub struct GradReport {
    pub results: Vec<(&'static str, f64)>,
}

impl GradReport {
    fn record(&mut self, name: &'static str, err: f64) {
        match self.results.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(err),
            None => self.results.push((name, err)),
        }
    }

    pub fn worst(&self) -> (&'static str, f64) {
        self.results
            .iter()
            .cloned()
            .fold(("none", 0.0), |a, b| if b.1 > a.1 || b.1.is_nan() { b } else { a })
    }
}

/// Sum of `out ⊙ r`, a random linear read-out of a layer output.
fn readout(out: &Tensor, r: &Tensor) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn check_loss_grads(rep: &mut GradReport, rng: &mut Rng) {
    let b = rng.gen_range(2..5);
    let d = rng.gen_range(2..5);
    let t = rng.gen_range(1..4);
    let shape = [b, d, t];
    let z = random_tensor(rng, &shape, 1.0);
    let zh = random_tensor(rng, &shape, 1.0);

    let g = loss_rec(&z, &zh).unwrap().grad;
    rep.record(
        "loss_rec",
        rel_err(&g, &fd_grad(&zh, |p| loss_rec(&z, p).unwrap().value)),
    );

    for (name_p, name_t, norm) in [
        (
            "loss_pred/sample_sum pred",
            "loss_pred/sample_sum target",
            PredNorm::SampleSum,
        ),
        (
            "loss_pred/element_mean pred",
            "loss_pred/element_mean target",
            PredNorm::ElementMean,
        ),
    ] {
        let out = loss_pred(&z, &zh, norm).unwrap();
        rep.record(
            name_p,
            rel_err(&out.grad_pred, &fd_grad(&zh, |p| loss_pred(&z, p, norm).unwrap().value)),
        );
        rep.record(
            name_t,
            rel_err(
                &out.grad_target,
                &fd_grad(&z, |p| loss_pred(p, &zh, norm).unwrap().value),
            ),
        );
    }

    let out = loss_align(&z, &zh).unwrap();
    rep.record(
        "loss_align pred",
        rel_err(&out.grad_pred, &fd_grad(&zh, |p| loss_align(&z, p).unwrap().value)),
    );
    rep.record(
        "loss_align target",
        rel_err(&out.grad_target, &fd_grad(&z, |p| loss_align(p, &zh).unwrap().value)),
    );

    let tau = rng.gen_range(0.1..1.0);
    let out = loss_align_nce(&zh, &z, tau).unwrap();
    rep.record(
        "loss_align_nce pred",
        rel_err(
            &out.grad_pred,
            &fd_grad(&zh, |p| loss_align_nce(p, &z, tau).unwrap().value),
        ),
    );
    rep.record(
        "loss_align_nce target",
        rel_err(
            &out.grad_target,
            &fd_grad(&z, |p| loss_align_nce(&zh, p, tau).unwrap().value),
        ),
    );

    let y = random_tensor(rng, &shape, 1.0);
    let yh = random_tensor(rng, &shape, 1.0);
    let g = loss_perceptual(&y, &yh).unwrap().grad;
    rep.record(
        "loss_perc",
        rel_err(&g, &fd_grad(&yh, |p| loss_perceptual(&y, p).unwrap().value)),
    );

    let w = LossWeights {
        alpha: rng.gen_range(0.1..10.0),
        beta: rng.gen_range(0.1..10.0),
        perc: rng.gen_range(0.1..2.0),
        align_kind: if rng.gen_bool(0.5) {
            AlignKind::Cosine
        } else {
            AlignKind::Infonce
        },
        ..LossWeights::default()
    };
    let out = loss_total(&w, &z, &zh, Some((&y, &yh))).unwrap();
    let total = |z: &Tensor, zh: &Tensor, yh: &Tensor| loss_total(&w, z, zh, Some((&y, yh))).unwrap().value;
    rep.record(
        "loss_total z_hat",
        rel_err(&out.grad_z_hat, &fd_grad(&zh, |p| total(&z, p, &yh))),
    );
    rep.record(
        "loss_total z_y",
        rel_err(&out.grad_z_y, &fd_grad(&z, |p| total(p, &zh, &yh))),
    );
    rep.record(
        "loss_total y_hat",
        rel_err(out.grad_y_hat.as_ref().unwrap(), &fd_grad(&yh, |p| total(&z, &zh, p))),
    );
}

fn check_linear(rep: &mut GradReport, rng: &mut Rng) {
    let (din, dout) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let mut layer = LinearLayer::new(din, dout, rng);
    let rows = rng.gen_range(1..4);
    let x = random_tensor(rng, &[rows, 2, din], 1.0);
    let r = random_tensor(rng, &[x.shape()[0], 2, dout], 1.0);
    layer.zero_grads();
    let dx = layer.backward(&x, &r).unwrap();
    rep.record(
        "linear input",
        rel_err(&dx, &fd_grad(&x, |p| readout(&layer.forward(p).unwrap(), &r))),
    );
    let probe = layer.clone();
    let gw = fd_grad(&layer.weight, |w| {
        let l = LinearLayer::from_parts(w.clone(), probe.bias.clone()).unwrap();
        readout(&l.forward(&x).unwrap(), &r)
    });
    rep.record("linear weight", rel_err(&layer.weight_grad, &gw));
    let gb = fd_grad(&layer.bias, |b| {
        let l = LinearLayer::from_parts(probe.weight.clone(), b.clone()).unwrap();
        readout(&l.forward(&x).unwrap(), &r)
    });
    rep.record("linear bias", rel_err(&layer.bias_grad, &gb));
}

fn check_activations(rep: &mut GradReport, rng: &mut Rng) {
    let x = random_tensor(rng, &[3, 4], 3.0);
    let r = random_tensor(rng, &[3, 4], 1.0);
    for (name, act) in [("relu", Activation::Relu), ("gelu", Activation::Gelu)] {
        let g = act.backward(&x, &r).unwrap();
        rep.record(name, rel_err(&g, &fd_grad(&x, |p| readout(&act.forward(p), &r))));
    }
}

/// Parameter-gradient check through the tensors an accessor exposes.
fn check_params<M: Clone>(
    rep: &mut GradReport,
    name: &'static str,
    model: &M,
    analytic: Vec<Tensor>,
    tensors_mut: impl Fn(&mut M) -> Vec<&mut Tensor>,
    objective: impl Fn(&M) -> f64,
) {
    let mut probe = model.clone();
    let count = analytic.len();
    for (k, a) in analytic.iter().enumerate().take(count) {
        let base = tensors_mut(&mut probe)[k].clone();
        let numeric = fd_grad(&base, |p| {
            *tensors_mut(&mut probe)[k] = p.clone();
            let v = objective(&probe);
            *tensors_mut(&mut probe)[k] = base.clone();
            v
        });
        rep.record(name, rel_err(a, &numeric));
    }
}

fn check_mlp(rep: &mut GradReport, rng: &mut Rng) {
    let act = if rng.gen_bool(0.5) {
        Activation::Gelu
    } else {
        Activation::Relu
    };
    let dims = [
        rng.gen_range(1..5),
        rng.gen_range(2..6),
        rng.gen_range(2..6),
        rng.gen_range(1..4),
    ];
    let mut mlp = Mlp::new(&dims, act, 0.3, rng);
    let x = random_tensor(rng, &[3, dims[0]], 1.5);
    let r = random_tensor(rng, &[3, dims[3]], 1.0);
    let mask_seed = rng.gen::<u64>();
    // fixed dropout mask: every evaluation redraws it from the same seed
    let eval = |m: &Mlp, x: &Tensor| readout(&m.forward_train(x, Some(&mut rng_for(mask_seed, 0))).unwrap().0, &r);
    let (_, cache) = mlp.forward_train(&x, Some(&mut rng_for(mask_seed, 0))).unwrap();
    mlp.zero_grads();
    let dx = mlp.backward(&cache, &r, true).unwrap();
    rep.record("mlp input", rel_err(&dx, &fd_grad(&x, |p| eval(&mlp, p))));
    let analytic: Vec<Tensor> = mlp
        .layers
        .iter()
        .flat_map(|l| [l.weight_grad.clone(), l.bias_grad.clone()])
        .collect();
    check_params(
        rep,
        "mlp params",
        &mlp,
        analytic,
        |m| m.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect(),
        |m| eval(m, &x),
    );
}

fn check_backbone(
    rep: &mut GradReport,
    rng: &mut Rng,
    spec: BackboneSpec,
    input_name: &'static str,
    param_name: &'static str,
) {
    let mut bb = build_backbone(spec, rng).unwrap();
    let x = random_tensor(rng, &[2, spec.channels, spec.lookback], 1.0);
    let r = random_tensor(rng, &[2, spec.channels, spec.horizon], 1.0);
    bb.zero_grads();
    bb.forward_train(&x, None).unwrap();
    let dx = bb.backward(&r).unwrap();
    rep.record(
        input_name,
        rel_err(&dx, &fd_grad(&x, |p| readout(&bb.forward(p).unwrap(), &r))),
    );
    let analytic: Vec<Tensor> = bb.params().into_iter().map(|p| p.grad.clone()).collect();
    check_params(
        rep,
        param_name,
        &bb,
        analytic,
        |b: &mut Box<dyn Backbone>| b.named_tensors_mut().into_iter().map(|(_, t)| t).collect(),
        |b| readout(&b.forward(&x).unwrap(), &r),
    );
}

fn check_autoencoder(rep: &mut GradReport, rng: &mut Rng) {
    let c = rng.gen_range(1..4);
    let spec = AeSpec {
        dropout: 0.0,
        ..AeSpec::new(c, c + rng.gen_range(1..4))
    };
    let mut ae = init_autoencoder(spec, rng.gen()).unwrap();
    let x = random_tensor(rng, &[5, c], 1.5);
    let trace = ae.forward_train(&x, None).unwrap();
    let loss = loss_rec(&x, &trace.reconstruction).unwrap();
    ae.zero_grads();
    ae.backward(&trace, &loss.grad).unwrap();
    let analytic: Vec<Tensor> = ae
        .encoder
        .layers
        .iter()
        .chain(&ae.decoder.layers)
        .flat_map(|l| [l.weight_grad.clone(), l.bias_grad.clone()])
        .collect();
    check_params(
        rep,
        "autoencoder params",
        &ae,
        analytic,
        |a| {
            a.encoder
                .layers
                .iter_mut()
                .chain(a.decoder.layers.iter_mut())
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect()
        },
        |a| loss_rec(&x, &a.reconstruct_points(&x).unwrap()).unwrap().value,
    );
}

/// Runs every finite-difference check `trials` times with fresh random
/// shapes and values.
pub fn gradient_suite(trials: usize, seed: u64) -> GradReport {
    let mut rep = GradReport { results: Vec::new() };
    let mut rng = rng_for(seed, 0);
    for _ in 0..trials {
        check_loss_grads(&mut rep, &mut rng);
        check_linear(&mut rep, &mut rng);
        check_activations(&mut rep, &mut rng);
        check_mlp(&mut rep, &mut rng);
        let (l, t, ch) = (rng.gen_range(5..12), rng.gen_range(1..5), rng.gen_range(1..4));
        let mut dl = BackboneSpec::dlinear(l, t, ch);
        dl.kernel = [1, 3, 5][rng.gen_range(0..3)];
        check_backbone(&mut rep, &mut rng, dl, "dlinear input", "dlinear params");
        let mut mlp = BackboneSpec::mlp(l, t, ch, rng.gen_range(2..6));
        mlp.dropout = 0.0;
        check_backbone(&mut rep, &mut rng, mlp, "temporal mlp input", "temporal mlp params");
        check_autoencoder(&mut rep, &mut rng);
    }
    rep
}
