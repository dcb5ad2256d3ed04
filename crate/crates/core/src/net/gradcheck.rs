//! Central finite-difference checks of every layer's backward pass in `f64`.
//!
//! The scalar probed is `L = Σ y ⊙ R` for a fixed random `R` (the softmax
//! cross-entropy check uses the loss itself). The error reported for a tensor
//! is `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`; a layer's score
//! is the worst over its input and parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    softmax_cross_entropy, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Linear, MaxPool, Mode, Param, Relu, Visit,
};
use super::model::{Block, ResNet};
use super::tensor::Tensor4;
use super::{BlockKind, NetConfig, NetError};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub layer: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

trait Probe {
    fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError>;
    fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError>;
    fn params(&mut self, _f: &mut dyn FnMut(&mut Param<f64>)) {}
}

fn no_dx(layer: &str) -> NetError {
    NetError::Shape {
        layer: layer.into(),
        detail: "input gradient missing".into(),
    }
}

impl Probe for Conv2d<f64> {
    fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError> {
        self.forward(x, mode)
    }
    fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError> {
        self.backward(dy)?.ok_or_else(|| no_dx(&self.name))
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params("", &mut |_, p| f(p));
    }
}

impl Probe for BatchNorm2d<f64> {
    fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError> {
        self.forward(x, mode)
    }
    fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError> {
        self.backward(dy)
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params("", &mut |_, p| f(p));
    }
}

impl Probe for Linear<f64> {
    fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError> {
        self.forward(x, mode)
    }
    fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError> {
        self.backward(dy)
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params("", &mut |_, p| f(p));
    }
}

impl Probe for Block<f64> {
    fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError> {
        self.forward(x, mode)
    }
    fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError> {
        self.backward(dy)
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params("", &mut |_, p| f(p));
    }
}

impl Probe for ResNet<f64> {
    fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError> {
        self.forward(x, mode)
    }
    fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError> {
        self.backward(dy)?.ok_or_else(|| no_dx("conv1"))
    }
    fn params(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.visit_params("", &mut |_, p| f(p));
    }
}

macro_rules! stateless_probe {
    ($t:ty) => {
        impl Probe for $t {
            fn fwd(&mut self, x: Tensor4<f64>, mode: Mode) -> Result<Tensor4<f64>, NetError> {
                Ok(self.forward(x, mode))
            }
            fn bwd(&mut self, dy: Tensor4<f64>) -> Result<Tensor4<f64>, NetError> {
                self.backward(dy)
            }
        }
    };
}

stateless_probe!(Relu);
stateless_probe!(MaxPool);
stateless_probe!(GlobalAvgPool);
stateless_probe!(Dropout);

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn param_values(layer: &mut dyn Probe) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    layer.params(&mut |p| out.push(p.value.data().to_vec()));
    out
}

fn set_param(layer: &mut dyn Probe, pi: usize, e: usize, v: f64) {
    let mut i = 0;
    layer.params(&mut |p| {
        if i == pi {
            p.value.data_mut()[e] = v;
        }
        i += 1;
    });
}

fn check_probe(name: &str, layer: &mut dyn Probe, x: Tensor4<f64>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<GradReport, NetError> {
    let y = layer.fwd(x.clone(), mode)?;
    let r = random_tensor(y.dims(), rng);
    layer.params(&mut |p| p.zero_grad());
    let dx = layer.bwd(r.clone())?;
    let mut analytic = Vec::new();
    layer.params(&mut |p| analytic.push(p.grad.data().to_vec()));

    let probe_mode = Mode { record: false, ..mode };
    let eval = |layer: &mut dyn Probe, x: Tensor4<f64>| -> Result<f64, NetError> {
        Ok(dot(&layer.fwd(x, probe_mode)?, &r))
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        numeric[i] = (eval(layer, xp)? - eval(layer, xm)?) / (2.0 * STEP);
    }
    worst = worst.max(rel_err(dx.data(), &numeric));
    checked += numeric.len();

    let values = param_values(layer);
    for (pi, vals) in values.iter().enumerate() {
        let mut numeric = vec![0.0; vals.len()];
        for (e, &v) in vals.iter().enumerate() {
            set_param(layer, pi, e, v + STEP);
            let lp = eval(layer, x.clone())?;
            set_param(layer, pi, e, v - STEP);
            let lm = eval(layer, x.clone())?;
            set_param(layer, pi, e, v);
            numeric[e] = (lp - lm) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic[pi], &numeric));
        checked += numeric.len();
    }
    Ok(GradReport {
        layer: name.to_string(),
        max_rel_err: worst,
        checked,
    })
}

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> Result<GradReport, NetError> {
    let logits = Tensor4::from_fn([4, 15, 1, 1], |_| rng.gen_range(-3.0..3.0));
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..15)).collect();
    let (_, grad) = softmax_cross_entropy(&logits, &labels)?;
    let mut numeric = vec![0.0; logits.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut p = logits.clone();
        p.data_mut()[i] += STEP;
        let mut m = logits.clone();
        m.data_mut()[i] -= STEP;
        *n = (softmax_cross_entropy(&p, &labels)?.0 - softmax_cross_entropy(&m, &labels)?.0) / (2.0 * STEP);
    }
    Ok(GradReport {
        layer: "softmax_cross_entropy".into(),
        max_rel_err: rel_err(grad.data(), &numeric),
        checked: numeric.len(),
    })
}

/// Input with well separated values so that pooling maxima and ReLU signs do
/// not flip under a perturbation of size [`STEP`].
fn separated_input(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let n: usize = dims.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    Tensor4::from_fn(dims, |i| (order[i] as f64 - n as f64 / 2.0 + 0.5) * 0.01)
}

/// Run every check on randomized `2x3x5x5` inputs.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [2, 3, 5, 5];
    let mut out = Vec::new();

    for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
        let w = random_tensor([4, 3, k, k], &mut rng);
        let b = random_tensor([1, 4, 1, 1], &mut rng);
        let mut conv = Conv2d::new("conv", w, Some(b), stride, pad);
        let x = random_tensor(dims, &mut rng);
        out.push(check_probe(&format!("conv2d k{k} s{stride} p{pad}"), &mut conv, x, Mode::TRAIN, &mut rng)?);
    }

    let mut bn = BatchNorm2d::new("bn", 3);
    bn.gamma.value = random_tensor([1, 3, 1, 1], &mut rng);
    bn.beta.value = random_tensor([1, 3, 1, 1], &mut rng);
    let x = random_tensor(dims, &mut rng);
    out.push(check_probe("batchnorm train", &mut bn, x.clone(), Mode::TRAIN, &mut rng)?);
    bn.running_mean = random_tensor([1, 3, 1, 1], &mut rng);
    bn.running_var = Tensor4::from_fn([1, 3, 1, 1], |_| rng.gen_range(0.5..2.0));
    out.push(check_probe("batchnorm eval", &mut bn, x, Mode::EVAL_RECORD, &mut rng)?);

    let x = separated_input(dims, &mut rng);
    out.push(check_probe("relu", &mut Relu::default(), x.clone(), Mode::TRAIN, &mut rng)?);
    out.push(check_probe("maxpool", &mut MaxPool::default(), x, Mode::TRAIN, &mut rng)?);
    let x = random_tensor(dims, &mut rng);
    out.push(check_probe("global_avg_pool", &mut GlobalAvgPool::default(), x.clone(), Mode::TRAIN, &mut rng)?);
    out.push(check_probe("dropout p=0", &mut Dropout::new(0.0, 1), x.clone(), Mode::TRAIN, &mut rng)?);

    let w = random_tensor([4, 75, 1, 1], &mut rng);
    let b = random_tensor([1, 4, 1, 1], &mut rng);
    out.push(check_probe("linear", &mut Linear::new("fc", w, b), x, Mode::TRAIN, &mut rng)?);
    out.push(check_softmax_ce(&mut rng)?);

    for (label, kind, cin, width, stride) in [
        ("residual basic identity", BlockKind::Basic, 3, 3, 1),
        ("residual basic projection", BlockKind::Basic, 3, 4, 2),
        ("residual bottleneck projection", BlockKind::Bottleneck, 3, 2, 1),
    ] {
        let mut block = Block::new("block", kind, cin, width, stride, &mut rng);
        let x = random_tensor(dims, &mut rng);
        out.push(check_probe(label, &mut block, x, Mode::TRAIN, &mut rng)?);
    }

    let cfg = NetConfig {
        stage_blocks: vec![1, 1],
        base_width: 2,
        stem_kernel: 3,
        stem_stride: 2,
        stem_pool: true,
        dropout_p: 0.0,
        ..NetConfig::default()
    };
    let mut net = ResNet::<f64>::new(cfg, rng.gen())?;
    net.set_input_grad(true);
    let x = random_tensor([2, 20, 10, 10], &mut rng);
    out.push(check_probe("resnet (tiny, end to end)", &mut net, x, Mode::TRAIN, &mut rng)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for r in run_suite(42).unwrap() {
            assert!(r.passed(), "{}: relative error {:e}", r.layer, r.max_rel_err);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        assert!(rel_err(&[1.0, 2.0], &[1.0, 2.01]) > TOLERANCE);
        assert_eq!(rel_err(&[0.0], &[0.0]), 0.0);
    }
}
