//! Network layers with explicit forward/backward passes.
//!
//! Layers consume their input, cache what their backward pass needs when the
//! pass is recorded, and accumulate parameter gradients into [`Param::grad`].
//! Per-sample convolution work runs on the rayon pool; weight gradients are
//! reduced in sample order so results do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tensor::{Real, Tensor4};
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics for BN, active dropout.
    pub train: bool,
    /// Cache activations for a subsequent backward pass.
    pub record: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        train: true,
        record: true,
    };
    pub const EVAL: Mode = Mode {
        train: false,
        record: false,
    };
    /// Eval-mode statistics with caches kept, for gradient checks.
    pub const EVAL_RECORD: Mode = Mode {
        train: false,
        record: true,
    };
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let grad = Tensor4::zeros(value.dims());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Named access to trainable parameters and persistent buffers.
pub trait Visit<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>));
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor4<T>)) {}
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn missing_cache(layer: &str) -> NetError {
    NetError::Shape {
        layer: layer.to_string(),
        detail: "backward called without a recorded forward pass".into(),
    }
}

// ---------------------------------------------------------------- conv

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    dx.fill(T::zero());
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub name: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
    /// The stem does not need a gradient with respect to the network input.
    pub need_input_grad: bool,
    input: Option<Tensor4<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, weight: Tensor4<T>, bias: Option<Tensor4<T>>, stride: usize, pad: usize) -> Self {
        assert_eq!(weight.h(), weight.w(), "square kernels only");
        Self {
            name: name.to_string(),
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            stride,
            pad,
            need_input_grad: true,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.c()
    }

    fn geom(&self, x: &Tensor4<T>) -> Result<ConvGeom, NetError> {
        let k = self.weight.value.h();
        if x.c() != self.in_channels() {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("expected {} input channels, got {}", self.in_channels(), x.c()),
            });
        }
        if x.h() + 2 * self.pad < k || x.w() + 2 * self.pad < k {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("input {}x{} smaller than kernel {k}", x.h(), x.w()),
            });
        }
        Ok(ConvGeom {
            cin: x.c(),
            h: x.h(),
            w: x.w(),
            k,
            stride: self.stride,
            pad: self.pad,
            oh: (x.h() + 2 * self.pad - k) / self.stride + 1,
            ow: (x.w() + 2 * self.pad - k) / self.stride + 1,
        })
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NetError> {
        let g = self.geom(&x)?;
        let cout = self.out_channels();
        let (kk, p) = (g.rows(), g.cols());
        let mut y = Tensor4::zeros([x.n(), cout, g.oh, g.ow]);
        let wt = self.weight.value.data();
        let bias = self.bias.as_ref().map(|b| b.value.data());
        let item = x.item_len();
        let xd = x.data();
        y.data_mut()
            .par_chunks_mut(cout * p)
            .enumerate()
            .for_each_init(
                || vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }],
                |cols, (n, out)| {
                    let xs = &xd[n * item..(n + 1) * item];
                    let src: &[T] = if g.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &g, cols);
                        cols
                    };
                    T::gemm(cout, kk, p, T::one(), wt, kk as isize, 1, src, p as isize, 1, T::zero(), out, p as isize, 1);
                    if let Some(b) = bias {
                        for (o, &bv) in out.chunks_mut(p).zip(b) {
                            o.iter_mut().for_each(|v| *v += bv);
                        }
                    }
                },
            );
        if mode.record {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: Tensor4<T>) -> Result<Option<Tensor4<T>>, NetError> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let g = self.geom(&x)?;
        let cout = self.out_channels();
        let (kk, p) = (g.rows(), g.cols());
        if dy.dims() != [x.n(), cout, g.oh, g.ow] {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("gradient dims {:?} do not match output", dy.dims()),
            });
        }
        let need_dx = self.need_input_grad;
        let item = x.item_len();
        let wt = self.weight.value.data();
        let mut dx = need_dx.then(|| Tensor4::zeros(x.dims()));

        // Samples are processed in groups the size of the pool; partial weight
        // gradients are added in sample order.
        let group = rayon::current_num_threads().max(1);
        let n = x.n();
        let mut start = 0;
        while start < n {
            let end = (start + group).min(n);
            let dx_chunks: Vec<Option<&mut [T]>> = match dx.as_mut() {
                Some(t) => t.data_mut()[start * item..end * item].chunks_mut(item).map(Some).collect(),
                None => (start..end).map(|_| None).collect(),
            };
            let partials: Vec<(Vec<T>, Vec<T>)> = dx_chunks
                .into_par_iter()
                .enumerate()
                .map(|(j, dx_n)| {
                    let s = start + j;
                    let xs = x.item(s);
                    let dys = dy.item(s);
                    let mut cols = Vec::new();
                    let src: &[T] = if g.is_pointwise() {
                        xs
                    } else {
                        cols = vec![T::zero(); kk * p];
                        im2col(xs, &g, &mut cols);
                        &cols
                    };
                    let mut dw = vec![T::zero(); cout * kk];
                    T::gemm(cout, p, kk, T::one(), dys, p as isize, 1, src, 1, p as isize, T::zero(), &mut dw, kk as isize, 1);
                    let db: Vec<T> = dys.chunks(p).map(|c| c.iter().copied().sum()).collect();
                    if let Some(dx_n) = dx_n {
                        if g.is_pointwise() {
                            T::gemm(kk, cout, p, T::one(), wt, 1, kk as isize, dys, p as isize, 1, T::zero(), dx_n, p as isize, 1);
                        } else {
                            let mut dcols = if cols.is_empty() { vec![T::zero(); kk * p] } else { cols };
                            T::gemm(kk, cout, p, T::one(), wt, 1, kk as isize, dys, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                            col2im(&dcols, &g, dx_n);
                        }
                    }
                    (dw, db)
                })
                .collect();
            for (dw, db) in partials {
                for (a, b) in self.weight.grad.data_mut().iter_mut().zip(&dw) {
                    *a += *b;
                }
                if let Some(bias) = self.bias.as_mut() {
                    for (a, b) in bias.grad.data_mut().iter_mut().zip(&db) {
                        *a += *b;
                    }
                }
            }
            start = end;
        }
        Ok(dx)
    }
}

impl<T: Real> Visit<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(join(prefix, "bias"), b);
        }
    }
}

// ---------------------------------------------------------------- batch norm

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let mut gamma = Tensor4::zeros([1, channels, 1, 1]);
        gamma.fill(T::one());
        let mut running_var = Tensor4::zeros([1, channels, 1, 1]);
        running_var.fill(T::one());
        Self {
            name: name.to_string(),
            gamma: Param::new(gamma),
            beta: Param::new(Tensor4::zeros([1, channels, 1, 1])),
            running_mean: Tensor4::zeros([1, channels, 1, 1]),
            running_var,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.c()
    }

    pub fn forward(&mut self, mut x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NetError> {
        let c = self.channels();
        if x.c() != c {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("expected {c} channels, got {}", x.c()),
            });
        }
        let (n, hw) = (x.n(), x.h() * x.w());
        let m = n * hw;
        if mode.train && m < 2 {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: "batch statistics need at least 2 values per channel".into(),
            });
        }
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        for ch in 0..c {
            let (mu, var) = if mode.train {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s += x.data()[off..off + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    sq += x.data()[off..off + hw].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = T::lit((1.0 - BN_MOMENTUM) * rm.as_f64() + BN_MOMENTUM * mu);
                let rv = &mut self.running_var.data_mut()[ch];
                let unbiased = var * m as f64 / (m as f64 - 1.0);
                *rv = T::lit((1.0 - BN_MOMENTUM) * rv.as_f64() + BN_MOMENTUM * unbiased);
                (mu, var)
            } else {
                (self.running_mean.data()[ch].as_f64(), self.running_var.data()[ch].as_f64())
            };
            mean[ch] = T::lit(mu);
            inv_std[ch] = T::lit(1.0 / (var + BN_EPS).sqrt());
        }
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut xhat = if mode.record {
            Some(Tensor4::zeros(x.dims()))
        } else {
            None
        };
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                let plane = &mut x.data_mut()[off..off + hw];
                if let Some(xh) = xhat.as_mut() {
                    let dst = &mut xh.data_mut()[off..off + hw];
                    for (v, h) in plane.iter_mut().zip(dst) {
                        *h = (*v - mu) * is;
                        *v = g * *h + bt;
                    }
                } else {
                    for v in plane.iter_mut() {
                        *v = g * ((*v - mu) * is) + bt;
                    }
                }
            }
        }
        self.cache = xhat.map(|xhat| BnCache {
            xhat,
            inv_std,
            batch_stats: mode.train,
        });
        Ok(x)
    }

    pub fn backward(&mut self, mut dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        if dy.dims() != cache.xhat.dims() {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("gradient dims {:?} do not match input", dy.dims()),
            });
        }
        let c = self.channels();
        let (n, hw) = (dy.n(), dy.h() * dy.w());
        let m = (n * hw) as f64;
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for (d, h) in dy.data()[off..off + hw].iter().zip(&cache.xhat.data()[off..off + hw]) {
                    sum_dy += d.as_f64();
                    sum_dy_xhat += d.as_f64() * h.as_f64();
                }
            }
            self.gamma.grad.data_mut()[ch] += T::lit(sum_dy_xhat);
            self.beta.grad.data_mut()[ch] += T::lit(sum_dy);
            let g = self.gamma.value.data()[ch];
            let scale = g * cache.inv_std[ch];
            let (mean_dy, mean_dy_xhat) = (T::lit(sum_dy / m), T::lit(sum_dy_xhat / m));
            for b in 0..n {
                let off = (b * c + ch) * hw;
                let xh = &cache.xhat.data()[off..off + hw];
                for (d, &h) in dy.data_mut()[off..off + hw].iter_mut().zip(xh) {
                    *d = if cache.batch_stats {
                        scale * (*d - mean_dy - h * mean_dy_xhat)
                    } else {
                        scale * *d
                    };
                }
            }
        }
        Ok(dy)
    }
}

impl<T: Real> Visit<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.gamma);
        f(join(prefix, "bias"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------- relu

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, mut x: Tensor4<T>, mode: Mode) -> Tensor4<T> {
        if mode.record {
            let mut mask = Vec::with_capacity(x.len());
            for v in x.data_mut() {
                let keep = *v > T::zero();
                if !keep {
                    *v = T::zero();
                }
                mask.push(keep);
            }
            self.mask = Some(mask);
        } else {
            x.data_mut().iter_mut().for_each(|v| {
                if !(*v > T::zero()) {
                    *v = T::zero()
                }
            });
        }
        x
    }

    pub fn backward<T: Real>(&mut self, mut dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != dy.len() {
            return Err(NetError::Shape {
                layer: "relu".into(),
                detail: "gradient length does not match input".into(),
            });
        }
        for (d, keep) in dy.data_mut().iter_mut().zip(mask) {
            if !keep {
                *d = T::zero();
            }
        }
        Ok(dy)
    }
}

// ---------------------------------------------------------------- max pool

/// 3x3 max pooling, stride 2, padding 1.
#[derive(Debug, Clone, Default)]
pub struct MaxPool {
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn out_size(s: usize) -> usize {
        (s + 2 * Self::PAD - Self::KERNEL) / Self::STRIDE + 1
    }

    pub fn forward<T: Real>(&mut self, x: Tensor4<T>, mode: Mode) -> Tensor4<T> {
        let [n, c, h, w] = x.dims();
        let (oh, ow) = (Self::out_size(h), Self::out_size(w));
        let mut y = Tensor4::zeros([n, c, oh, ow]);
        let mut arg = if mode.record {
            vec![0u32; n * c * oh * ow]
        } else {
            Vec::new()
        };
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for ky in 0..Self::KERNEL {
                        let iy = (oy * Self::STRIDE + ky) as isize - Self::PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..Self::KERNEL {
                            let ix = (ox * Self::STRIDE + kx) as isize - Self::PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    y.data_mut()[o] = best;
                    if mode.record {
                        arg[o] = best_i as u32;
                    }
                }
            }
        }
        if mode.record {
            self.argmax = Some((arg, x.dims()));
        }
        y
    }

    pub fn backward<T: Real>(&mut self, dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let (arg, dims) = self.argmax.take().ok_or_else(|| missing_cache("maxpool"))?;
        let [_, _, h, w] = dims;
        let mut dx = Tensor4::zeros(dims);
        let per = dy.h() * dy.w();
        for (o, (&d, &i)) in dy.data().iter().zip(&arg).enumerate() {
            let plane = o / per;
            dx.data_mut()[plane * h * w + i as usize] += d;
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------- global average pool

#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    dims: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn forward<T: Real>(&mut self, x: Tensor4<T>, mode: Mode) -> Tensor4<T> {
        let [n, c, h, w] = x.dims();
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let y = Tensor4::from_vec(
            [n, c, 1, 1],
            x.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect(),
        );
        if mode.record {
            self.dims = Some(x.dims());
        }
        y
    }

    pub fn backward<T: Real>(&mut self, dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let dims = self.dims.take().ok_or_else(|| missing_cache("avgpool"))?;
        let hw = dims[2] * dims[3];
        let inv = T::lit(1.0 / hw as f64);
        let mut dx = Tensor4::zeros(dims);
        for (plane, &d) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
            plane.fill(d * inv);
        }
        Ok(dx)
    }
}

// ---------------------------------------------------------------- dropout

#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must lie in [0, 1)");
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward<T: Real>(&mut self, mut x: Tensor4<T>, mode: Mode) -> Tensor4<T> {
        if !mode.train || self.p == 0.0 {
            if mode.record {
                self.mask = Some(vec![1.0; x.len()]);
            }
            return x;
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if self.rng.gen::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
            *v *= T::lit(m);
        }
        if mode.record {
            self.mask = Some(mask);
        }
        x
    }

    pub fn backward<T: Real>(&mut self, mut dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("dropout"))?;
        for (d, &m) in dy.data_mut().iter_mut().zip(&mask) {
            *d *= T::lit(m);
        }
        Ok(dy)
    }
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub name: String,
    /// `[out, in, 1, 1]`
    pub weight: Param<T>,
    /// `[1, out, 1, 1]`
    pub bias: Param<T>,
    input: Option<Tensor4<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, weight: Tensor4<T>, bias: Tensor4<T>) -> Self {
        Self {
            name: name.to_string(),
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NetError> {
        let (out, inp) = (self.weight.value.n(), self.weight.value.c());
        if x.item_len() != inp {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("expected {inp} features, got {}", x.item_len()),
            });
        }
        let n = x.n();
        let mut y = Tensor4::zeros([n, out, 1, 1]);
        T::gemm(
            n,
            inp,
            out,
            T::one(),
            x.data(),
            inp as isize,
            1,
            self.weight.value.data(),
            1,
            inp as isize,
            T::zero(),
            y.data_mut(),
            out as isize,
            1,
        );
        for row in y.data_mut().chunks_mut(out) {
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v += b;
            }
        }
        if mode.record {
            self.input = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let (out, inp) = (self.weight.value.n(), self.weight.value.c());
        let n = x.n();
        if dy.dims() != [n, out, 1, 1] {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("gradient dims {:?} do not match output", dy.dims()),
            });
        }
        // dW += dYᵀ·X
        T::gemm(
            out,
            n,
            inp,
            T::one(),
            dy.data(),
            1,
            out as isize,
            x.data(),
            inp as isize,
            1,
            T::one(),
            self.weight.grad.data_mut(),
            inp as isize,
            1,
        );
        for row in dy.data().chunks(out) {
            for (g, &d) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor4::zeros(x.dims());
        T::gemm(
            n,
            out,
            inp,
            T::one(),
            dy.data(),
            out as isize,
            1,
            self.weight.value.data(),
            inp as isize,
            1,
            T::zero(),
            dx.data_mut(),
            inp as isize,
            1,
        );
        Ok(dx)
    }
}

impl<T: Real> Visit<T> for Linear<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------- loss

/// Row-wise softmax of `[N, K, 1, 1]` logits.
pub fn softmax<T: Real>(logits: &Tensor4<T>) -> Vec<Vec<f64>> {
    let k = logits.c();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(f64, Tensor4<T>), NetError> {
    let (n, k) = (logits.n(), logits.c());
    if labels.len() != n || logits.h() != 1 || logits.w() != 1 {
        return Err(NetError::Shape {
            layer: "softmax_cross_entropy".into(),
            detail: format!("{} labels for logits {:?}", labels.len(), logits.dims()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NetError::Label(bad, k));
    }
    let probs = softmax(logits);
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(logits.dims());
    for (i, (p, &l)) in probs.iter().zip(labels).enumerate() {
        loss -= p[l].max(1e-300).ln();
        for (j, &pj) in p.iter().enumerate() {
            let t = if j == l { 1.0 } else { 0.0 };
            grad.data_mut()[i * k + j] = T::lit((pj - t) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}
