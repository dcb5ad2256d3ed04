use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::{cross_modality_init, he_normal, normal_init};
use super::layers::{
    softmax, BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Linear, MaxPool, Mode, Param, Relu, Visit,
};
use super::tensor::{Real, Tensor4};
use super::{BlockKind, NetConfig, NetError};

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Convolution (no bias) followed by batch normalization.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    conv_key: String,
    bn_key: String,
}

impl<T: Real> ConvBn<T> {
    /// `conv_key`/`bn_key` are parameter names relative to the owner.
    pub fn new(owner: &str, conv_key: &str, bn_key: &str, weight: Tensor4<T>, stride: usize) -> Self {
        let pad = weight.h() / 2;
        let out = weight.n();
        Self {
            conv: Conv2d::new(&join(owner, conv_key), weight, None, stride, pad),
            bn: BatchNorm2d::new(&join(owner, bn_key), out),
            conv_key: conv_key.to_string(),
            bn_key: bn_key.to_string(),
        }
    }

    pub fn he<R: rand::Rng>(
        owner: &str,
        conv_key: &str,
        bn_key: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(owner, conv_key, bn_key, he_normal([cout, cin, k, k], cin * k * k, rng), stride)
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NetError> {
        let y = self.conv.forward(x, mode)?;
        self.bn.forward(y, mode)
    }

    pub fn backward(&mut self, dy: Tensor4<T>) -> Result<Option<Tensor4<T>>, NetError> {
        let d = self.bn.backward(dy)?;
        self.conv.backward(d)
    }

    fn backward_input(&mut self, dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let name = self.conv.name.clone();
        self.backward(dy)?.ok_or(NetError::Shape {
            layer: name,
            detail: "input gradient disabled".into(),
        })
    }
}

impl<T: Real> Visit<T> for ConvBn<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.conv.visit_params(&join(prefix, &self.conv_key), f);
        self.bn.visit_params(&join(prefix, &self.bn_key), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        self.bn.visit_buffers(&join(prefix, &self.bn_key), f);
    }
}

/// Residual block: main branch of conv-BN units with ReLUs between them, an
/// identity or 1x1-projected shortcut, and a ReLU after the sum.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub name: String,
    units: Vec<ConvBn<T>>,
    relus: Vec<Relu>,
    shortcut: Option<ConvBn<T>>,
    out_relu: Relu,
}

impl<T: Real> Block<T> {
    pub fn new<R: rand::Rng>(
        name: &str,
        kind: BlockKind,
        cin: usize,
        width: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let cout = width * kind.expansion();
        let units = match kind {
            BlockKind::Basic => vec![
                ConvBn::he(name, "conv1", "bn1", cin, width, 3, stride, rng),
                ConvBn::he(name, "conv2", "bn2", width, width, 3, 1, rng),
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::he(name, "conv1", "bn1", cin, width, 1, 1, rng),
                ConvBn::he(name, "conv2", "bn2", width, width, 3, stride, rng),
                ConvBn::he(name, "conv3", "bn3", width, cout, 1, 1, rng),
            ],
        };
        let shortcut = (stride != 1 || cin != cout)
            .then(|| ConvBn::he(name, "downsample.0", "downsample.1", cin, cout, 1, stride, rng));
        Self {
            name: name.to_string(),
            relus: vec![Relu::default(); units.len() - 1],
            units,
            shortcut,
            out_relu: Relu::default(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.units.last().map(|u| u.conv.out_channels()).unwrap_or(0)
    }

    pub fn has_projection(&self) -> bool {
        self.shortcut.is_some()
    }

    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NetError> {
        let skip = match self.shortcut.as_mut() {
            Some(sc) => sc.forward(x.clone(), mode)?,
            None => x.clone(),
        };
        let mut h = x;
        let last = self.units.len() - 1;
        for i in 0..=last {
            h = self.units[i].forward(h, mode)?;
            if i < last {
                h = self.relus[i].forward(h, mode);
            }
        }
        if h.dims() != skip.dims() {
            return Err(NetError::Shape {
                layer: self.name.clone(),
                detail: format!("main branch {:?} vs shortcut {:?}", h.dims(), skip.dims()),
            });
        }
        h.add_assign(&skip);
        Ok(self.out_relu.forward(h, mode))
    }

    pub fn backward(&mut self, dy: Tensor4<T>) -> Result<Tensor4<T>, NetError> {
        let d = self.out_relu.backward(dy)?;
        let dskip = match self.shortcut.as_mut() {
            Some(sc) => sc.backward_input(d.clone())?,
            None => d.clone(),
        };
        let mut h = d;
        let last = self.units.len() - 1;
        for i in (0..=last).rev() {
            if i < last {
                h = self.relus[i].backward(h)?;
            }
            h = self.units[i].backward_input(h)?;
        }
        h.add_assign(&dskip);
        Ok(h)
    }
}

impl<T: Real> Visit<T> for Block<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        for u in &mut self.units {
            u.visit_params(prefix, f);
        }
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_params(prefix, f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        for u in &mut self.units {
            u.visit_buffers(prefix, f);
        }
        if let Some(sc) = self.shortcut.as_mut() {
            sc.visit_buffers(prefix, f);
        }
    }
}

/// Stem, residual stages, global pooling, dropout and a linear classifier.
#[derive(Debug, Clone)]
pub struct ResNet<T> {
    pub config: NetConfig,
    stem: ConvBn<T>,
    stem_relu: Relu,
    pool: Option<MaxPool>,
    blocks: Vec<Block<T>>,
    gap: GlobalAvgPool,
    dropout: Dropout,
    fc: Linear<T>,
}

impl<T: Real> ResNet<T> {
    /// Random initialization. The first layer is a random RGB kernel passed
    /// through [`cross_modality_init`], as if a pretrained kernel were used.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.stem_kernel;
        let rgb: Tensor4<T> = he_normal([config.base_width, 3, k, k], 3 * k * k, &mut rng);
        let stem_w = cross_modality_init(&rgb, config.input_channels)?;
        let mut stem = ConvBn::new("", "conv1", "bn1", stem_w, config.stem_stride);
        stem.conv.need_input_grad = false;

        let mut blocks = Vec::new();
        let mut cin = config.base_width;
        for (s, &count) in config.stage_blocks.iter().enumerate() {
            let width = config.stage_width(s);
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let block = Block::new(&format!("layer{}.{b}", s + 1), config.block, cin, width, stride, &mut rng);
                cin = block.out_channels();
                blocks.push(block);
            }
        }
        let feat = config.feature_width();
        debug_assert_eq!(cin, feat);
        let fc_w = normal_init([config.num_classes, feat, 1, 1], (1.0 / feat as f64).sqrt(), &mut rng);
        let fc = Linear::new("fc", fc_w, Tensor4::zeros([1, config.num_classes, 1, 1]));
        let dropout = Dropout::new(config.dropout_p, seed ^ 0xd50f_u64);
        Ok(Self {
            pool: config.stem_pool.then(MaxPool::default),
            config,
            stem,
            stem_relu: Relu::default(),
            blocks,
            gap: GlobalAvgPool::default(),
            dropout,
            fc,
        })
    }

    /// Replace the first-layer kernel with the cross-modality transform of a
    /// pretrained RGB kernel `[base_width, 3, k, k]`.
    pub fn set_stem_from_rgb(&mut self, rgb: &Tensor4<T>) -> Result<(), NetError> {
        let expect = [self.config.base_width, 3, self.config.stem_kernel, self.config.stem_kernel];
        if rgb.dims() != expect {
            return Err(NetError::Shape {
                layer: "conv1".into(),
                detail: format!("pretrained kernel dims {:?}, expected {expect:?}", rgb.dims()),
            });
        }
        self.stem.conv.weight.value = cross_modality_init(rgb, self.config.input_channels)?;
        Ok(())
    }

    pub fn stem_weight(&self) -> &Tensor4<T> {
        &self.stem.conv.weight.value
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    /// Whether backward also produces the gradient with respect to the input.
    pub fn set_input_grad(&mut self, on: bool) {
        self.stem.conv.need_input_grad = on;
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout.reseed(seed);
    }

    /// Logits `[N, num_classes, 1, 1]`.
    pub fn forward(&mut self, x: Tensor4<T>, mode: Mode) -> Result<Tensor4<T>, NetError> {
        let mut h = self.stem.forward(x, mode)?;
        h = self.stem_relu.forward(h, mode);
        if let Some(p) = self.pool.as_mut() {
            h = p.forward(h, mode);
        }
        for b in &mut self.blocks {
            h = b.forward(h, mode)?;
        }
        h = self.gap.forward(h, mode);
        h = self.dropout.forward(h, mode);
        self.fc.forward(h, mode)
    }

    /// Accumulates parameter gradients; returns the input gradient when enabled.
    pub fn backward(&mut self, dlogits: Tensor4<T>) -> Result<Option<Tensor4<T>>, NetError> {
        let mut d = self.fc.backward(dlogits)?;
        d = self.dropout.backward(d)?;
        d = self.gap.backward(d)?;
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(d)?;
        }
        if let Some(p) = self.pool.as_mut() {
            d = p.backward(d)?;
        }
        d = self.stem_relu.backward(d)?;
        self.stem.backward(d)
    }

    pub fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }

    /// Class probabilities for each item of a batch, eval mode.
    pub fn predict_batch(&mut self, x: Tensor4<T>) -> Result<Vec<Vec<f64>>, NetError> {
        let logits = self.forward(x, Mode::EVAL)?;
        Ok(softmax(&logits))
    }

    /// Probabilities for a single chunk laid out as `[C, H, W]`.
    pub fn predict_chunk(&mut self, chunk: &[T], height: usize, width: usize) -> Result<Vec<f64>, NetError> {
        let c = self.config.input_channels;
        if chunk.len() != c * height * width {
            return Err(NetError::Shape {
                layer: "input".into(),
                detail: format!("chunk of {} values is not {c}x{height}x{width}", chunk.len()),
            });
        }
        let x = Tensor4::from_vec([1, c, height, width], chunk.to_vec());
        Ok(self.predict_batch(x)?.remove(0))
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value.len());
        n
    }
}

impl<T: Real> Visit<T> for ResNet<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<T>)) {
        self.stem.visit_params(prefix, f);
        for b in &mut self.blocks {
            let name = join(prefix, &b.name);
            b.visit_params(&name, f);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor4<T>)) {
        self.stem.visit_buffers(prefix, f);
        for b in &mut self.blocks {
            let name = join(prefix, &b.name);
            b.visit_buffers(&name, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Preset;

    fn tiny() -> NetConfig {
        NetConfig {
            stage_blocks: vec![1, 1],
            base_width: 4,
            stem_kernel: 3,
            ..NetConfig::default()
        }
    }

    #[test]
    fn shapes_and_probabilities() {
        let mut net = ResNet::<f32>::new(tiny(), 1).unwrap();
        let x = Tensor4::from_fn([3, 20, 32, 32], |i| ((i * 7919) % 255) as f32 / 255.0);
        let logits = net.forward(x.clone(), Mode::EVAL).unwrap();
        assert_eq!(logits.dims(), [3, 15, 1, 1]);
        for p in net.predict_batch(x).unwrap() {
            assert_eq!(p.len(), 15);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stem_slices_identical() {
        let net = ResNet::<f32>::new(tiny(), 2).unwrap();
        let w = net.stem_weight();
        assert_eq!(w.dims(), [4, 20, 3, 3]);
        for o in 0..4 {
            let item = w.item(o);
            for c in 1..20 {
                assert_eq!(&item[c * 9..(c + 1) * 9], &item[..9]);
            }
        }
    }

    #[test]
    fn torchvision_style_names() {
        let mut net = ResNet::<f32>::new(NetConfig::preset(Preset::Small), 0).unwrap();
        let mut names = Vec::new();
        net.visit_params("", &mut |n, _| names.push(n));
        assert_eq!(names[0], "conv1.weight");
        assert_eq!(names[1], "bn1.weight");
        assert!(names.contains(&"layer2.0.downsample.0.weight".to_string()));
        assert!(!names.contains(&"layer1.0.downsample.0.weight".to_string()));
        assert_eq!(names.last().unwrap(), "fc.bias");
        let mut bufs = Vec::new();
        net.visit_buffers("", &mut |n, _| bufs.push(n));
        assert!(bufs.contains(&"layer4.0.bn2.running_var".to_string()));
    }

    #[test]
    fn bottleneck_preset_structure() {
        let cfg = NetConfig {
            stage_blocks: vec![3, 4, 23, 3],
            base_width: 2,
            ..NetConfig::preset(Preset::BnResnet101)
        };
        let net = ResNet::<f32>::new(cfg, 0).unwrap();
        assert_eq!(net.blocks().len(), 33);
        assert_eq!(net.blocks().last().unwrap().out_channels(), 2 * 8 * 4);
        // projection on the first block of every stage, since width changes
        assert_eq!(net.blocks().iter().filter(|b| b.has_projection()).count(), 4);
    }

    #[test]
    fn seeded_init_reproduces() {
        let mut a = ResNet::<f32>::new(tiny(), 9).unwrap();
        let mut b = ResNet::<f32>::new(tiny(), 9).unwrap();
        let mut va = Vec::new();
        a.visit_params("", &mut |_, p| va.extend_from_slice(p.value.data()));
        let mut vb = Vec::new();
        b.visit_params("", &mut |_, p| vb.extend_from_slice(p.value.data()));
        assert_eq!(va, vb);
    }

    #[test]
    fn wrong_input_channels_named() {
        let mut net = ResNet::<f32>::new(tiny(), 1).unwrap();
        let err = net.forward(Tensor4::zeros([1, 3, 16, 16]), Mode::EVAL).unwrap_err();
        assert!(err.to_string().contains("conv1"));
    }
}
