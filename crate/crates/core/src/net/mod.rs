//! Batch-normalized residual classifier over 20-channel flow chunks,
//! implemented from scratch with explicit backward passes.

pub mod checkpoint;
pub mod gradcheck;
pub mod init;
pub mod layers;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_tensor, save_checkpoint, write_tensor, Checkpoint};
pub use init::{cross_modality_init, he_normal};
pub use layers::{Mode, Param, Visit};
pub use model::{Block, ResNet};
pub use optim::{lr_at, sgd_update, Sgd};
pub use tensor::{Real, Tensor4};

pub const NUM_CLASSES: usize = 15;
pub const INPUT_CHANNELS: usize = 20;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("{layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("label {0} out of range for {1} classes")]
    Label(usize, usize),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no training data: {0}")]
    NoData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (x4).
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Small,
    BnResnet101,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(Preset::Small),
            "bn-resnet101" => Ok(Preset::BnResnet101),
            other => Err(format!("unknown preset '{other}' (expected small or bn-resnet101)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub stage_blocks: Vec<usize>,
    pub base_width: usize,
    pub block: BlockKind,
    pub num_classes: usize,
    pub dropout_p: f64,
    pub input_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_pool: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::preset(Preset::Small)
    }
}

impl NetConfig {
    pub fn preset(p: Preset) -> Self {
        // The small preset reaches the 56x56 first-stage grid with a single
        // stride-4 stem convolution instead of stride 2 plus max pooling.
        let (stage_blocks, base_width, block, stem_stride, stem_pool) = match p {
            Preset::Small => (vec![1, 1, 1, 1], 16, BlockKind::Basic, 4, false),
            Preset::BnResnet101 => (vec![3, 4, 23, 3], 64, BlockKind::Bottleneck, 2, true),
        };
        Self {
            stage_blocks,
            base_width,
            block,
            num_classes: NUM_CLASSES,
            dropout_p: 0.5,
            input_channels: INPUT_CHANNELS,
            stem_kernel: 7,
            stem_stride,
            stem_pool,
        }
    }

    /// Channels entering the classifier.
    pub fn feature_width(&self) -> usize {
        self.stage_width(self.stage_blocks.len() - 1) * self.block.expansion()
    }

    /// Inner width of stage `s`; doubles per stage.
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.input_channels != INPUT_CHANNELS {
            return bad(format!("input_channels must be {INPUT_CHANNELS}, got {}", self.input_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.stage_blocks.is_empty() || self.stage_blocks.contains(&0) {
            return bad("stage_blocks must be a non-empty list of positive counts".into());
        }
        if self.base_width == 0 {
            return bad("base_width must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_kernel.is_multiple_of(2) {
            return bad("stem_kernel must be odd".into());
        }
        if self.stem_stride == 0 {
            return bad("stem_stride must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random crops drawn from each sampled stack per epoch.
    pub crops_per_stack: usize,
    /// Evenly spaced center-cropped chunks per validation clip.
    pub val_chunks: usize,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            step_size: 10,
            gamma: 0.25,
            batch_size: 30,
            max_epochs: 300,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            crops_per_stack: crate::pipeline::TRAIN_CROPS_PER_STACK,
            val_chunks: 4,
            flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Config(m.to_string()));
        if !(self.lr_base > 0.0 && self.lr_base.is_finite()) {
            return bad("lr_base must be positive");
        }
        if self.step_size == 0 {
            return bad("step_size must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.crops_per_stack == 0 || self.val_chunks == 0 {
            return bad("batch_size, max_epochs, crops_per_stack and val_chunks must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        NetConfig::preset(Preset::Small).validate().unwrap();
        NetConfig::preset(Preset::BnResnet101).validate().unwrap();
        TrainConfig::default().validate().unwrap();
        assert_eq!(NetConfig::preset(Preset::Small).feature_width(), 128);
        assert_eq!(NetConfig::preset(Preset::BnResnet101).feature_width(), 2048);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = NetConfig::default();
        c.num_classes = 10;
        assert!(c.validate().is_err());
        let mut c = NetConfig::default();
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        let mut t = TrainConfig::default();
        t.gamma = 1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<NetConfig>("widht = 3").is_err());
        let c: NetConfig = toml::from_str("base_width = 8").unwrap();
        assert_eq!(c.base_width, 8);
        assert_eq!(c.stage_blocks, vec![1, 1, 1, 1]);
    }
}
