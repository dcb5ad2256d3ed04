//! Mini-batch training loop with best-validation checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::layers::{softmax_cross_entropy, Mode};
use super::model::ResNet;
use super::optim::{lr_at, Sgd};
use super::tensor::Tensor4;
use super::{NetError, TrainConfig};
use crate::pipeline::{
    assemble_chunk, random_crop, sample_test_chunks, ClipPlanes, CropSpec, FlowChunk, CHUNK_CHANNELS, CROP_SIZE,
};

/// A clip's flow planes with its class index.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub planes: ClipPlanes,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy)]
struct Draw {
    clip: usize,
    start: usize,
    crop: CropSpec,
    flip: bool,
}

fn assemble_batch(clips: &[&ClipPlanes], draws: &[Draw]) -> Result<Tensor4<f32>, NetError> {
    let mut data = vec![0.0f32; draws.len() * FlowChunk::LEN];
    data.par_chunks_mut(FlowChunk::LEN)
        .zip(draws.par_iter())
        .try_for_each(|(out, d)| assemble_chunk(clips[d.clip], d.start, d.crop, d.flip, out))?;
    Ok(Tensor4::from_vec([draws.len(), CHUNK_CHANNELS, CROP_SIZE, CROP_SIZE], data))
}

/// Probabilities for `n` evenly spaced, center-cropped chunks of a clip.
pub fn chunk_probabilities(
    model: &mut ResNet<f32>,
    clip: &ClipPlanes,
    n: usize,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>, NetError> {
    let starts = sample_test_chunks(clip.last_start()?, n);
    let draws: Vec<Draw> = starts
        .into_iter()
        .map(|start| Draw {
            clip: 0,
            start,
            crop: CropSpec::CENTER,
            flip: false,
        })
        .collect();
    let mut probs = Vec::with_capacity(n);
    for batch in draws.chunks(batch_size.max(1)) {
        let x = assemble_batch(&[clip], batch)?;
        probs.extend(model.predict_batch(x)?);
    }
    Ok(probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Clip-level validation: mean chunk cross-entropy and vote accuracy.
fn validate(model: &mut ResNet<f32>, val: &[LabeledClip], cfg: &TrainConfig) -> Result<(f64, f64), NetError> {
    let mut loss = 0.0;
    let mut chunks = 0usize;
    let mut correct = 0usize;
    for c in val {
        let probs = chunk_probabilities(model, &c.planes, cfg.val_chunks, cfg.batch_size)?;
        let k = probs[0].len();
        let mut mean = vec![0.0; k];
        for p in &probs {
            loss -= p[c.label].max(1e-300).ln();
            for (m, &v) in mean.iter_mut().zip(p) {
                *m += v / probs.len() as f64;
            }
        }
        chunks += probs.len();
        correct += (argmax(&mean) == c.label) as usize;
    }
    Ok((loss / chunks as f64, correct as f64 / val.len() as f64))
}

/// Train for `cfg.max_epochs` epochs. Each epoch draws one random start per
/// training clip and `crops_per_stack` random crops of that stack; the draws
/// are shuffled and split into batches. The checkpoint with the highest
/// validation accuracy (ties: lower validation loss, then earlier epoch) is
/// returned.
pub fn train(
    model: &mut ResNet<f32>,
    train_set: &[LabeledClip],
    val_set: &[LabeledClip],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NetError::NoData("empty training split".into()));
    }
    if val_set.is_empty() {
        return Err(NetError::NoData("empty validation split".into()));
    }
    let classes = model.config.num_classes;
    for c in train_set.iter().chain(val_set) {
        if c.label >= classes {
            return Err(NetError::Label(c.label, classes));
        }
        c.planes.last_start()?;
    }
    let clips: Vec<&ClipPlanes> = train_set.iter().map(|c| &c.planes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(f64, f64, usize, Checkpoint)> = None;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let mut draws = Vec::with_capacity(train_set.len() * cfg.crops_per_stack);
        for (i, c) in train_set.iter().enumerate() {
            let start = rand::Rng::gen_range(&mut rng, 0..=c.planes.last_start()?);
            for _ in 0..cfg.crops_per_stack {
                let crop = random_crop(&mut rng);
                let flip = cfg.flip && rand::Rng::gen::<bool>(&mut rng);
                draws.push(Draw {
                    clip: i,
                    start,
                    crop,
                    flip,
                });
            }
        }
        draws.shuffle(&mut rng);

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in draws.chunks(cfg.batch_size) {
            // batch statistics need more than one sample
            if batch.len() < 2 {
                continue;
            }
            let labels: Vec<usize> = batch.iter().map(|d| train_set[d.clip].label).collect();
            let x = assemble_batch(&clips, batch)?;
            model.zero_grad();
            let logits = model.forward(x, Mode::TRAIN)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(NetError::NonFinite {
                    what: "training loss".into(),
                    epoch,
                });
            }
            for (row, &l) in logits.data().chunks(classes).zip(&labels) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += (argmax(&row) == l) as usize;
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            model.backward(grad)?;
            sgd.step(model, lr, epoch)?;
        }
        if seen == 0 {
            return Err(NetError::NoData("no batch with at least two samples".into()));
        }

        let (val_loss, val_acc) = validate(model, val_set, cfg)?;
        if !val_loss.is_finite() {
            return Err(NetError::NonFinite {
                what: "validation loss".into(),
                epoch,
            });
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
        };
        log::info!("{}", entry.csv_row());
        on_epoch(&entry);
        let improved = match &best {
            None => true,
            Some((acc, vl, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *vl),
        };
        if improved {
            best = Some((val_acc, val_loss, epoch, Checkpoint::from_model(model, epoch)));
        }
        log.push(entry);
    }
    let (_, _, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { best, best_epoch, log })
}
