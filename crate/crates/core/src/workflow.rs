//! Pipeline stages over on-disk directories, shared by the CLI and tests.
//!
//! Layout of a stage directory:
//!
//! ```text
//! <root>/manifest.csv
//! <root>/clips/<clip_id>/frame_000000.png ...   (preprocess, synth)
//! <root>/flow/<clip_id>/mag_0000.png ...        (flow)
//! <root>/fold_<i>/best.ckpt, log.csv            (train)
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::encode::{encode_flow, plane_path, write_plane, EncodeError, ImageFormatKind, PlaneKind};
use crate::eval::{aggregate, build_loso_folds, evaluate_fold, EvalError, FoldEvaluation, TaskReport};
use crate::flow::{estimate_sequence, FarnebackParams, FlowError};
use crate::ingest::{
    parse_trial_name, parse_transcript, plan_clip, read_manifest, resample_frames, write_manifest, ClipMeta,
    IngestError, Task, FRAME_HEIGHT, FRAME_WIDTH,
};
use crate::net::checkpoint::{load_tensor_file, save_checkpoint, load_checkpoint};
use crate::net::train::{train, EpochLog, LabeledClip};
use crate::net::{NetConfig, NetError, ResNet, TrainConfig};
use crate::pipeline::{load_clip_planes, PipelineError};
use crate::raster::{Frame, ImageError};
use crate::synth::{gen_clip, gen_corpus};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLIPS_DIR: &str = "clips";
pub const FLOW_DIR: &str = "flow";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.csv";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input: {0}")]
    Missing(String),
    #[error("clip {clip}: {reason}")]
    Clip { clip: String, reason: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(path: &Path) -> Result<(), WorkflowError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn require_dir(path: &Path) -> Result<(), WorkflowError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(WorkflowError::Missing(format!("directory {} does not exist", path.display())))
    }
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}

pub fn clip_frames_dir(root: &Path, clip_id: &str) -> PathBuf {
    root.join(CLIPS_DIR).join(clip_id)
}

pub fn clip_flow_dir(root: &Path, clip_id: &str) -> PathBuf {
    root.join(FLOW_DIR).join(clip_id)
}

pub fn fold_dir(root: &Path, fold: u32) -> PathBuf {
    root.join(format!("fold_{fold}"))
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.png"))
}

/// `frame_*.png` / `frame_*.jpg` files of a directory, in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, WorkflowError> {
    require_dir(dir)?;
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let ext = p.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
            name.starts_with("frame_") && matches!(ext.as_str(), "png" | "jpg" | "jpeg")
        })
        .collect();
    frames.sort();
    Ok(frames)
}

fn read_stage_manifest(root: &Path) -> Result<Vec<ClipMeta>, WorkflowError> {
    let path = manifest_path(root);
    if !path.is_file() {
        return Err(WorkflowError::Missing(format!("manifest {} does not exist", path.display())));
    }
    Ok(read_manifest(&path)?)
}

// ------------------------------------------------------------------ synth

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub per_class: usize,
    pub size: usize,
    pub frames: usize,
    pub seed: u64,
    pub task: Task,
}

/// Render a synthetic corpus: frames under `clips/` plus the manifest.
pub fn run_synth(out: &Path, opts: &SynthOptions) -> Result<Vec<ClipMeta>, WorkflowError> {
    if opts.per_class == 0 || opts.frames < 12 || opts.size < 64 {
        return Err(WorkflowError::Missing(
            "synth needs per_class >= 1, frames >= 12 and size >= 64".into(),
        ));
    }
    let entries = gen_corpus(opts.per_class, opts.frames, opts.seed, opts.task);
    ensure_dir(out)?;
    entries.par_iter().try_for_each(|e| -> Result<(), WorkflowError> {
        let clip = gen_clip(e.kind, opts.frames, opts.size, e.seed);
        let dir = clip_frames_dir(out, &e.meta.clip_id());
        ensure_dir(&dir)?;
        for (i, f) in clip.frames.iter().enumerate() {
            f.save_png(&frame_path(&dir, i))?;
        }
        Ok(())
    })?;
    let metas: Vec<ClipMeta> = entries.into_iter().map(|e| e.meta).collect();
    write_manifest(&manifest_path(out), &metas)?;
    Ok(metas)
}

// ------------------------------------------------------------------ preprocess

/// Cut annotated clips out of per-trial frame directories.
///
/// `frames_dir/<Task>_<Subject><NNN>/frame_%06d.png` holds the source frames
/// numbered like the annotation frames; `transcripts_dir/<Task>_<Subject><NNN>.txt`
/// holds the annotations. Kept clips are re-timed, resized to 320x240 and
/// written under `out/clips/`; the manifest lists every clip.
pub fn run_preprocess(frames_dir: &Path, transcripts_dir: &Path, out: &Path) -> Result<Vec<ClipMeta>, WorkflowError> {
    require_dir(frames_dir)?;
    require_dir(transcripts_dir)?;
    let mut transcripts: Vec<PathBuf> = fs::read_dir(transcripts_dir)
        .map_err(io_err(transcripts_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    transcripts.sort();
    if transcripts.is_empty() {
        return Err(WorkflowError::Missing(format!("no .txt transcripts in {}", transcripts_dir.display())));
    }
    let mut metas = Vec::new();
    for path in &transcripts {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let (task, subject, trial) = parse_trial_name(stem)?;
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        for seg in parse_transcript(&text, task, &subject, trial)? {
            metas.push((stem.to_string(), plan_clip(&seg)?));
        }
    }
    ensure_dir(out)?;
    metas.par_iter().filter(|(_, m)| m.is_kept()).try_for_each(|(trial, m)| -> Result<(), WorkflowError> {
        let src = frames_dir.join(trial);
        let s = &m.segment;
        let frames = (s.start_frame..=s.end_frame)
            .map(|i| {
                let png = src.join(format!("frame_{i:06}.png"));
                let path = if png.exists() { png } else { src.join(format!("frame_{i:06}.jpg")) };
                Frame::load(&path)?.resize(FRAME_WIDTH, FRAME_HEIGHT)
            })
            .collect::<Result<Vec<_>, ImageError>>()?;
        let frames = resample_frames(&frames, m.sample_rate_hz)?;
        let dir = clip_frames_dir(out, &m.clip_id());
        ensure_dir(&dir)?;
        for (i, f) in frames.iter().enumerate() {
            f.save_png(&frame_path(&dir, i))?;
        }
        Ok(())
    })?;
    let metas: Vec<ClipMeta> = metas.into_iter().map(|(_, m)| m).collect();
    write_manifest(&manifest_path(out), &metas)?;
    Ok(metas)
}

// ------------------------------------------------------------------ flow

#[derive(Debug, Clone, PartialEq)]
pub struct FlowOptions {
    pub params: FarnebackParams,
    pub mag_cap: f32,
    pub format: ImageFormatKind,
    pub jpeg_quality: u8,
    /// Also dump unquantized fields as `flow_%04d.raw`.
    pub raw: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            params: FarnebackParams::default(),
            mag_cap: crate::encode::DEFAULT_MAG_CAP,
            format: ImageFormatKind::Png,
            jpeg_quality: crate::encode::DEFAULT_JPEG_QUALITY,
            raw: false,
        }
    }
}

/// Flow for every kept clip of `input`, stored as quantized planes under
/// `out/flow/`; the manifest is copied to `out`.
pub fn run_flow(input: &Path, out: &Path, opts: &FlowOptions) -> Result<usize, WorkflowError> {
    require_dir(input)?;
    opts.params.validate()?;
    let metas = read_stage_manifest(input)?;
    ensure_dir(out)?;
    let kept: Vec<&ClipMeta> = metas.iter().filter(|m| m.is_kept()).collect();
    kept.par_iter().try_for_each(|m| -> Result<(), WorkflowError> {
        let id = m.clip_id();
        let paths = list_frames(&clip_frames_dir(input, &id))?;
        if paths.len() < 2 {
            return Err(WorkflowError::Clip {
                clip: id,
                reason: format!("{} frames, need at least 2", paths.len()),
            });
        }
        let luma = paths
            .iter()
            .map(|p| Frame::load(p).map(|f| f.luminance()))
            .collect::<Result<Vec<_>, _>>()?;
        let fields = estimate_sequence(&luma, &opts.params)?;
        let dir = clip_flow_dir(out, &id);
        ensure_dir(&dir)?;
        for (i, field) in fields.iter().enumerate() {
            let (mag, dir_plane) = encode_flow(field, opts.mag_cap)?;
            write_plane(&mag, opts.format, opts.jpeg_quality, &plane_path(&dir, PlaneKind::Magnitude, i, opts.format))?;
            write_plane(&dir_plane, opts.format, opts.jpeg_quality, &plane_path(&dir, PlaneKind::Direction, i, opts.format))?;
            if opts.raw {
                field.save_raw(&dir.join(format!("flow_{i:04}.raw")))?;
            }
        }
        Ok(())
    })?;
    write_manifest(&manifest_path(out), &metas)?;
    Ok(kept.len())
}

// ------------------------------------------------------------------ train / evaluate

/// Kept clips of one task, in manifest order.
pub fn task_clips(metas: &[ClipMeta], task: Option<Task>) -> Result<Vec<ClipMeta>, WorkflowError> {
    let kept: Vec<ClipMeta> = metas.iter().filter(|m| m.is_kept()).cloned().collect();
    let task = match task {
        Some(t) => t,
        None => {
            let mut tasks: Vec<Task> = kept.iter().map(|m| m.segment.task).collect();
            tasks.sort();
            tasks.dedup();
            match tasks.as_slice() {
                [t] => *t,
                [] => return Err(WorkflowError::Missing("manifest has no kept clips".into())),
                _ => return Err(WorkflowError::Missing("manifest mixes tasks; select one with --task".into())),
            }
        }
    };
    Ok(kept.into_iter().filter(|m| m.segment.task == task).collect())
}

/// Load the flow planes of every clip (in parallel, order preserved).
pub fn load_labeled(flow_root: &Path, metas: &[ClipMeta]) -> Result<Vec<LabeledClip>, WorkflowError> {
    metas
        .par_iter()
        .map(|m| {
            let id = m.clip_id();
            let planes = load_clip_planes(&clip_flow_dir(flow_root, &id), &id)?;
            Ok(LabeledClip {
                planes,
                label: m.segment.label.index(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub task: Option<Task>,
    /// Folds to train, `1..=5`.
    pub folds: Vec<u32>,
    /// Flat RGB first-layer kernel file for cross-modality initialization.
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldTrainSummary {
    pub fold: u32,
    pub validation_trial: u32,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Seed for per-fold streams, so folds differ but each is reproducible.
fn fold_seed(seed: u64, fold: u32) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fold as u64)
}

/// Train one network per requested fold; writes `fold_<i>/best.ckpt` and
/// `fold_<i>/log.csv` under `out`.
pub fn run_train(flow_root: &Path, out: &Path, opts: &TrainOptions) -> Result<Vec<FoldTrainSummary>, WorkflowError> {
    opts.net.validate()?;
    opts.train.validate()?;
    let metas = task_clips(&read_stage_manifest(flow_root)?, opts.task)?;
    let folds = build_loso_folds(&metas, opts.train.seed)?;
    let rgb = match &opts.pretrained {
        Some(p) if !p.is_file() => {
            return Err(WorkflowError::Missing(format!("pretrained weight file {} does not exist", p.display())))
        }
        Some(p) => Some(load_tensor_file(p)?),
        None => None,
    };
    let clips = load_labeled(flow_root, &metas)?;
    ensure_dir(out)?;
    let mut summaries = Vec::new();
    for fold in folds.iter().filter(|f| opts.folds.contains(&f.index)) {
        let pick = |idx: &[usize]| idx.iter().map(|&k| clips[k].clone()).collect::<Vec<_>>();
        let (train_set, val_set) = (pick(&fold.train), pick(&fold.validation));
        let seed = fold_seed(opts.train.seed, fold.index);
        let mut model = ResNet::<f32>::new(opts.net.clone(), seed)?;
        if let Some(rgb) = &rgb {
            model.set_stem_from_rgb(rgb)?;
        }
        let dir = fold_dir(out, fold.index);
        ensure_dir(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        writeln!(log_file, "{}", EpochLog::CSV_HEADER).map_err(io_err(&log_path))?;
        let mut write_err = None;
        let cfg = TrainConfig {
            seed,
            ..opts.train.clone()
        };
        log::info!(
            "fold {}: {} train / {} validation clips (validation trial {})",
            fold.index,
            train_set.len(),
            val_set.len(),
            fold.validation_trial
        );
        let outcome = train(&mut model, &train_set, &val_set, &cfg, &mut |e| {
            if let Err(err) = writeln!(log_file, "{}", e.csv_row()).and_then(|_| log_file.flush()) {
                write_err.get_or_insert(err);
            }
        })?;
        if let Some(err) = write_err {
            return Err(io_err(&log_path)(err));
        }
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.best)?;
        summaries.push(FoldTrainSummary {
            fold: fold.index,
            validation_trial: fold.validation_trial,
            best_epoch: outcome.best_epoch,
            log: outcome.log,
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationResult {
    pub report: TaskReport,
    pub folds: Vec<(u32, FoldEvaluation)>,
}

/// Evaluate every fold that has a test split (restricted to `only_folds`
/// unless empty), using `ckpt_root/fold_<i>/best.ckpt`.
pub fn run_evaluate(
    flow_root: &Path,
    manifest: &Path,
    ckpt_root: &Path,
    task: Option<Task>,
    seed: u64,
    only_folds: &[u32],
) -> Result<EvaluationResult, WorkflowError> {
    if !manifest.is_file() {
        return Err(WorkflowError::Missing(format!("manifest {} does not exist", manifest.display())));
    }
    require_dir(ckpt_root)?;
    let metas = task_clips(&read_manifest(manifest)?, task)?;
    let task = metas[0].segment.task;
    let folds = build_loso_folds(&metas, seed)?;
    let mut results = Vec::new();
    for fold in folds
        .iter()
        .filter(|f| !f.test.is_empty() && (only_folds.is_empty() || only_folds.contains(&f.index)))
    {
        let path = fold_dir(ckpt_root, fold.index).join(CHECKPOINT_FILE);
        if !path.is_file() {
            return Err(WorkflowError::Missing(format!("checkpoint {} does not exist", path.display())));
        }
        let mut model = load_checkpoint(&path)?.to_model()?;
        let test_metas: Vec<ClipMeta> = fold.test.iter().map(|&k| metas[k].clone()).collect();
        let test = load_labeled(flow_root, &test_metas)?;
        let eval = evaluate_fold(&mut model, fold.index, &test)?;
        log::info!("fold {}: {:.2}% on {} clips", fold.index, eval.accuracy, test.len());
        results.push((fold.index, eval));
    }
    let accs: Vec<f64> = results.iter().map(|(_, e)| e.accuracy).collect();
    Ok(EvaluationResult {
        report: aggregate(task, &accs)?,
        folds: results,
    })
}
