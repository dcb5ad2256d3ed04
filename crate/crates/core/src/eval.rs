//! Leave-one-supertrial-out folds, clip-level voting and accuracy tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ClipMeta, Task};
use crate::net::train::{chunk_probabilities, LabeledClip};
use crate::net::{NetError, ResNet, NUM_CLASSES};
use crate::pipeline::TEST_CHUNKS;

pub const NUM_FOLDS: u32 = 5;
/// Tolerance on the sum of each chunk probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;
pub const MISSING_CELL: &str = "—";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("manifest has {0} distinct trial indices, need at least 2")]
    TooFewTrials(usize),
    #[error("trial index {0} outside 1..={NUM_FOLDS}")]
    TrialIndex(u32),
    #[error("no chunk probabilities to vote over")]
    EmptyVote,
    #[error("chunk {index}: expected {expected} probabilities, got {got}")]
    VectorLength { index: usize, expected: usize, got: usize },
    #[error("chunk {index}: probabilities sum to {sum}")]
    NotNormalized { index: usize, sum: f64 },
    #[error("fold {0}: empty test split")]
    EmptyTest(u32),
    #[error("no fold accuracies to aggregate")]
    NoFolds,
    #[error("report: {0}")]
    Report(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One LOSO fold. Members are indices into the manifest slice the folds were
/// built from; only kept clips appear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    /// Supertrial held out for testing, `1..=5`.
    pub index: u32,
    pub validation_trial: u32,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Fold `i` tests on every subject's trial `i`, validates on one seeded
/// trial index `j != i` (the same `j` for all subjects) and trains on the rest.
pub fn build_loso_folds(manifest: &[ClipMeta], seed: u64) -> Result<Vec<FoldSpec>, EvalError> {
    let mut trials = BTreeSet::new();
    for m in manifest.iter().filter(|m| m.is_kept()) {
        let t = m.segment.trial;
        if !(1..=NUM_FOLDS).contains(&t) {
            return Err(EvalError::TrialIndex(t));
        }
        trials.insert(t);
    }
    if trials.len() < 2 {
        return Err(EvalError::TooFewTrials(trials.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = Vec::with_capacity(NUM_FOLDS as usize);
    for i in 1..=NUM_FOLDS {
        let candidates: Vec<u32> = trials.iter().copied().filter(|&t| t != i).collect();
        let j = *candidates.choose(&mut rng).expect("two or more trial indices");
        let mut fold = FoldSpec {
            index: i,
            validation_trial: j,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for (k, m) in manifest.iter().enumerate().filter(|(_, m)| m.is_kept()) {
            let t = m.segment.trial;
            if t == i {
                fold.test.push(k);
            } else if t == j {
                fold.validation.push(k);
            } else {
                fold.train.push(k);
            }
        }
        folds.push(fold);
    }
    Ok(folds)
}

/// Argmax of the element-wise mean of the chunk vectors; ties go to the
/// lowest class id. Each column is summed in sorted order so the result does
/// not depend on the order of the chunks.
pub fn vote(chunk_probs: &[Vec<f64>]) -> Result<usize, EvalError> {
    if chunk_probs.is_empty() {
        return Err(EvalError::EmptyVote);
    }
    for (index, p) in chunk_probs.iter().enumerate() {
        if p.len() != NUM_CLASSES {
            return Err(EvalError::VectorLength {
                index,
                expected: NUM_CLASSES,
                got: p.len(),
            });
        }
        let sum: f64 = p.iter().sum();
        if !((sum - 1.0).abs() <= PROB_SUM_TOL) || p.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::NotNormalized { index, sum });
        }
    }
    let n = chunk_probs.len() as f64;
    let mut column = Vec::with_capacity(chunk_probs.len());
    let mut best = (0usize, f64::NEG_INFINITY);
    for k in 0..NUM_CLASSES {
        column.clear();
        column.extend(chunk_probs.iter().map(|p| p[k]));
        column.sort_by(f64::total_cmp);
        let mean = column.iter().sum::<f64>() / n;
        if mean > best.1 {
            best = (k, mean);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldEvaluation {
    /// Percentage of correctly voted clips.
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Vote over [`TEST_CHUNKS`] center-cropped chunks per clip.
pub fn evaluate_fold(model: &mut ResNet<f32>, fold: u32, test: &[LabeledClip]) -> Result<FoldEvaluation, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTest(fold));
    }
    let mut predictions = Vec::with_capacity(test.len());
    for clip in test {
        let probs = chunk_probabilities(model, &clip.planes, TEST_CHUNKS, TEST_CHUNKS)?;
        predictions.push(vote(&probs)?);
    }
    let correct = predictions.iter().zip(test).filter(|(p, c)| **p == c.label).count();
    Ok(FoldEvaluation {
        accuracy: correct as f64 / test.len() as f64 * 100.0,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: Task,
    /// Accuracy per fold in percent; empty when only the summary is known.
    pub folds: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over folds.
    pub std: f64,
}

impl TaskReport {
    pub fn cell(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

pub fn aggregate(task: Task, accuracies: &[f64]) -> Result<TaskReport, EvalError> {
    if accuracies.is_empty() {
        return Err(EvalError::NoFolds);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(TaskReport {
        task,
        folds: accuracies.to_vec(),
        mean,
        std: var.sqrt(),
    })
}

/// One table row: a method evaluated under some protocol, with any subset of tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub evaluation: String,
    pub reports: Vec<TaskReport>,
}

impl ReportRow {
    fn cell(&self, task: Task) -> String {
        self.reports
            .iter()
            .find(|r| r.task == task)
            .map(TaskReport::cell)
            .unwrap_or_else(|| MISSING_CELL.to_string())
    }
}

const HEADERS: [&str; 5] = ["Method", "Evaluation", "Suturing", "Needle Passing", "Knot Tying"];

/// Aligned plain-text table.
pub fn emit_report(rows: &[ReportRow]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut c = vec![r.method.clone(), r.evaluation.clone()];
            c.extend(Task::ALL.iter().map(|&t| r.cell(t)));
            c
        })
        .collect();
    let mut widths: Vec<usize> = HEADERS.iter().map(|h| h.chars().count()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |items: &[String]| -> String {
        let padded: Vec<String> = items
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = String::new();
    let headers: Vec<String> = HEADERS.iter().map(|s| s.to_string()).collect();
    writeln!(out, "{}", line(&headers)).unwrap();
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    writeln!(out, "{}", rule.join("-+-")).unwrap();
    for row in &cells {
        writeln!(out, "{}", line(row)).unwrap();
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRecord {
    method: String,
    evaluation: String,
    task: Task,
    mean: f64,
    std: f64,
    fold1: Option<f64>,
    fold2: Option<f64>,
    fold3: Option<f64>,
    fold4: Option<f64>,
    fold5: Option<f64>,
}

/// One CSV record per (row, task) with full-precision numbers.
pub fn emit_csv(rows: &[ReportRow]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        for r in &row.reports {
            if r.folds.len() > NUM_FOLDS as usize {
                return Err(EvalError::Report(format!("{} fold accuracies for {}", r.folds.len(), r.task)));
            }
            let f = |i: usize| r.folds.get(i).copied();
            w.serialize(CsvRecord {
                method: row.method.clone(),
                evaluation: row.evaluation.clone(),
                task: r.task,
                mean: r.mean,
                std: r.std,
                fold1: f(0),
                fold2: f(1),
                fold3: f(2),
                fold4: f(3),
                fold5: f(4),
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
}

/// Parse [`emit_csv`] output back into rows, merging records of the same
/// method and evaluation in first-seen order.
pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for rec in csv::Reader::from_reader(text.as_bytes()).deserialize() {
        let rec: CsvRecord = rec?;
        let folds: Vec<f64> = [rec.fold1, rec.fold2, rec.fold3, rec.fold4, rec.fold5]
            .into_iter()
            .flatten()
            .collect();
        let report = TaskReport {
            task: rec.task,
            folds,
            mean: rec.mean,
            std: rec.std,
        };
        match rows
            .iter_mut()
            .find(|r| r.method == rec.method && r.evaluation == rec.evaluation)
        {
            Some(row) => row.reports.push(report),
            None => rows.push(ReportRow {
                method: rec.method,
                evaluation: rec.evaluation,
                reports: vec![report],
            }),
        }
    }
    Ok(rows)
}

/// Write a table as CSV when `path` ends in `.csv`, as text otherwise.
pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<(), EvalError> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let body = if is_csv { emit_csv(rows)? } else { emit_report(rows) };
    std::fs::write(path, body)?;
    Ok(())
}
