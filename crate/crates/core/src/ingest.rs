//! Gesture annotations, clip planning and the clip manifest.
//!
//! Transcript files carry one gesture per line as `start end G<k>`, with frame
//! numbers referring to the 30 Hz source recording. Each gesture becomes a
//! clip; short clips are re-timed to 40 Hz and clips that still come out under
//! [`MIN_CLIP_FRAMES`] frames are excluded.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_GESTURES: usize = 15;
pub const SOURCE_RATE_HZ: u32 = 30;
pub const BOOST_RATE_HZ: u32 = 40;
/// Clips shorter than this at 30 Hz are re-timed to 40 Hz.
pub const BOOST_BELOW_FRAMES: u32 = 30;
/// Clips with fewer frames than this after re-timing are excluded.
pub const MIN_CLIP_FRAMES: u32 = 15;
pub const FRAME_WIDTH: usize = 320;
pub const FRAME_HEIGHT: usize = 240;

const GESTURE_DESCRIPTIONS: [&str; NUM_GESTURES] = [
    "Reaching for needle with right hand",
    "Positioning needle",
    "Pushing needle through tissue",
    "Transferring needle from left to right",
    "Moving to center with needle in grip",
    "Pulling suture with left hand",
    "Pulling suture with right hand",
    "Orienting needle",
    "Using right hand to help tighten suture",
    "Loosening more suture",
    "Dropping suture at end and moving to end points",
    "Positioning needle",
    "Making C loop around right hand",
    "Reaching for suture with right hand",
    "Pulling suture with both hands",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown gesture label {token:?}")]
    Label { line: usize, token: String },
    #[error("overlapping segments: [{a_start},{a_end}] and [{b_start},{b_end}]")]
    Overlap {
        a_start: u32,
        a_end: u32,
        b_start: u32,
        b_end: u32,
    },
    #[error("invalid segment: {0}")]
    Segment(String),
    #[error("cannot resample an empty frame list")]
    EmptyClip,
    #[error("unsupported target rate {0} Hz (expected 30 or 40)")]
    Rate(u32),
    #[error("unrecognised trial name {0:?} (expected <Task>_<Subject><NNN>)")]
    TrialName(String),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("manifest row {row}: {reason}")]
    ManifestRow { row: usize, reason: String },
}

/// One of the 15 gesture classes, `G1`..`G15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GestureLabel(u8);

impl GestureLabel {
    pub fn new(id: u8) -> Option<Self> {
        (1..=NUM_GESTURES as u8).contains(&id).then_some(Self(id))
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::new(index as u8 + 1)
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Zero-based class index used by the classifier.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn description(self) -> &'static str {
        GESTURE_DESCRIPTIONS[self.index()]
    }

    pub fn all() -> impl Iterator<Item = GestureLabel> {
        (1..=NUM_GESTURES as u8).map(GestureLabel)
    }
}

impl fmt::Display for GestureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0)
    }
}

impl FromStr for GestureLabel {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        let digits = s.strip_prefix('G').ok_or(())?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.len() > 2 {
            return Err(());
        }
        digits.parse::<u8>().ok().and_then(GestureLabel::new).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "Suturing")]
    Suturing,
    #[serde(rename = "Needle_Passing", alias = "NeedlePassing")]
    NeedlePassing,
    #[serde(rename = "Knot_Tying", alias = "KnotTying")]
    KnotTying,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Suturing, Task::NeedlePassing, Task::KnotTying];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Suturing => "Suturing",
            Task::NeedlePassing => "Needle_Passing",
            Task::KnotTying => "Knot_Tying",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Task::Suturing => "Suturing",
            Task::NeedlePassing => "Needle Passing",
            Task::KnotTying => "Knot Tying",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "suturing" => Ok(Task::Suturing),
            "needlepassing" => Ok(Task::NeedlePassing),
            "knottying" => Ok(Task::KnotTying),
            _ => Err(format!(
                "unknown task {s:?} (expected Suturing, Needle_Passing or Knot_Tying)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GestureSegment {
    pub task: Task,
    pub subject: String,
    pub trial: u32,
    pub start_frame: u32,
    pub end_frame: u32,
    pub label: GestureLabel,
}

impl GestureSegment {
    /// Inclusive duration in source frames.
    pub fn duration_frames(&self) -> u32 {
        self.end_frame - self.start_frame + 1
    }

    fn validate(&self) -> Result<(), IngestError> {
        if self.trial < 1 {
            return Err(IngestError::Segment(format!("trial must be >= 1, got {}", self.trial)));
        }
        if self.start_frame < 1 || self.end_frame < self.start_frame {
            return Err(IngestError::Segment(format!(
                "frames [{}, {}] must satisfy 1 <= start <= end",
                self.start_frame, self.end_frame
            )));
        }
        Ok(())
    }
}

/// Parse a transcript, one `start end G<k>` triple per non-blank line.
pub fn parse_transcript(
    text: &str,
    task: Task,
    subject: &str,
    trial: u32,
) -> Result<Vec<GestureSegment>, IngestError> {
    let mut segments = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 3 {
            return Err(IngestError::Parse {
                line,
                reason: format!("expected 3 fields, found {}", tokens.len()),
            });
        }
        let frame = |tok: &str| {
            tok.parse::<u32>().map_err(|_| IngestError::Parse {
                line,
                reason: format!("invalid frame number {tok:?}"),
            })
        };
        let start_frame = frame(tokens[0])?;
        let end_frame = frame(tokens[1])?;
        let label = tokens[2].parse::<GestureLabel>().map_err(|_| IngestError::Label {
            line,
            token: tokens[2].to_string(),
        })?;
        let seg = GestureSegment {
            task,
            subject: subject.to_string(),
            trial,
            start_frame,
            end_frame,
            label,
        };
        seg.validate().map_err(|e| IngestError::Parse {
            line,
            reason: e.to_string(),
        })?;
        segments.push(seg);
    }
    segments.sort_by_key(|s| s.start_frame);
    for pair in segments.windows(2) {
        if pair[1].start_frame <= pair[0].end_frame {
            return Err(IngestError::Overlap {
                a_start: pair[0].start_frame,
                a_end: pair[0].end_frame,
                b_start: pair[1].start_frame,
                b_end: pair[1].end_frame,
            });
        }
    }
    Ok(segments)
}

/// Inverse of [`parse_transcript`].
pub fn format_transcript(segments: &[GestureSegment]) -> String {
    segments
        .iter()
        .map(|s| format!("{} {} {}\n", s.start_frame, s.end_frame, s.label))
        .collect()
}

/// Split a JIGSAWS-style trial name such as `Needle_Passing_D003`.
pub fn parse_trial_name(name: &str) -> Result<(Task, String, u32), IngestError> {
    let bad = || IngestError::TrialName(name.to_string());
    let (task, rest) = name.rsplit_once('_').ok_or_else(bad)?;
    let task: Task = task.parse().map_err(|_| bad())?;
    if rest.len() < 4 {
        return Err(bad());
    }
    let (subject, trial) = rest.split_at(rest.len() - 3);
    if subject.is_empty() || !trial.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let trial: u32 = trial.parse().map_err(|_| bad())?;
    if trial == 0 {
        return Err(bad());
    }
    Ok((task, subject.to_string(), trial))
}

pub fn trial_name(task: Task, subject: &str, trial: u32) -> String {
    format!("{task}_{subject}{trial:03}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClipStatus {
    Kept,
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipMeta {
    pub segment: GestureSegment,
    pub sample_rate_hz: u32,
    pub frame_count: u32,
    pub status: ClipStatus,
}

impl ClipMeta {
    /// Directory name used for this clip's frames and flow planes.
    pub fn clip_id(&self) -> String {
        let s = &self.segment;
        format!(
            "{}_{:06}_{:06}",
            trial_name(s.task, &s.subject, s.trial),
            s.start_frame,
            s.end_frame
        )
    }

    pub fn is_kept(&self) -> bool {
        self.status == ClipStatus::Kept
    }
}

/// Frame count after re-timing `n` source frames to `target_hz`.
pub fn resampled_len(n: u32, target_hz: u32) -> u32 {
    ((n as u64 * target_hz as u64 * 2 + SOURCE_RATE_HZ as u64) / (2 * SOURCE_RATE_HZ as u64)) as u32
}

/// Decide sampling rate, frame count and inclusion for one gesture.
pub fn plan_clip(segment: &GestureSegment) -> Result<ClipMeta, IngestError> {
    segment.validate()?;
    let duration = segment.duration_frames();
    let (rate, frames) = if duration < BOOST_BELOW_FRAMES {
        (BOOST_RATE_HZ, resampled_len(duration, BOOST_RATE_HZ))
    } else {
        (SOURCE_RATE_HZ, duration)
    };
    let status = if frames < MIN_CLIP_FRAMES {
        ClipStatus::Excluded
    } else {
        ClipStatus::Kept
    };
    Ok(ClipMeta {
        segment: segment.clone(),
        sample_rate_hz: rate,
        frame_count: frames,
        status,
    })
}

/// Source indices for nearest-preceding-frame temporal resampling.
pub fn resample_indices(n: usize, target_hz: u32) -> Result<Vec<usize>, IngestError> {
    if target_hz != SOURCE_RATE_HZ && target_hz != BOOST_RATE_HZ {
        return Err(IngestError::Rate(target_hz));
    }
    if n == 0 {
        return Err(IngestError::EmptyClip);
    }
    let out = resampled_len(n as u32, target_hz) as usize;
    Ok((0..out)
        .map(|k| (k * SOURCE_RATE_HZ as usize / target_hz as usize).min(n - 1))
        .collect())
}

pub fn resample_frames<T: Clone>(frames: &[T], target_hz: u32) -> Result<Vec<T>, IngestError> {
    Ok(resample_indices(frames.len(), target_hz)?
        .into_iter()
        .map(|i| frames[i].clone())
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    task: Task,
    subject: String,
    trial: u32,
    start: u32,
    end: u32,
    label: String,
    rate: u32,
    frames: u32,
    status: ClipStatus,
}

pub fn write_manifest(path: &Path, clips: &[ClipMeta]) -> Result<(), IngestError> {
    let wrap = |source| IngestError::Manifest {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for c in clips {
        let s = &c.segment;
        w.serialize(ManifestRow {
            task: s.task,
            subject: s.subject.clone(),
            trial: s.trial,
            start: s.start_frame,
            end: s.end_frame,
            label: s.label.to_string(),
            rate: c.sample_rate_hz,
            frames: c.frame_count,
            status: c.status,
        })
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| wrap(e.into()))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipMeta>, IngestError> {
    let wrap = |source| IngestError::Manifest {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    let mut clips = Vec::new();
    for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(wrap)?;
        let label = row.label.parse::<GestureLabel>().map_err(|_| IngestError::ManifestRow {
            row: i + 1,
            reason: format!("unknown gesture label {:?}", row.label),
        })?;
        let segment = GestureSegment {
            task: row.task,
            subject: row.subject,
            trial: row.trial,
            start_frame: row.start,
            end_frame: row.end,
            label,
        };
        segment.validate().map_err(|e| IngestError::ManifestRow {
            row: i + 1,
            reason: e.to_string(),
        })?;
        clips.push(ClipMeta {
            segment,
            sample_rate_hz: row.rate,
            frame_count: row.frames,
            status: row.status,
        });
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(start: u32, end: u32) -> GestureSegment {
        GestureSegment {
            task: Task::Suturing,
            subject: "B".into(),
            trial: 1,
            start_frame: start,
            end_frame: end,
            label: GestureLabel::new(1).unwrap(),
        }
    }

    #[test]
    fn vocabulary_has_fifteen_distinct_ids() {
        let ids: Vec<u8> = GestureLabel::all().map(|g| g.id()).collect();
        assert_eq!(ids, (1..=15).collect::<Vec<_>>());
        // G2 and G12 share a description but stay separate classes.
        let g2 = GestureLabel::new(2).unwrap();
        let g12 = GestureLabel::new(12).unwrap();
        assert_eq!(g2.description(), g12.description());
        assert_ne!(g2.index(), g12.index());
        assert!(GestureLabel::new(0).is_none());
        assert!(GestureLabel::new(16).is_none());
    }

    #[test]
    fn parses_two_line_transcript() {
        let segs = parse_transcript("80 328 G1\n329 385 G5", Task::Suturing, "B", 1).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].start_frame, segs[0].end_frame, segs[0].label.id()), (80, 328, 1));
        assert_eq!((segs[1].start_frame, segs[1].end_frame, segs[1].label.id()), (329, 385, 5));
    }

    #[test]
    fn empty_transcript_is_empty() {
        assert!(parse_transcript("", Task::KnotTying, "C", 2).unwrap().is_empty());
        assert!(parse_transcript("\n  \n", Task::KnotTying, "C", 2).unwrap().is_empty());
    }

    #[test]
    fn unknown_label_names_token() {
        let err = parse_transcript("80 328 G99", Task::Suturing, "B", 1).unwrap_err();
        match err {
            IngestError::Label { token, line } => {
                assert_eq!(token, "G99");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_transcript("1 10 G1\n11 G2\n", Task::Suturing, "B", 1).unwrap_err();
        assert!(matches!(err, IngestError::Parse { line: 2, .. }), "{err:?}");
        let err = parse_transcript("1 x G1", Task::Suturing, "B", 1).unwrap_err();
        assert!(matches!(err, IngestError::Parse { line: 1, .. }));
        let err = parse_transcript("10 5 G1", Task::Suturing, "B", 1).unwrap_err();
        assert!(matches!(err, IngestError::Parse { line: 1, .. }));
    }

    #[test]
    fn overlap_rejected_and_unsorted_input_sorted() {
        let err = parse_transcript("1 10 G1\n10 20 G2", Task::Suturing, "B", 1).unwrap_err();
        assert!(matches!(err, IngestError::Overlap { .. }));
        let segs = parse_transcript("30 40 G3\n1 10 G1", Task::Suturing, "B", 1).unwrap();
        assert_eq!(segs[0].start_frame, 1);
    }

    #[test]
    fn plan_clip_examples() {
        let c = plan_clip(&seg(1, 80)).unwrap();
        assert_eq!((c.sample_rate_hz, c.frame_count, c.status), (30, 80, ClipStatus::Kept));
        let c = plan_clip(&seg(1, 24)).unwrap();
        assert_eq!((c.sample_rate_hz, c.frame_count, c.status), (40, 32, ClipStatus::Kept));
        let c = plan_clip(&seg(1, 9)).unwrap();
        assert_eq!((c.sample_rate_hz, c.frame_count, c.status), (40, 12, ClipStatus::Excluded));
    }

    #[test]
    fn resample_examples() {
        let frames: Vec<u32> = (0..30).collect();
        assert_eq!(resample_frames(&frames, 30).unwrap(), frames);
        let idx = resample_indices(24, 40).unwrap();
        assert_eq!(idx.len(), 32);
        assert!(idx.iter().enumerate().all(|(k, &i)| i == k * 3 / 4));
        assert_eq!(resample_indices(3, 40).unwrap(), vec![0, 0, 1, 2]);
        assert!(matches!(resample_indices(0, 40), Err(IngestError::EmptyClip)));
        assert!(matches!(resample_indices(5, 25), Err(IngestError::Rate(25))));
    }

    /// Brute force: walk the 30 Hz time grid and pick the latest source frame
    /// whose timestamp does not exceed the output timestamp.
    fn brute_force_indices(n: usize, target: usize) -> Vec<usize> {
        let count = ((n * target) as f64 / 30.0).round() as usize;
        (0..count)
            .map(|k| {
                let mut i = 0;
                // (i+1)/30 <= k/target  <=>  (i+1)*target <= k*30
                while i + 1 < n && (i + 1) * target <= k * 30 {
                    i += 1;
                }
                i
            })
            .collect()
    }

    #[test]
    fn resample_matches_time_grid_oracle() {
        for n in 1..300 {
            for &t in &[30u32, 40] {
                assert_eq!(resample_indices(n, t).unwrap(), brute_force_indices(n, t as usize), "n={n} t={t}");
            }
        }
    }

    #[test]
    fn resampled_count_matches_rounding_rule() {
        for n in 1..1000u32 {
            for &t in &[30u32, 40] {
                let expect = (n as f64 * t as f64 / 30.0).round() as usize;
                assert_eq!(resample_indices(n as usize, t).unwrap().len(), expect);
            }
        }
    }

    #[test]
    fn trial_names_round_trip() {
        assert_eq!(
            parse_trial_name("Needle_Passing_D003").unwrap(),
            (Task::NeedlePassing, "D".to_string(), 3)
        );
        assert_eq!(parse_trial_name(&trial_name(Task::KnotTying, "I", 5)).unwrap().2, 5);
        assert!(parse_trial_name("Suturing").is_err());
        assert!(parse_trial_name("Suturing_B000").is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let clips: Vec<ClipMeta> = [(1, 80), (81, 90), (91, 110)]
            .iter()
            .map(|&(a, b)| plan_clip(&seg(a, b)).unwrap())
            .collect();
        write_manifest(&path, &clips).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("task,subject,trial,start,end,label,rate,frames,status\n"));
        assert_eq!(read_manifest(&path).unwrap(), clips);
    }

    proptest! {
        #[test]
        fn transcript_round_trip(lens in proptest::collection::vec((0u32..50, 1u32..200, 1u8..=15), 0..20)) {
            let mut start = 1u32;
            let mut segs = Vec::new();
            for (gap, len, label) in lens {
                start += gap;
                segs.push(GestureSegment {
                    task: Task::NeedlePassing,
                    subject: "E".into(),
                    trial: 4,
                    start_frame: start,
                    end_frame: start + len - 1,
                    label: GestureLabel::new(label).unwrap(),
                });
                start += len;
            }
            let text = format_transcript(&segs);
            prop_assert_eq!(parse_transcript(&text, Task::NeedlePassing, "E", 4).unwrap(), segs);
        }
    }
}
