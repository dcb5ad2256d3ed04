//! Synthetic textured clips with known parametric motion.
//!
//! Every clip shows a window onto a random band-limited texture that
//! translates, rotates or scales at a constant per-frame rate. The per-pair
//! ground-truth flow is analytic, which makes these clips both an oracle for
//! the flow kernel and a small labelled corpus for the classifier.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::FlowField;
use crate::ingest::{ClipMeta, ClipStatus, GestureLabel, GestureSegment, Task};
use crate::raster::{Frame, Plane};

pub const NUM_MOTION_CLASSES: usize = 8;
pub const SYNTH_SUBJECTS: [&str; 8] = ["B", "C", "D", "E", "F", "G", "H", "I"];
pub const SYNTH_TRIALS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionKind {
    TranslateL,
    TranslateR,
    TranslateU,
    TranslateD,
    RotateCW,
    RotateCCW,
    Expand,
    Contract,
}

impl MotionKind {
    pub const ALL: [MotionKind; NUM_MOTION_CLASSES] = [
        MotionKind::TranslateL,
        MotionKind::TranslateR,
        MotionKind::TranslateU,
        MotionKind::TranslateD,
        MotionKind::RotateCW,
        MotionKind::RotateCCW,
        MotionKind::Expand,
        MotionKind::Contract,
    ];

    /// Class id in `1..=8`.
    pub fn id(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8 + 1
    }

    pub fn from_id(id: u8) -> Option<MotionKind> {
        Self::ALL.get((id as usize).wrapping_sub(1)).copied()
    }

    pub fn label(self) -> GestureLabel {
        GestureLabel::new(self.id()).unwrap()
    }

    /// Per-frame rate range: px/frame for translations, rad/frame for
    /// rotations, relative scale change per frame for expansion/contraction.
    pub fn rate_range(self) -> (f64, f64) {
        match self {
            MotionKind::TranslateL | MotionKind::TranslateR | MotionKind::TranslateU | MotionKind::TranslateD => {
                (1.0, 4.0)
            }
            MotionKind::RotateCW | MotionKind::RotateCCW => (0.008, 0.02),
            MotionKind::Expand | MotionKind::Contract => (0.006, 0.015),
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A concrete stationary motion: frame `t` maps frame-0 point `p` to `M^t(p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Translate { dx: f64, dy: f64 },
    /// Positive angles turn clockwise on screen (image y axis points down).
    Rotate { radians: f64 },
    /// Per-frame scale factor about the centre.
    Scale { factor: f64 },
}

impl Motion {
    pub fn of(kind: MotionKind, rate: f64) -> Motion {
        match kind {
            MotionKind::TranslateL => Motion::Translate { dx: -rate, dy: 0.0 },
            MotionKind::TranslateR => Motion::Translate { dx: rate, dy: 0.0 },
            MotionKind::TranslateU => Motion::Translate { dx: 0.0, dy: -rate },
            MotionKind::TranslateD => Motion::Translate { dx: 0.0, dy: rate },
            MotionKind::RotateCW => Motion::Rotate { radians: rate },
            MotionKind::RotateCCW => Motion::Rotate { radians: -rate },
            MotionKind::Expand => Motion::Scale { factor: 1.0 + rate },
            MotionKind::Contract => Motion::Scale { factor: 1.0 - rate },
        }
    }

    /// Inverse of `M^t`, applied to a frame-t point relative to the centre.
    fn inverse_power(&self, t: usize, rx: f64, ry: f64) -> (f64, f64) {
        let t = t as f64;
        match *self {
            Motion::Translate { dx, dy } => (rx - t * dx, ry - t * dy),
            Motion::Rotate { radians } => {
                let (s, c) = (-radians * t).sin_cos();
                (c * rx - s * ry, s * rx + c * ry)
            }
            Motion::Scale { factor } => {
                let k = factor.powf(-t);
                (k * rx, k * ry)
            }
        }
    }

    /// Displacement of a frame-t point between frame t and t+1 (same for every t).
    pub fn displacement(&self, rx: f64, ry: f64) -> (f64, f64) {
        match *self {
            Motion::Translate { dx, dy } => (dx, dy),
            Motion::Rotate { radians } => {
                let (s, c) = radians.sin_cos();
                (c * rx - s * ry - rx, s * rx + c * ry - ry)
            }
            Motion::Scale { factor } => ((factor - 1.0) * rx, (factor - 1.0) * ry),
        }
    }

    pub fn true_flow(&self, width: usize, height: usize) -> FlowField {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let mut f = FlowField::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = self.displacement(x as f64 - cx, y as f64 - cy);
                f.u[y * width + x] = u as f32;
                f.v[y * width + x] = v as f32;
            }
        }
        f
    }
}

/// Smoothstep value noise summed over four octaves, lightly blurred and
/// stretched to 0..255.
pub fn gen_texture_f32(width: usize, height: usize, seed: u64) -> Plane<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_u64);
    let mut acc = vec![0.0f64; width * height];
    for &(cell, amp) in &[(2usize, 1.0f64), (4, 1.0), (8, 0.8), (16, 0.6)] {
        let gw = width / cell + 2;
        let gh = height / cell + 2;
        let grid: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>() - 0.5).collect();
        for y in 0..height {
            let fy = y as f64 / cell as f64;
            let y0 = fy.floor() as usize;
            let ty = fy - y0 as f64;
            // smoothstep interpolation keeps octaves free of gradient seams
            let sy = ty * ty * (3.0 - 2.0 * ty);
            for x in 0..width {
                let fx = x as f64 / cell as f64;
                let x0 = fx.floor() as usize;
                let tx = fx - x0 as f64;
                let sx = tx * tx * (3.0 - 2.0 * tx);
                let g = |i: usize, j: usize| grid[j * gw + i];
                let top = g(x0, y0) * (1.0 - sx) + g(x0 + 1, y0) * sx;
                let bot = g(x0, y0 + 1) * (1.0 - sx) + g(x0 + 1, y0 + 1) * sx;
                acc[y * width + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
    }
    let smooth = crate::flow::gaussian_blur(
        &Plane::from_vec(width, height, acc.iter().map(|&v| v as f32).collect()),
        0.8,
    );
    // stretch the 0.1..99.9th percentiles onto 0..255, clipping the tails
    let mut sorted = smooth.data.clone();
    sorted.sort_by(f32::total_cmp);
    let lo = sorted[sorted.len() / 1000];
    let hi = sorted[sorted.len() - 1 - sorted.len() / 1000];
    let span = (hi - lo).max(1e-12);
    Plane::from_vec(
        width,
        height,
        smooth
            .data
            .iter()
            .map(|&v| ((v - lo) / span * 255.0).clamp(0.0, 255.0))
            .collect(),
    )
}

/// Square texture frame of side `size`.
pub fn gen_texture(size: usize, seed: u64) -> Frame {
    assert!(size >= 64, "texture size must be >= 64");
    Frame::gray(gen_texture_f32(size, size, seed).to_u8())
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub frames: Vec<Frame>,
    pub kind: MotionKind,
    pub motion: Motion,
    pub true_flow: Vec<FlowField>,
}

/// Render `length` frames of a `width`x`height` window onto a texture twice
/// the larger side, moving by `motion` each frame.
pub fn render_clip(motion: Motion, length: usize, width: usize, height: usize, seed: u64) -> (Vec<Frame>, FlowField) {
    let tex_side = 2 * width.max(height);
    let texture = gen_texture_f32(tex_side, tex_side, seed);
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let tc = (tex_side as f64 - 1.0) / 2.0;
    let frames = (0..length)
        .map(|t| {
            let mut data = vec![0u8; width * height];
            for y in 0..height {
                for x in 0..width {
                    let (sx, sy) = motion.inverse_power(t, x as f64 - cx, y as f64 - cy);
                    let v = texture.sample_bilinear((sx + tc) as f32, (sy + tc) as f32);
                    data[y * width + x] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
            Frame::gray(Plane::from_vec(width, height, data))
        })
        .collect();
    (frames, motion.true_flow(width, height))
}

pub fn gen_clip(kind: MotionKind, length: usize, size: usize, seed: u64) -> SynthClip {
    assert!(length >= 12, "synthetic clips need at least 12 frames");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = kind.rate_range();
    let rate = rng.gen_range(lo..hi);
    let motion = Motion::of(kind, rate);
    let (frames, flow) = render_clip(motion, length, size, size, rng.gen());
    SynthClip {
        frames,
        kind,
        motion,
        true_flow: vec![flow; length - 1],
    }
}

/// One planned corpus clip.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub meta: ClipMeta,
    pub kind: MotionKind,
    pub seed: u64,
}

/// Plan `8 * per_class` clips over 8 pseudo-subjects x 5 pseudo-trials.
/// Replicate `r` of every class goes to trial `r % 5 + 1` and subject `(r / 5) % 8`,
/// so each trial receives the same number of clips of every class when
/// `per_class` is a multiple of 5.
pub fn gen_corpus(per_class: usize, length: usize, seed: u64, task: Task) -> Vec<CorpusEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_start = std::collections::HashMap::<(usize, u32), u32>::new();
    let mut entries = Vec::with_capacity(per_class * NUM_MOTION_CLASSES);
    for r in 0..per_class {
        for kind in MotionKind::ALL {
            let trial = (r % SYNTH_TRIALS as usize) as u32 + 1;
            let subject = (r / SYNTH_TRIALS as usize) % SYNTH_SUBJECTS.len();
            let start = next_start.entry((subject, trial)).or_insert(1);
            let segment = GestureSegment {
                task,
                subject: SYNTH_SUBJECTS[subject].to_string(),
                trial,
                start_frame: *start,
                end_frame: *start + length as u32 - 1,
                label: kind.label(),
            };
            *start += length as u32;
            entries.push(CorpusEntry {
                meta: ClipMeta {
                    segment,
                    sample_rate_hz: crate::ingest::SOURCE_RATE_HZ,
                    frame_count: length as u32,
                    status: ClipStatus::Kept,
                },
                kind,
                seed: rng.gen(),
            });
        }
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_dev(d: &[u8]) -> f64 {
        let n = d.len() as f64;
        let m = d.iter().map(|&v| v as f64).sum::<f64>() / n;
        (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    fn ncc(a: &[u8], b: &[u8]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64 - ma, y as f64 - mb);
            num += x * y;
            da += x * x;
            db += y * y;
        }
        num / (da * db).sqrt()
    }

    #[test]
    fn texture_is_deterministic_and_contrasty() {
        let a = gen_texture(128, 5);
        assert_eq!(a, gen_texture(128, 5));
        assert!(std_dev(&a.data) > 30.0, "std {}", std_dev(&a.data));
        assert_eq!(*a.data.iter().max().unwrap(), 255);
        assert_eq!(*a.data.iter().min().unwrap(), 0);
    }

    #[test]
    fn textures_from_different_seeds_are_uncorrelated() {
        let textures: Vec<Frame> = (0..101).map(|s| gen_texture(128, s)).collect();
        for s in 0..100 {
            let c = ncc(&textures[s].data, &textures[s + 1].data);
            assert!(c.abs() < 0.2, "seeds {s},{}: ncc {c}", s + 1);
        }
    }

    #[test]
    fn no_flat_8x8_regions() {
        let t = gen_texture(128, 11);
        for by in 0..120 {
            for bx in 0..120 {
                let v0 = t.data[by * 128 + bx];
                let flat = (0..9).all(|j| (0..9).all(|i| t.data[(by + j) * 128 + bx + i] == v0));
                assert!(!flat, "flat region at ({bx},{by})");
            }
        }
    }

    #[test]
    fn analytic_fields() {
        let f = Motion::of(MotionKind::TranslateR, 2.0).true_flow(16, 16);
        assert!(f.u.iter().all(|&u| u == 2.0) && f.v.iter().all(|&v| v == 0.0));

        let rot = Motion::of(MotionKind::RotateCW, 0.02);
        let f = rot.true_flow(65, 65);
        let mag = |x: usize, y: usize| (f.u[y * 65 + x].hypot(f.v[y * 65 + x])) as f64;
        assert!(mag(32, 32) < 1e-6);
        assert!(mag(48, 32) > mag(40, 32));
        // rotation by 0.02 rad at radius 16: chord length 2·16·sin(0.01)
        assert!((mag(48, 32) - 32.0 * (0.01f64).sin()).abs() < 1e-4);

        let f = Motion::of(MotionKind::Expand, 0.01).true_flow(65, 65);
        assert_eq!((f.u[32 * 65 + 32], f.v[32 * 65 + 32]), (0.0, 0.0));
        assert!(f.u[32 * 65 + 64] > 0.0 && f.u[32 * 65] < 0.0);
        assert!(f.v[64 * 65 + 32] > 0.0 && f.v[32] < 0.0);
    }

    #[test]
    fn clip_frames_follow_the_motion() {
        let clip = gen_clip(MotionKind::TranslateR, 12, 64, 3);
        assert_eq!(clip.frames.len(), 12);
        assert_eq!(clip.true_flow.len(), 11);
        let Motion::Translate { dx, .. } = clip.motion else { panic!() };
        assert!((1.0..4.0).contains(&dx));
    }

    #[test]
    fn integer_translation_shifts_pixels_exactly() {
        let (frames, _) = render_clip(Motion::Translate { dx: 2.0, dy: -1.0 }, 3, 64, 64, 9);
        for y in 4..60 {
            for x in 4..60 {
                assert_eq!(frames[1].data[y * 64 + x], frames[0].data[(y + 1) * 64 + x - 2]);
            }
        }
    }

    #[test]
    fn corpus_layout() {
        let c = gen_corpus(40, 30, 7, Task::Suturing);
        assert_eq!(c.len(), 320);
        for trial in 1..=5 {
            let in_trial: Vec<_> = c.iter().filter(|e| e.meta.segment.trial == trial).collect();
            assert_eq!(in_trial.len(), 64);
            for k in MotionKind::ALL {
                assert_eq!(in_trial.iter().filter(|e| e.kind == k).count(), 8);
            }
        }
        let again = gen_corpus(40, 30, 7, Task::Suturing);
        assert!(c.iter().zip(&again).all(|(a, b)| a.seed == b.seed && a.meta == b.meta));
    }
}
