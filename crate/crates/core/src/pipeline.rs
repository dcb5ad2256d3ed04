//! Assembly of 20-channel flow chunks from stored magnitude/direction planes.
//!
//! A chunk covers `L = 10` consecutive flow pairs. Channels are time-major:
//! pair 0 magnitude, pair 0 direction, pair 1 magnitude, and so on. Planes
//! are brought to 256x256, scaled from 8-bit codes into `[0, 1]` and cropped
//! to 224x224.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::encode::{plane_path, read_plane, EncodeError, ImageFormatKind, PlaneKind};
use crate::raster::Plane;

/// Flow pairs per chunk.
pub const STACK_PAIRS: usize = 10;
pub const CHUNK_CHANNELS: usize = 2 * STACK_PAIRS;
pub const STACK_SIZE: usize = 256;
pub const CROP_SIZE: usize = 224;
pub const MAX_CROP_OFFSET: usize = STACK_SIZE - CROP_SIZE;
pub const CENTER_OFFSET: usize = MAX_CROP_OFFSET / 2;
pub const TEST_CHUNKS: usize = 20;
pub const TRAIN_CROPS_PER_STACK: usize = 5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("clip {clip} has {pairs} flow pairs, need at least {need}")]
    Insufficient { clip: String, pairs: usize, need: usize },
    #[error("clip {clip}: no flow planes found in {dir}")]
    Missing { clip: String, dir: String },
    #[error("clip {clip}: magnitude and direction planes differ at pair {pair}")]
    Inconsistent { clip: String, pair: usize },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// Stored flow planes of one clip, at 256x256.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPlanes {
    pub clip_id: String,
    /// `(magnitude, direction)` per consecutive frame pair.
    pub pairs: Vec<(Plane<u8>, Plane<u8>)>,
}

impl ClipPlanes {
    pub fn new(clip_id: impl Into<String>, pairs: Vec<(Plane<u8>, Plane<u8>)>) -> Self {
        let pairs = pairs
            .into_iter()
            .map(|(m, d)| {
                (
                    m.resize_bilinear(STACK_SIZE, STACK_SIZE),
                    d.resize_bilinear(STACK_SIZE, STACK_SIZE),
                )
            })
            .collect();
        Self {
            clip_id: clip_id.into(),
            pairs,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// Last valid chunk start.
    pub fn last_start(&self) -> Result<usize, PipelineError> {
        self.check_len(0)?;
        Ok(self.pairs.len() - STACK_PAIRS)
    }

    fn check_len(&self, start: usize) -> Result<(), PipelineError> {
        if self.pairs.len() < start + STACK_PAIRS {
            return Err(PipelineError::Insufficient {
                clip: self.clip_id.clone(),
                pairs: self.pairs.len(),
                need: start + STACK_PAIRS,
            });
        }
        Ok(())
    }
}

/// Read `mag_NNNN` / `dir_NNNN` planes from `dir`, starting at index 0 and
/// stopping at the first missing index.
pub fn load_clip_planes(dir: &Path, clip_id: &str) -> Result<ClipPlanes, PipelineError> {
    let mut pairs = Vec::new();
    for i in 0.. {
        let Some(format) = [ImageFormatKind::Png, ImageFormatKind::Jpeg]
            .into_iter()
            .find(|&f| plane_path(dir, PlaneKind::Magnitude, i, f).exists())
        else {
            break;
        };
        let mag = read_plane(&plane_path(dir, PlaneKind::Magnitude, i, format))?;
        let dirp = read_plane(&plane_path(dir, PlaneKind::Direction, i, format))?;
        if mag.plane.dims() != dirp.plane.dims() {
            return Err(PipelineError::Inconsistent {
                clip: clip_id.to_string(),
                pair: i,
            });
        }
        pairs.push((mag.plane, dirp.plane));
    }
    if pairs.is_empty() {
        return Err(PipelineError::Missing {
            clip: clip_id.to_string(),
            dir: dir.display().to_string(),
        });
    }
    Ok(ClipPlanes::new(clip_id, pairs))
}

/// Twenty 256x256 planes with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    pub data: Vec<f32>,
}

impl FlowStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = STACK_SIZE * STACK_SIZE;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub x: usize,
    pub y: usize,
}

impl CropSpec {
    pub const CENTER: CropSpec = CropSpec {
        x: CENTER_OFFSET,
        y: CENTER_OFFSET,
    };
}

/// The network input: 20 x 224 x 224, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowChunk {
    pub data: Vec<f32>,
}

impl FlowChunk {
    pub const LEN: usize = CHUNK_CHANNELS * CROP_SIZE * CROP_SIZE;

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = CROP_SIZE * CROP_SIZE;
        &self.data[c * n..(c + 1) * n]
    }
}

#[inline]
fn code_to_unit(q: u8) -> f32 {
    q as f32 / 255.0
}

/// Direction code under a horizontal mirror: `(u, v) -> (-u, v)` turns `θ`
/// into `π - θ`.
#[inline]
fn mirrored_direction(value: f32) -> f32 {
    (0.5 - value).rem_euclid(1.0)
}

pub fn build_stack(clip: &ClipPlanes, start: usize) -> Result<FlowStack, PipelineError> {
    clip.check_len(start)?;
    let mut data = Vec::with_capacity(CHUNK_CHANNELS * STACK_SIZE * STACK_SIZE);
    for (mag, dir) in &clip.pairs[start..start + STACK_PAIRS] {
        data.extend(mag.data.iter().map(|&q| code_to_unit(q)));
        data.extend(dir.data.iter().map(|&q| code_to_unit(q)));
    }
    Ok(FlowStack { data })
}

/// Crop (and optionally mirror) a stack into a chunk.
pub fn crop_stack(stack: &FlowStack, crop: CropSpec, flip: bool) -> FlowChunk {
    assert!(crop.x <= MAX_CROP_OFFSET && crop.y <= MAX_CROP_OFFSET);
    let mut data = vec![0.0f32; FlowChunk::LEN];
    for c in 0..CHUNK_CHANNELS {
        let src = stack.channel(c);
        let is_dir = c % 2 == 1;
        let dst = &mut data[c * CROP_SIZE * CROP_SIZE..(c + 1) * CROP_SIZE * CROP_SIZE];
        for y in 0..CROP_SIZE {
            let row = &src[(y + crop.y) * STACK_SIZE + crop.x..(y + crop.y) * STACK_SIZE + crop.x + CROP_SIZE];
            let out = &mut dst[y * CROP_SIZE..(y + 1) * CROP_SIZE];
            if flip {
                for (o, &v) in out.iter_mut().zip(row.iter().rev()) {
                    *o = if is_dir { mirrored_direction(v) } else { v };
                }
            } else {
                out.copy_from_slice(row);
            }
        }
    }
    FlowChunk { data }
}

/// Write one chunk straight from the 8-bit planes into `out`
/// (`FlowChunk::LEN` values); equivalent to `crop_stack(build_stack(..))`.
pub fn assemble_chunk(
    clip: &ClipPlanes,
    start: usize,
    crop: CropSpec,
    flip: bool,
    out: &mut [f32],
) -> Result<(), PipelineError> {
    clip.check_len(start)?;
    assert!(crop.x <= MAX_CROP_OFFSET && crop.y <= MAX_CROP_OFFSET);
    assert_eq!(out.len(), FlowChunk::LEN);
    let lut: Vec<f32> = (0..=255u8).map(code_to_unit).collect();
    let plane_len = CROP_SIZE * CROP_SIZE;
    for (p, (mag, dir)) in clip.pairs[start..start + STACK_PAIRS].iter().enumerate() {
        for (k, plane) in [mag, dir].into_iter().enumerate() {
            let is_dir = k == 1;
            let dst = &mut out[(2 * p + k) * plane_len..(2 * p + k + 1) * plane_len];
            for y in 0..CROP_SIZE {
                let off = (y + crop.y) * STACK_SIZE + crop.x;
                let row = &plane.data[off..off + CROP_SIZE];
                let o = &mut dst[y * CROP_SIZE..(y + 1) * CROP_SIZE];
                if flip {
                    for (d, &q) in o.iter_mut().zip(row.iter().rev()) {
                        *d = if is_dir { mirrored_direction(lut[q as usize]) } else { lut[q as usize] };
                    }
                } else {
                    for (d, &q) in o.iter_mut().zip(row) {
                        *d = lut[q as usize];
                    }
                }
            }
        }
    }
    Ok(())
}

/// One training draw: uniform start, uniform crop offsets, optional mirror.
pub fn sample_train_chunk<R: Rng>(
    clip: &ClipPlanes,
    rng: &mut R,
    allow_flip: bool,
) -> Result<(usize, CropSpec, bool), PipelineError> {
    let last = clip.last_start()?;
    let start = rng.gen_range(0..=last);
    let crop = random_crop(rng);
    let flip = allow_flip && rng.gen::<bool>();
    Ok((start, crop, flip))
}

pub fn random_crop<R: Rng>(rng: &mut R) -> CropSpec {
    CropSpec {
        x: rng.gen_range(0..=MAX_CROP_OFFSET),
        y: rng.gen_range(0..=MAX_CROP_OFFSET),
    }
}

/// `n` evenly spaced starts `round(k·S/(n-1))` over `0..=S`.
pub fn sample_test_chunks(last_start: usize, n: usize) -> Vec<usize> {
    match n {
        0 => Vec::new(),
        1 => vec![last_start / 2],
        _ => (0..n)
            .map(|k| ((k * last_start) as f64 / (n - 1) as f64).round() as usize)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip_with(pairs: usize) -> ClipPlanes {
        let pairs = (0..pairs)
            .map(|p| {
                let mag = Plane::from_vec(STACK_SIZE, STACK_SIZE, (0..STACK_SIZE * STACK_SIZE).map(|i| ((i + p) % 256) as u8).collect());
                let dir = Plane::filled(STACK_SIZE, STACK_SIZE, (p * 10) as u8);
                (mag, dir)
            })
            .collect();
        ClipPlanes::new("clip", pairs)
    }

    #[test]
    fn stack_windows() {
        let c = clip_with(14);
        let s = build_stack(&c, 0).unwrap();
        assert_eq!(s.data.len(), 20 * 256 * 256);
        assert_eq!(s.channel(1)[0], 0.0);
        assert_eq!(s.channel(19)[0], 90.0 / 255.0);
        let s = build_stack(&c, 4).unwrap();
        assert_eq!(s.channel(1)[0], 40.0 / 255.0);
        assert_eq!(s.channel(19)[0], 130.0 / 255.0);
        let err = build_stack(&c, 5).unwrap_err();
        assert!(err.to_string().contains("clip"));
    }

    #[test]
    fn scaling_rule() {
        let pairs = vec![(Plane::filled(256, 256, 255u8), Plane::filled(256, 256, 128u8)); 10];
        let mut pairs = pairs;
        pairs[1].0 = Plane::filled(256, 256, 0u8);
        let s = build_stack(&ClipPlanes::new("c", pairs), 0).unwrap();
        assert_eq!(s.channel(0)[7], 1.0);
        assert_eq!(s.channel(2)[7], 0.0);
        assert_eq!(s.channel(1)[7], 128.0 / 255.0);
    }

    #[test]
    fn planes_rescaled_to_stack_size() {
        let pairs = vec![(Plane::filled(320, 240, 9u8), Plane::filled(320, 240, 3u8)); 10];
        let c = ClipPlanes::new("c", pairs);
        assert_eq!(c.pairs[0].0.dims(), (256, 256));
        assert!(c.pairs[0].0.data.iter().all(|&v| v == 9));
    }

    #[test]
    fn flip_matches_encoding_of_mirrored_motion() {
        use crate::encode::encode_flow;
        use crate::flow::FlowField;
        let n = STACK_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (mut orig, mut mirr) = (Vec::new(), Vec::new());
        for _ in 0..STACK_PAIRS {
            let mut f = FlowField::zeros(n, n);
            for k in 0..n * n {
                f.u[k] = rng.gen_range(-6.0..6.0);
                f.v[k] = rng.gen_range(-6.0..6.0);
            }
            let mut m = FlowField::zeros(n, n);
            for y in 0..n {
                for x in 0..n {
                    m.u[y * n + x] = -f.u[y * n + n - 1 - x];
                    m.v[y * n + x] = f.v[y * n + n - 1 - x];
                }
            }
            let (a, b) = encode_flow(&f, 20.0).unwrap();
            orig.push((a.plane, b.plane));
            let (a, b) = encode_flow(&m, 20.0).unwrap();
            mirr.push((a.plane, b.plane));
        }
        let crop = CropSpec { x: 5, y: 17 };
        let mirrored_crop = CropSpec { x: MAX_CROP_OFFSET - crop.x, y: crop.y };
        let mut flipped = vec![0.0; FlowChunk::LEN];
        assemble_chunk(&ClipPlanes::new("a", orig), 0, crop, true, &mut flipped).unwrap();
        let mut direct = vec![0.0; FlowChunk::LEN];
        assemble_chunk(&ClipPlanes::new("b", mirr), 0, mirrored_crop, false, &mut direct).unwrap();
        let plane = CROP_SIZE * CROP_SIZE;
        for (i, (a, b)) in flipped.iter().zip(&direct).enumerate() {
            if (i / plane).is_multiple_of(2) {
                assert_eq!(a, b, "magnitude at {i}");
            } else {
                // one quantization step on the circle
                let d = (a - b).rem_euclid(1.0);
                assert!(d.min(1.0 - d) <= 1.0 / 255.0 + 1e-6, "direction at {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fast_assembly_matches_crop_of_stack() {
        let c = clip_with(12);
        for &(start, crop, flip) in &[
            (0usize, CropSpec { x: 0, y: 0 }, false),
            (2, CropSpec { x: 32, y: 5 }, false),
            (1, CropSpec::CENTER, true),
        ] {
            let expect = crop_stack(&build_stack(&c, start).unwrap(), crop, flip);
            let mut out = vec![0.0; FlowChunk::LEN];
            assemble_chunk(&c, start, crop, flip, &mut out).unwrap();
            assert_eq!(out, expect.data);
        }
    }

    #[test]
    fn mirrored_direction_is_pi_minus_theta() {
        // θ = 0 (rightward) becomes π (leftward); θ = π/2 (downward) stays.
        assert_eq!(mirrored_direction(0.0), 0.5);
        assert_eq!(mirrored_direction(0.25), 0.25);
        assert_eq!(mirrored_direction(0.5), 0.0);
        assert!((mirrored_direction(0.75) - 0.75).abs() < 1e-7);
    }

    #[test]
    fn single_valid_start() {
        let c = clip_with(10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (start, crop, flip) = sample_train_chunk(&c, &mut rng, false).unwrap();
            assert_eq!(start, 0);
            assert!(crop.x <= 32 && crop.y <= 32);
            assert!(!flip);
        }
        assert!(sample_train_chunk(&clip_with(9), &mut rng, false).is_err());
    }

    #[test]
    fn seeded_draws_reproduce() {
        let c = clip_with(30);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_train_chunk(&c, &mut rng, true).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn test_starts() {
        assert_eq!(sample_test_chunks(0, 20), vec![0; 20]);
        assert_eq!(sample_test_chunks(19, 20), (0..20).collect::<Vec<_>>());
        assert_eq!(sample_test_chunks(38, 20), (0..20).map(|k| 2 * k).collect::<Vec<_>>());
    }
}
