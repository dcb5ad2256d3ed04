//! Dense optical flow by multi-scale polynomial expansion (Farnebäck).

mod poly;
mod pyramid;
mod update;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Frame, Plane};

pub use poly::{poly_expansion, Coeffs, ExpansionBasis, PolyExpansion};
pub use pyramid::{gaussian_blur, gaussian_pyramid, level_dims, MIN_LEVEL_SIDE};
pub use update::displacement_update;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("frame sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid flow parameter: {0}")]
    Params(String),
    #[error("flow file {path}: {reason}")]
    File { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FarnebackParams {
    pub pyramid_scale: f64,
    pub levels: usize,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            pyramid_scale: 0.5,
            levels: 3,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.2,
        }
    }
}

impl FarnebackParams {
    pub fn validate(&self) -> Result<(), FlowError> {
        let err = |m: &str| Err(FlowError::Params(m.to_string()));
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return err("pyramid_scale must lie in (0, 1)");
        }
        if self.levels < 1 {
            return err("levels must be >= 1");
        }
        if self.iterations < 1 {
            return err("iterations must be >= 1");
        }
        if self.window_size < 1 || self.window_size.is_multiple_of(2) {
            return err("window_size must be a positive odd integer");
        }
        if self.poly_n < 3 || self.poly_n.is_multiple_of(2) {
            return err("poly_n must be an odd integer >= 3");
        }
        if !(self.poly_sigma > 0.0) || !self.poly_sigma.is_finite() {
            return err("poly_sigma must be positive");
        }
        Ok(())
    }
}

/// Per-pixel displacement `(u, v)` in pixels from the first frame to the second.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self {
            width,
            height,
            u: vec![u; width * height],
            v: vec![v; width * height],
        }
    }

    /// Bilinear upsampling to a finer level, with vectors multiplied by `gain`.
    pub fn resize(&self, width: usize, height: usize, gain: f32) -> FlowField {
        let up = |d: &[f32]| {
            Plane::from_vec(self.width, self.height, d.to_vec())
                .resize_bilinear(width, height)
                .data
                .into_iter()
                .map(|x| x * gain)
                .collect()
        };
        FlowField {
            width,
            height,
            u: up(&self.u),
            v: up(&self.v),
        }
    }

    /// Mean endpoint error against `truth`, skipping a `margin`-pixel border.
    pub fn mean_endpoint_error(&self, truth: &FlowField, margin: usize) -> f64 {
        assert_eq!((self.width, self.height), (truth.width, truth.height));
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in margin..self.height.saturating_sub(margin) {
            for x in margin..self.width.saturating_sub(margin) {
                let i = y * self.width + x;
                let du = (self.u[i] - truth.u[i]) as f64;
                let dv = (self.v[i] - truth.v[i]) as f64;
                sum += (du * du + dv * dv).sqrt();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.u.iter().chain(&self.v).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }

    /// Raw dump: `FLOW`, width, height, plane count (u32 LE each), then the
    /// `u` plane and the `v` plane as f32 LE.
    pub fn write_raw<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"FLOW")?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.u.len());
        for &x in self.u.iter().chain(&self.v) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<FlowField, FlowError> {
        let bad = |reason: &str| FlowError::File {
            path: String::new(),
            reason: reason.to_string(),
        };
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        if &header[0..4] != b"FLOW" {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        let (width, height, planes) = (word(4), word(8), word(12));
        if planes != 2 {
            return Err(bad("expected 2 planes"));
        }
        let n = width * height;
        let mut bytes = vec![0u8; 8 * n];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated payload"))?;
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FlowField {
            width,
            height,
            u: floats[..n].to_vec(),
            v: floats[n..].to_vec(),
        })
    }

    pub fn save_raw(&self, path: &Path) -> Result<(), FlowError> {
        let f = std::fs::File::create(path)?;
        self.write_raw(std::io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<FlowField, FlowError> {
        let f = std::fs::File::open(path)?;
        FlowField::read_raw(std::io::BufReader::new(f)).map_err(|e| match e {
            FlowError::File { reason, .. } => FlowError::File {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}

/// Pyramid of expansions for one frame; reused by both pairs a frame belongs to.
#[derive(Debug, Clone)]
pub struct ExpandedFrame {
    levels: Vec<PolyExpansion>,
}

impl ExpandedFrame {
    pub fn new(luma: &Plane<f32>, params: &FarnebackParams, basis: &ExpansionBasis) -> Self {
        let levels = gaussian_pyramid(luma, params.pyramid_scale, params.levels)
            .iter()
            .map(|p| poly_expansion(p, basis))
            .collect();
        Self { levels }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.levels[0].width, self.levels[0].height)
    }
}

/// Coarse-to-fine flow between two expanded frames.
pub fn flow_between(
    prev: &ExpandedFrame,
    next: &ExpandedFrame,
    params: &FarnebackParams,
) -> Result<FlowField, FlowError> {
    let (pw, ph) = prev.dims();
    let (nw, nh) = next.dims();
    if (pw, ph) != (nw, nh) {
        return Err(FlowError::DimensionMismatch(pw, ph, nw, nh));
    }
    let depth = prev.levels.len().min(next.levels.len());
    let mut flow: Option<FlowField> = None;
    for k in (0..depth).rev() {
        let (e1, e2) = (&prev.levels[k], &next.levels[k]);
        let mut current = match flow.take() {
            None => FlowField::zeros(e1.width, e1.height),
            Some(coarse) => coarse.resize(e1.width, e1.height, (1.0 / params.pyramid_scale) as f32),
        };
        for _ in 0..params.iterations {
            current = displacement_update(e1, e2, &current, params.window_size);
        }
        flow = Some(current);
    }
    Ok(flow.expect("pyramid has at least one level"))
}

/// Dense flow from `prev` to `next` on luminance planes.
pub fn estimate_flow_planes(
    prev: &Plane<f32>,
    next: &Plane<f32>,
    params: &FarnebackParams,
) -> Result<FlowField, FlowError> {
    params.validate()?;
    if prev.dims() != next.dims() {
        return Err(FlowError::DimensionMismatch(
            prev.width,
            prev.height,
            next.width,
            next.height,
        ));
    }
    let basis = ExpansionBasis::new(params.poly_n, params.poly_sigma);
    let a = ExpandedFrame::new(prev, params, &basis);
    let b = ExpandedFrame::new(next, params, &basis);
    flow_between(&a, &b, params)
}

/// Dense flow between two frames (converted to luminance first).
pub fn estimate_flow(prev: &Frame, next: &Frame, params: &FarnebackParams) -> Result<FlowField, FlowError> {
    if (prev.width, prev.height) != (next.width, next.height) {
        return Err(FlowError::DimensionMismatch(
            prev.width,
            prev.height,
            next.width,
            next.height,
        ));
    }
    estimate_flow_planes(&prev.luminance(), &next.luminance(), params)
}

/// Flow for every consecutive pair of a frame sequence. Each frame is expanded once.
pub fn estimate_sequence(frames: &[Plane<f32>], params: &FarnebackParams) -> Result<Vec<FlowField>, FlowError> {
    params.validate()?;
    let basis = ExpansionBasis::new(params.poly_n, params.poly_sigma);
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    let mut prev: Option<ExpandedFrame> = None;
    for f in frames {
        let cur = ExpandedFrame::new(f, params, &basis);
        if let Some(p) = &prev {
            out.push(flow_between(p, &cur, params)?);
        }
        prev = Some(cur);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        FarnebackParams::default().validate().unwrap();
        let mut p = FarnebackParams::default();
        p.window_size = 14;
        assert!(p.validate().is_err());
        p = FarnebackParams::default();
        p.pyramid_scale = 1.0;
        assert!(p.validate().is_err());
        p = FarnebackParams::default();
        p.poly_n = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let a = Plane::filled(10, 10, 0.0f32);
        let b = Plane::filled(12, 10, 0.0f32);
        assert!(matches!(
            estimate_flow_planes(&a, &b, &FarnebackParams::default()),
            Err(FlowError::DimensionMismatch(..))
        ));
    }

    #[test]
    fn raw_round_trip_and_layout() {
        let mut f = FlowField::zeros(3, 2);
        f.u[1] = 1.5;
        f.v[5] = -2.25;
        let mut buf = Vec::new();
        f.write_raw(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 2 * 6 * 4);
        assert_eq!(&buf[..4], b"FLOW");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(buf[20..24].try_into().unwrap()), 1.5);
        assert_eq!(FlowField::read_raw(&buf[..]).unwrap(), f);
        assert!(FlowField::read_raw(&buf[..20]).is_err());
    }
}
