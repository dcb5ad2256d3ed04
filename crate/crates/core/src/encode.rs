//! Flow fields as quantized magnitude and direction grayscale images.
//!
//! Magnitude is clipped at a fixed cap (20 px by default) and mapped linearly
//! onto 0..=255, so values are comparable across frames and clips. Direction
//! `atan2(v, u)` in `[0, 2π)` maps onto the same range, modulo 255 so that the
//! code is periodic.

use std::f64::consts::TAU;
use std::fmt;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowField;
use crate::raster::Plane;

pub const DEFAULT_MAG_CAP: f32 = 20.0;
pub const DEFAULT_JPEG_QUALITY: u8 = 90;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt or unreadable image {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("cannot tell plane kind from file name {0}")]
    Kind(String),
    #[error("invalid encoding parameter: {0}")]
    Params(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarFlow {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f32>,
    pub direction: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlaneKind {
    Magnitude,
    Direction,
}

impl PlaneKind {
    pub fn prefix(self) -> &'static str {
        match self {
            PlaneKind::Magnitude => "mag",
            PlaneKind::Direction => "dir",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPlane {
    pub kind: PlaneKind,
    pub plane: Plane<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormatKind {
    #[default]
    Png,
    Jpeg,
}

impl ImageFormatKind {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormatKind::Png => "png",
            ImageFormatKind::Jpeg => "jpg",
        }
    }
}

impl FromStr for ImageFormatKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "png" => Ok(ImageFormatKind::Png),
            "jpeg" | "jpg" => Ok(ImageFormatKind::Jpeg),
            _ => Err(format!("unknown image format {s:?} (png|jpeg)")),
        }
    }
}

impl fmt::Display for ImageFormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageFormatKind::Png => "png",
            ImageFormatKind::Jpeg => "jpeg",
        })
    }
}

/// Angle of `(u, v)` in `[0, 2π)`, zero for the zero vector.
#[inline]
pub fn direction_of(u: f32, v: f32) -> f32 {
    if u == 0.0 && v == 0.0 {
        return 0.0;
    }
    let mut a = (v as f64).atan2(u as f64);
    if a < 0.0 {
        a += TAU;
    }
    let a = a as f32;
    if a >= std::f32::consts::TAU {
        0.0
    } else {
        a
    }
}

pub fn flow_to_polar(field: &FlowField) -> PolarFlow {
    PolarFlow {
        width: field.width,
        height: field.height,
        magnitude: field
            .u
            .iter()
            .zip(&field.v)
            .map(|(&u, &v)| (u as f64).hypot(v as f64) as f32)
            .collect(),
        direction: field.u.iter().zip(&field.v).map(|(&u, &v)| direction_of(u, v)).collect(),
    }
}

#[inline]
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

#[inline]
pub fn quantize_magnitude(m: f32, cap: f32) -> u8 {
    let r = (m.max(0.0) as f64).min(cap as f64) / cap as f64;
    round_half_up(255.0 * r).clamp(0.0, 255.0) as u8
}

#[inline]
pub fn quantize_direction(theta: f32) -> u8 {
    let t = (theta as f64).rem_euclid(TAU);
    (round_half_up(255.0 * t / TAU) as u32 % 255) as u8
}

#[inline]
pub fn dequantize_magnitude(q: u8, cap: f32) -> f32 {
    q as f32 / 255.0 * cap
}

#[inline]
pub fn dequantize_direction(q: u8) -> f32 {
    (q as f64 / 255.0 * TAU) as f32
}

/// Quantize both planes; `mag_cap` must be positive.
pub fn quantize(polar: &PolarFlow, mag_cap: f32) -> Result<(QuantizedPlane, QuantizedPlane), EncodeError> {
    if !(mag_cap > 0.0) || !mag_cap.is_finite() {
        return Err(EncodeError::Params(format!("mag_cap must be positive, got {mag_cap}")));
    }
    let mag = polar.magnitude.iter().map(|&m| quantize_magnitude(m, mag_cap)).collect();
    let dir = polar.direction.iter().map(|&t| quantize_direction(t)).collect();
    Ok((
        QuantizedPlane {
            kind: PlaneKind::Magnitude,
            plane: Plane::from_vec(polar.width, polar.height, mag),
        },
        QuantizedPlane {
            kind: PlaneKind::Direction,
            plane: Plane::from_vec(polar.width, polar.height, dir),
        },
    ))
}

pub fn encode_flow(field: &FlowField, mag_cap: f32) -> Result<(QuantizedPlane, QuantizedPlane), EncodeError> {
    quantize(&flow_to_polar(field), mag_cap)
}

/// `<dir>/mag_0007.png` etc.; `index` is the first frame of the pair.
pub fn plane_path(dir: &Path, kind: PlaneKind, index: usize, format: ImageFormatKind) -> PathBuf {
    dir.join(format!("{}_{:04}.{}", kind.prefix(), index, format.extension()))
}

pub fn write_plane(plane: &QuantizedPlane, format: ImageFormatKind, quality: u8, path: &Path) -> Result<(), EncodeError> {
    let io = |source| EncodeError::Io {
        path: path.display().to_string(),
        source,
    };
    let (w, h) = (plane.plane.width as u32, plane.plane.height as u32);
    match format {
        ImageFormatKind::Png => image::save_buffer_with_format(
            path,
            &plane.plane.data,
            w,
            h,
            image::ExtendedColorType::L8,
            ImageFormat::Png,
        )
        .map_err(|e| EncodeError::Corrupt {
            path: path.display().to_string(),
            reason: e.to_string(),
        }),
        ImageFormatKind::Jpeg => {
            if !(1..=100).contains(&quality) {
                return Err(EncodeError::Params(format!("jpeg quality {quality} outside 1..=100")));
            }
            let file = std::fs::File::create(path).map_err(io)?;
            JpegEncoder::new_with_quality(BufWriter::new(file), quality)
                .write_image(&plane.plane.data, w, h, image::ExtendedColorType::L8)
                .map_err(|e| EncodeError::Corrupt {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })
        }
    }
}

fn kind_from_name(path: &Path) -> Result<PlaneKind, EncodeError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.starts_with("mag_") {
        Ok(PlaneKind::Magnitude)
    } else if name.starts_with("dir_") {
        Ok(PlaneKind::Direction)
    } else {
        Err(EncodeError::Kind(path.display().to_string()))
    }
}

pub fn read_plane(path: &Path) -> Result<QuantizedPlane, EncodeError> {
    let kind = kind_from_name(path)?;
    let bytes = std::fs::read(path).map_err(|source| EncodeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let img = image::load_from_memory(&bytes).map_err(|e| EncodeError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let gray = img.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(QuantizedPlane {
        kind,
        plane: Plane::from_vec(w as usize, h as usize, gray.into_raw()),
    })
}
