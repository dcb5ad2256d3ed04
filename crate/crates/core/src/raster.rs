//! Planar raster containers shared by every stage.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("degenerate image {width}x{height}: {what}")]
    Degenerate {
        width: usize,
        height: usize,
        what: &'static str,
    },
    #[error("failed to read image {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// A single-channel raster stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![T::default(); width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "plane buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel read with clamped-edge extension.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    pub fn row(&self, y: usize) -> &[T] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

impl Plane<f32> {
    /// Bilinear sample at continuous coordinates, clamped at the border.
    #[inline]
    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let maxx = (self.width - 1) as f32;
        let maxy = (self.height - 1) as f32;
        let x = x.clamp(0.0, maxx);
        let y = y.clamp(0.0, maxy);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resample to `width`x`height` with pixel-centre aligned bilinear interpolation.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Plane<f32> {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let mut out = Plane::new(width, height);
        for y in 0..height {
            let fy = (y as f32 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f32 + 0.5) * sx - 0.5;
                out.data[y * width + x] = self.sample_bilinear(fx, fy);
            }
        }
        out
    }

    pub fn to_u8(&self) -> Plane<u8> {
        Plane {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }
}

impl Plane<u8> {
    pub fn to_f32(&self) -> Plane<f32> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Bilinear resize that rounds back to 8 bits. Same-size input is copied verbatim.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Plane<u8> {
        if width == self.width && height == self.height {
            return self.clone();
        }
        self.to_f32().resize_bilinear(width, height).to_u8()
    }
}

/// A video frame: 1 (gray) or 3 (RGB, interleaved) 8-bit channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn gray(plane: Plane<u8>) -> Self {
        Self {
            width: plane.width,
            height: plane.height,
            channels: 1,
            data: plane.data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    /// Luminance plane, 0.299R + 0.587G + 0.114B for colour input.
    pub fn luminance(&self) -> Plane<f32> {
        match self.channels {
            1 => Plane::from_vec(
                self.width,
                self.height,
                self.data.iter().map(|&v| v as f32).collect(),
            ),
            _ => Plane::from_vec(
                self.width,
                self.height,
                self.data
                    .chunks_exact(self.channels)
                    .map(|px| 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32)
                    .collect(),
            ),
        }
    }

    fn channel_plane(&self, c: usize) -> Plane<f32> {
        Plane::from_vec(
            self.width,
            self.height,
            self.data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .map(|&v| v as f32)
                .collect(),
        )
    }

    /// Bilinear resize of every channel. Same-size input is returned unchanged.
    pub fn resize(&self, width: usize, height: usize) -> Result<Frame, ImageError> {
        if self.width < 2 || self.height < 2 {
            return Err(ImageError::Degenerate {
                width: self.width,
                height: self.height,
                what: "resize source must be at least 2x2",
            });
        }
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let planes: Vec<Plane<u8>> = (0..self.channels)
            .map(|c| self.channel_plane(c).resize_bilinear(width, height).to_u8())
            .collect();
        let mut data = vec![0u8; width * height * self.channels];
        for (c, p) in planes.iter().enumerate() {
            for (i, &v) in p.data.iter().enumerate() {
                data[i * self.channels + c] = v;
            }
        }
        Ok(Frame {
            width,
            height,
            channels: self.channels,
            data,
        })
    }

    pub fn load(path: &Path) -> Result<Frame, ImageError> {
        let img = image::open(path).map_err(|source| ImageError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Frame::gray(Plane::from_vec(w as usize, h as usize, g.into_raw()))
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Frame::rgb(w as usize, h as usize, rgb.into_raw())
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|source| ImageError::Write {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_is_bitwise() {
        let data: Vec<u8> = (0..320 * 240 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let f = Frame::rgb(320, 240, data);
        assert_eq!(f.resize(320, 240).unwrap(), f);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let f = Frame::gray(Plane::filled(640, 480, 93u8));
        let r = f.resize(320, 240).unwrap();
        assert_eq!((r.width, r.height), (320, 240));
        assert!(r.data.iter().all(|&v| v == 93));
    }

    #[test]
    fn resize_halving_samples_at_twice_coordinates() {
        // Output pixel (x,y) samples the source at (2x+0.5, 2y+0.5): the mean of a 2x2 block.
        let src = Plane::from_vec(640, 480, (0..640 * 480).map(|i| ((i % 640) + 3 * (i / 640)) as f32).collect());
        let out = src.resize_bilinear(320, 240);
        for &(x, y) in &[(0usize, 0usize), (10, 20), (319, 239), (100, 7)] {
            let expect = (src.get(2 * x, 2 * y)
                + src.get(2 * x + 1, 2 * y)
                + src.get(2 * x, 2 * y + 1)
                + src.get(2 * x + 1, 2 * y + 1))
                / 4.0;
            assert!((out.get(x, y) - expect).abs() < 1e-3);
        }
    }

    #[test]
    fn degenerate_source_rejected() {
        let f = Frame::gray(Plane::filled(1, 5, 0u8));
        assert!(f.resize(320, 240).is_err());
    }

    #[test]
    fn luminance_weights() {
        let f = Frame::rgb(1, 1, vec![100, 200, 50]);
        let l = f.luminance();
        assert!((l.data[0] - (29.9 + 117.4 + 5.7)).abs() < 1e-4);
    }
}
