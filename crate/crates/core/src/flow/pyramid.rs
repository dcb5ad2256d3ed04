use log::warn;

use crate::raster::Plane;

/// Smallest level side kept in a pyramid.
pub const MIN_LEVEL_SIDE: usize = 4;

/// Normalised 1-D Gaussian with radius `ceil(2.5 sigma)`, at least 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = ((2.5 * sigma).ceil() as usize).max(1);
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped edges.
pub fn gaussian_blur(plane: &Plane<f32>, sigma: f64) -> Plane<f32> {
    if sigma <= 0.0 {
        return plane.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = plane.dims();
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = plane.row(y);
        for x in 0..w {
            let mut s = 0.0f64;
            for (i, kv) in k.iter().enumerate() {
                let xs = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                s += kv * row[xs] as f64;
            }
            tmp[y * w + x] = s as f32;
        }
    }
    let mut out = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0f64;
            for (i, kv) in k.iter().enumerate() {
                let ys = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                s += kv * tmp[ys * w + x] as f64;
            }
            out.data[y * w + x] = s as f32;
        }
    }
    out
}

/// Level sizes `round(scale^k * dims)`, stopping before any side drops below
/// [`MIN_LEVEL_SIDE`]. Level 0 is always present.
pub fn level_dims(width: usize, height: usize, scale: f64, levels: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![(width, height)];
    for k in 1..levels {
        let f = scale.powi(k as i32);
        let (w, h) = (
            (width as f64 * f).round() as usize,
            (height as f64 * f).round() as usize,
        );
        if w < MIN_LEVEL_SIDE || h < MIN_LEVEL_SIDE {
            warn!(
                "pyramid truncated to {} of {levels} levels: level {k} would be {w}x{h}",
                dims.len()
            );
            break;
        }
        dims.push((w, h));
    }
    dims
}

/// Gaussian pyramid, finest level first. Each coarser level is the input
/// blurred with `sigma = (1/s - 1) / 2` for its cumulative scale `s`, then
/// bilinearly resampled.
pub fn gaussian_pyramid(image: &Plane<f32>, scale: f64, levels: usize) -> Vec<Plane<f32>> {
    let dims = level_dims(image.width, image.height, scale, levels.max(1));
    dims.iter()
        .enumerate()
        .map(|(k, &(w, h))| {
            if k == 0 {
                image.clone()
            } else {
                let s = scale.powi(k as i32);
                gaussian_blur(image, (1.0 / s - 1.0) * 0.5).resize_bilinear(w, h)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_sizes() {
        let img = Plane::filled(320, 240, 1.0f32);
        let p = gaussian_pyramid(&img, 0.5, 3);
        let sizes: Vec<_> = p.iter().map(|l| l.dims()).collect();
        assert_eq!(sizes, vec![(320, 240), (160, 120), (80, 60)]);
    }

    #[test]
    fn single_level_is_input() {
        let img = Plane::from_vec(5, 4, (0..20).map(|v| v as f32).collect());
        let p = gaussian_pyramid(&img, 0.5, 1);
        assert_eq!(p, vec![img]);
    }

    #[test]
    fn constant_preserved() {
        let img = Plane::filled(64, 48, 42.0f32);
        for level in gaussian_pyramid(&img, 0.5, 4) {
            assert!(level.data.iter().all(|&v| (v - 42.0).abs() < 1e-4));
        }
    }

    #[test]
    fn truncated_but_never_empty() {
        let img = Plane::filled(10, 10, 0.0f32);
        let p = gaussian_pyramid(&img, 0.5, 6);
        assert_eq!(p.len(), 2); // 10 -> 5 -> (3 dropped)
        let tiny = Plane::filled(2, 2, 0.0f32);
        assert_eq!(gaussian_pyramid(&tiny, 0.5, 3).len(), 1);
    }
}
