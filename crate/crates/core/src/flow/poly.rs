//! Local quadratic expansion `f(p + z) ≈ zᵀAz + bᵀz + c` of every pixel.
//!
//! The fit is a weighted least-squares projection onto the basis
//! `{1, x, y, x², y², xy}` under a Gaussian applicability. Because the
//! applicability is separable, the six weighted moments are obtained from one
//! horizontal pass (three 1-D correlations) followed by one vertical pass (six
//! correlations). The fixed 6x6 Gram matrix is inverted once.

use crate::raster::Plane;

/// Quadratic-model coefficients of one pixel. `A = [[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[repr(C)]
pub struct Coeffs {
    pub a11: f32,
    pub a12: f32,
    pub a22: f32,
    pub b1: f32,
    pub b2: f32,
    pub c: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    pub coeffs: Vec<Coeffs>,
}

impl PolyExpansion {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Coeffs {
        self.coeffs[y * self.width + x]
    }
}

/// Separable kernels and the inverse Gram matrix for one `(poly_n, sigma)` pair.
#[derive(Debug, Clone)]
pub struct ExpansionBasis {
    half: usize,
    w0: Vec<f64>,
    w1: Vec<f64>,
    w2: Vec<f64>,
    inv_gram: [[f64; 6]; 6],
}

impl ExpansionBasis {
    pub fn new(poly_n: usize, sigma: f64) -> Self {
        let half = poly_n / 2;
        let mut w0 = Vec::with_capacity(2 * half + 1);
        let mut w1 = Vec::with_capacity(2 * half + 1);
        let mut w2 = Vec::with_capacity(2 * half + 1);
        for k in -(half as isize)..=half as isize {
            let x = k as f64;
            let g = (-x * x / (2.0 * sigma * sigma)).exp();
            w0.push(g);
            w1.push(g * x);
            w2.push(g * x * x);
        }
        // Gram matrix over the 2-D neighbourhood, basis order [1, x, y, x², y², xy].
        let mut gram = [[0.0f64; 6]; 6];
        for j in -(half as isize)..=half as isize {
            for i in -(half as isize)..=half as isize {
                let (x, y) = (i as f64, j as f64);
                let g = w0[(i + half as isize) as usize] * w0[(j + half as isize) as usize];
                let phi = [1.0, x, y, x * x, y * y, x * y];
                for r in 0..6 {
                    for c in 0..6 {
                        gram[r][c] += g * phi[r] * phi[c];
                    }
                }
            }
        }
        Self {
            half,
            w0,
            w1,
            w2,
            inv_gram: invert6(gram),
        }
    }

    pub fn half(&self) -> usize {
        self.half
    }
}

/// Gauss-Jordan inverse with partial pivoting. The Gram matrix of a
/// full-rank basis on a positive applicability is symmetric positive definite.
fn invert6(m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let mut a = [[0.0f64; 12]; 6];
    for r in 0..6 {
        a[r][..6].copy_from_slice(&m[r]);
        a[r][6 + r] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        assert!(d.abs() > 1e-300, "singular expansion Gram matrix (poly_n too small)");
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..6 {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    for k in 0..12 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut inv = [[0.0f64; 6]; 6];
    for r in 0..6 {
        inv[r].copy_from_slice(&a[r][6..]);
    }
    inv
}

/// Polynomial expansion of a whole plane with clamped-edge extension.
pub fn poly_expansion(plane: &Plane<f32>, basis: &ExpansionBasis) -> PolyExpansion {
    let (w, h) = plane.dims();
    let half = basis.half as isize;
    let taps = basis.w0.len();

    // Horizontal pass: Σ g·f, Σ g·x·f, Σ g·x²·f per pixel.
    let mut row_moments = vec![[0.0f64; 3]; w * h];
    let mut padded = vec![0.0f64; w + 2 * basis.half];
    for y in 0..h {
        let row = plane.row(y);
        for (i, p) in padded.iter_mut().enumerate() {
            let xs = (i as isize - half).clamp(0, w as isize - 1) as usize;
            *p = row[xs] as f64;
        }
        let out = &mut row_moments[y * w..(y + 1) * w];
        for (x, m) in out.iter_mut().enumerate() {
            let win = &padded[x..x + taps];
            let mut s = [0.0f64; 3];
            for k in 0..taps {
                let v = win[k];
                s[0] += basis.w0[k] * v;
                s[1] += basis.w1[k] * v;
                s[2] += basis.w2[k] * v;
            }
            *m = s;
        }
    }

    // Vertical pass and projection through the inverse Gram matrix.
    let inv = &basis.inv_gram;
    let mut coeffs = vec![Coeffs::default(); w * h];
    for y in 0..h {
        let rows: Vec<usize> = (0..taps)
            .map(|k| (y as isize + k as isize - half).clamp(0, h as isize - 1) as usize)
            .collect();
        for x in 0..w {
            // moments in basis order [1, x, y, x², y², xy]
            let mut m = [0.0f64; 6];
            for (k, &ys) in rows.iter().enumerate() {
                let r = row_moments[ys * w + x];
                let (g0, g1, g2) = (basis.w0[k], basis.w1[k], basis.w2[k]);
                m[0] += g0 * r[0];
                m[1] += g0 * r[1];
                m[2] += g1 * r[0];
                m[3] += g0 * r[2];
                m[4] += g2 * r[0];
                m[5] += g1 * r[1];
            }
            let mut p = [0.0f64; 6];
            for (i, pi) in p.iter_mut().enumerate() {
                let row = &inv[i];
                *pi = row[0] * m[0]
                    + row[1] * m[1]
                    + row[2] * m[2]
                    + row[3] * m[3]
                    + row[4] * m[4]
                    + row[5] * m[5];
            }
            coeffs[y * w + x] = Coeffs {
                c: p[0] as f32,
                b1: p[1] as f32,
                b2: p[2] as f32,
                a11: p[3] as f32,
                a22: p[4] as f32,
                a12: (p[5] * 0.5) as f32,
            };
        }
    }
    PolyExpansion {
        width: w,
        height: h,
        coeffs,
    }
}
