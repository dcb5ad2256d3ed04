//! One refinement step of the displacement field.
//!
//! For each pixel the expansion of the second frame is sampled at the
//! currently predicted position `x + d₀`; the averaged quadratic term `A` and
//! `Δb = -½(b₂(x+d₀) - b₁(x)) + A·d₀` give the per-pixel normal equations
//! `AᵀA d = AᵀΔb`, which are box-averaged over the window and solved.

use super::poly::{Coeffs, PolyExpansion};
use super::FlowField;

/// Bilinear sample of all coefficients, clamped at the border.
#[inline]
fn sample_coeffs(e: &PolyExpansion, x: f32, y: f32) -> Coeffs {
    let x = x.clamp(0.0, (e.width - 1) as f32);
    let y = y.clamp(0.0, (e.height - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(e.width - 1);
    let y1 = (y0 + 1).min(e.height - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let (w00, w10, w01, w11) = (
        (1.0 - fx) * (1.0 - fy),
        fx * (1.0 - fy),
        (1.0 - fx) * fy,
        fx * fy,
    );
    let (c00, c10, c01, c11) = (e.at(x0, y0), e.at(x1, y0), e.at(x0, y1), e.at(x1, y1));
    let mix = |f: fn(&Coeffs) -> f32| w00 * f(&c00) + w10 * f(&c10) + w01 * f(&c01) + w11 * f(&c11);
    Coeffs {
        a11: mix(|c| c.a11),
        a12: mix(|c| c.a12),
        a22: mix(|c| c.a22),
        b1: mix(|c| c.b1),
        b2: mix(|c| c.b2),
        c: 0.0,
    }
}

/// Per-pixel `[G11, G12, G22, h1, h2]`.
fn normal_equations(prev: &PolyExpansion, next: &PolyExpansion, flow: &FlowField) -> Vec<[f32; 5]> {
    let (w, h) = (prev.width, prev.height);
    let mut out = vec![[0.0f32; 5]; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (dx, dy) = (flow.u[i], flow.v[i]);
            let p = prev.coeffs[i];
            let n = if dx == 0.0 && dy == 0.0 {
                next.coeffs[i]
            } else {
                sample_coeffs(next, x as f32 + dx, y as f32 + dy)
            };
            let a11 = 0.5 * (p.a11 + n.a11);
            let a12 = 0.5 * (p.a12 + n.a12);
            let a22 = 0.5 * (p.a22 + n.a22);
            let db1 = -0.5 * (n.b1 - p.b1) + a11 * dx + a12 * dy;
            let db2 = -0.5 * (n.b2 - p.b2) + a12 * dx + a22 * dy;
            out[i] = [
                a11 * a11 + a12 * a12,
                a12 * (a11 + a22),
                a22 * a22 + a12 * a12,
                a11 * db1 + a12 * db2,
                a12 * db1 + a22 * db2,
            ];
        }
    }
    out
}

/// Box sum over a `(2r+1)²` window with clamped edges; running sums in f64.
pub(crate) fn box_sum5(src: &[[f32; 5]], w: usize, h: usize, radius: usize) -> Vec<[f32; 5]> {
    let r = radius as isize;
    let clamp_x = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let clamp_y = |y: isize| y.clamp(0, h as isize - 1) as usize;

    let mut horiz = vec![[0.0f64; 5]; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let mut acc = [0.0f64; 5];
        for k in -r..=r {
            let v = row[clamp_x(k)];
            for c in 0..5 {
                acc[c] += v[c] as f64;
            }
        }
        for x in 0..w {
            horiz[y * w + x] = acc;
            let add = row[clamp_x(x as isize + r + 1)];
            let sub = row[clamp_x(x as isize - r)];
            for c in 0..5 {
                acc[c] += add[c] as f64 - sub[c] as f64;
            }
        }
    }

    let mut out = vec![[0.0f32; 5]; w * h];
    let mut acc = vec![[0.0f64; 5]; w];
    for k in -r..=r {
        let row = &horiz[clamp_y(k) * w..];
        for x in 0..w {
            for c in 0..5 {
                acc[x][c] += row[x][c];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let a = acc[x];
            out[y * w + x] = [a[0] as f32, a[1] as f32, a[2] as f32, a[3] as f32, a[4] as f32];
        }
        let add = clamp_y(y as isize + r + 1) * w;
        let sub = clamp_y(y as isize - r) * w;
        for x in 0..w {
            for c in 0..5 {
                acc[x][c] += horiz[add + x][c] - horiz[sub + x][c];
            }
        }
    }
    out
}

/// Solve `[[g11, g12], [g12, g22]] d = h` with a `1e-6·trace` ridge.
#[inline]
pub(crate) fn solve_regularized(g11: f32, g12: f32, g22: f32, h1: f32, h2: f32) -> (f32, f32) {
    let (g11, g12, g22, h1, h2) = (g11 as f64, g12 as f64, g22 as f64, h1 as f64, h2 as f64);
    let eps = 1e-6 * (g11 + g22).abs();
    let (a, d) = (g11 + eps, g22 + eps);
    let det = a * d - g12 * g12;
    if !(det > f64::MIN_POSITIVE) || !det.is_finite() {
        return (0.0, 0.0);
    }
    let u = (d * h1 - g12 * h2) / det;
    let v = (a * h2 - g12 * h1) / det;
    if u.is_finite() && v.is_finite() {
        (u as f32, v as f32)
    } else {
        (0.0, 0.0)
    }
}

/// One displacement update over a `window_size` box window.
pub fn displacement_update(
    prev: &PolyExpansion,
    next: &PolyExpansion,
    flow_in: &FlowField,
    window_size: usize,
) -> FlowField {
    let (w, h) = (prev.width, prev.height);
    let eqs = normal_equations(prev, next, flow_in);
    let sums = box_sum5(&eqs, w, h, window_size / 2);
    let mut out = FlowField::zeros(w, h);
    for (i, s) in sums.iter().enumerate() {
        let (u, v) = solve_regularized(s[0], s[1], s[2], s[3], s[4]);
        out.u[i] = u;
        out.v[i] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::poly::{poly_expansion, ExpansionBasis};
    use super::*;
    use crate::raster::Plane;

    fn texture(w: usize, h: usize, shift_x: f32, shift_y: f32) -> Plane<f32> {
        let mut p = Plane::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f32 - shift_x, y as f32 - shift_y);
                let v = 100.0
                    + 40.0 * (fx * 0.35).sin() * (fy * 0.27).cos()
                    + 30.0 * (fx * 0.11 + fy * 0.19).sin()
                    + 20.0 * (fx * 0.23 - fy * 0.41).cos();
                p.set(x, y, v);
            }
        }
        p
    }

    #[test]
    fn box_sum_matches_naive() {
        let (w, h) = (9usize, 7usize);
        let src: Vec<[f32; 5]> = (0..w * h).map(|i| [i as f32, 1.0, (i % 3) as f32, -(i as f32), 0.5]).collect();
        let r = 2isize;
        let fast = box_sum5(&src, w, h, r as usize);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut s = [0.0f32; 5];
                for j in -r..=r {
                    for i in -r..=r {
                        let xx = (x + i).clamp(0, w as isize - 1) as usize;
                        let yy = (y + j).clamp(0, h as isize - 1) as usize;
                        for c in 0..5 {
                            s[c] += src[yy * w + xx][c];
                        }
                    }
                }
                let got = fast[y as usize * w + x as usize];
                for c in 0..5 {
                    assert!((got[c] - s[c]).abs() < 1e-3, "({x},{y}) c{c}");
                }
            }
        }
    }

    #[test]
    fn identical_expansions_give_zero_flow() {
        let basis = ExpansionBasis::new(5, 1.2);
        let e = poly_expansion(&texture(48, 40, 0.0, 0.0), &basis);
        let f = displacement_update(&e, &e, &FlowField::zeros(48, 40), 15);
        assert!(f.u.iter().chain(&f.v).all(|&v| v == 0.0));
    }

    #[test]
    fn integer_translation_recovered() {
        let basis = ExpansionBasis::new(5, 1.2);
        let (w, h) = (64, 56);
        let e1 = poly_expansion(&texture(w, h, 0.0, 0.0), &basis);
        let e2 = poly_expansion(&texture(w, h, 2.0, 0.0), &basis);
        let f = displacement_update(&e1, &e2, &FlowField::zeros(w, h), 15);
        let m = 12;
        for y in m..h - m {
            for x in m..w - m {
                let i = y * w + x;
                assert!((f.u[i] - 2.0).abs() < 0.25 && f.v[i].abs() < 0.25, "({x},{y}) {} {}", f.u[i], f.v[i]);
            }
        }
    }

    #[test]
    fn true_prior_is_a_fixed_point() {
        let basis = ExpansionBasis::new(5, 1.2);
        let (w, h) = (64, 56);
        let e1 = poly_expansion(&texture(w, h, 0.0, 0.0), &basis);
        let e2 = poly_expansion(&texture(w, h, 2.0, 0.0), &basis);
        let mut prior = FlowField::zeros(w, h);
        prior.u.iter_mut().for_each(|u| *u = 2.0);
        let f = displacement_update(&e1, &e2, &prior, 15);
        let m = 12;
        for y in m..h - m {
            for x in m..w - m {
                let i = y * w + x;
                assert!((f.u[i] - 2.0).abs() < 0.05 && f.v[i].abs() < 0.05);
            }
        }
    }

    #[test]
    fn singular_systems_never_nan() {
        assert_eq!(solve_regularized(0.0, 0.0, 0.0, 0.0, 0.0), (0.0, 0.0));
        assert!(solve_regularized(1.0, 1.0, 1.0, 1.0, 1.0).0.is_finite());
        let (u, v) = solve_regularized(f32::MAX, f32::MAX, f32::MAX, 1.0, 1.0);
        assert!(u.is_finite() && v.is_finite());
        let flat = Plane::filled(32, 32, 5.0f32);
        let e = poly_expansion(&flat, &ExpansionBasis::new(5, 1.2));
        let mut prior = FlowField::zeros(32, 32);
        prior.u.iter_mut().for_each(|u| *u = 1.5);
        let f = displacement_update(&e, &e, &prior, 15);
        assert!(f.u.iter().chain(&f.v).all(|v| v.is_finite()));
    }
}
