//! Projective warps and radial lens distortion, both as inverse maps over
//! normalized `[0,1]^2` coordinates so the same transform applies to rasters
//! of different resolutions (the degraded chain runs at the simulated sensor
//! grid, the groundtruth chain at source resolution).

use super::Image;
use crate::error::{Error, Result};

/// Sampling coordinates this close to an integer snap onto it, so identity
/// transforms reproduce their input bit-exactly instead of mixing in a
/// float-noise-weighted neighbor.
const SNAP: f64 = 1e-6;

/// 3x3 projective map over normalized image coordinates, stored with the
/// bottom-right entry scaled to 1. Applied as an inverse map: it takes
/// output-space coordinates to source-space coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m[2][2].abs() < 1e-12 {
            return Err(Error::contract("homography has zero scale entry"));
        }
        let s = 1.0 / m[2][2];
        let mut n = m;
        for row in &mut n {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        let h = Homography { m: n };
        if h.det().abs() < 1e-9 {
            return Err(Error::contract(format!(
                "homography is numerically singular (|det| = {:.3e})",
                h.det().abs()
            )));
        }
        Ok(h)
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_identity(&self) -> bool {
        let id = Homography::identity();
        self.m
            .iter()
            .flatten()
            .zip(id.m.iter().flatten())
            .all(|(a, b)| (a - b).abs() < 1e-12)
    }

    /// Apply to a normalized point.
    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.m;
        let x = m[0][0] * u + m[0][1] * v + m[0][2];
        let y = m[1][0] * u + m[1][1] * v + m[1][2];
        let w = m[2][0] * u + m[2][1] * v + m[2][2];
        (x / w, y / w)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let det = self.det();
        if det.abs() < 1e-9 {
            return Err(Error::contract("homography not invertible"));
        }
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        Homography::new(inv)
    }

    pub fn compose(&self, then: &Homography) -> Result<Homography> {
        let a = &self.m;
        let b = &then.m;
        let mut out = [[0.0f64; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Homography::new(out)
    }

    /// Homography taking the unit square corners (0,0),(1,0),(1,1),(0,1)
    /// to the four given points. Solved by direct elimination of the
    /// standard 8x8 system.
    pub fn from_unit_square(corners: &[(f64, f64); 4]) -> Result<Homography> {
        let src = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (xp, yp) = corners[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * xp, -y * xp, xp];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * yp, -y * yp, yp];
        }
        // Gaussian elimination with partial pivoting, augmented column 8.
        for col in 0..8 {
            let pivot = (col..8)
                .max_by(|&p, &q| a[p][col].abs().partial_cmp(&a[q][col].abs()).unwrap())
                .unwrap();
            if a[pivot][col].abs() < 1e-12 {
                return Err(Error::contract("degenerate corner configuration"));
            }
            a.swap(col, pivot);
            let d = a[col][col];
            for v in &mut a[col] {
                *v /= d;
            }
            for row in 0..8 {
                if row != col {
                    let f = a[row][col];
                    if f != 0.0 {
                        for k in 0..9 {
                            a[row][k] -= f * a[col][k];
                        }
                    }
                }
            }
        }
        let h = [
            [a[0][8], a[1][8], a[2][8]],
            [a[3][8], a[4][8], a[5][8]],
            [a[6][8], a[7][8], 1.0],
        ];
        Homography::new(h)
    }

    /// Scale about a fixed normalized center: content drawn `factor` times
    /// larger. As an inverse map this divides the centered coordinate.
    pub fn scale_about(factor: f64, cx: f64, cy: f64) -> Result<Homography> {
        let s = 1.0 / factor;
        Homography::new([
            [s, 0.0, cx * (1.0 - s)],
            [0.0, s, cy * (1.0 - s)],
            [0.0, 0.0, 1.0],
        ])
    }
}

/// Polynomial radial distortion about a normalized center. Used as an
/// inverse map: an output pixel at centered radius r samples the source at
/// radius `r * (1 + k1 r^2 + k2 r^4)`, which renders barrel curvature for
/// positive k1.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialDistortion {
    pub k1: f64,
    pub k2: f64,
    pub center: (f64, f64),
}

impl RadialDistortion {
    pub fn none() -> Self {
        RadialDistortion {
            k1: 0.0,
            k2: 0.0,
            center: (0.5, 0.5),
        }
    }

    pub fn new(k1: f64, k2: f64, center: (f64, f64)) -> Result<Self> {
        let d = RadialDistortion { k1, k2, center };
        // No fold-over: r(1 + k1 r^2 + k2 r^4) strictly increasing out to
        // the farthest corner. d/dr = 1 + 3 k1 r^2 + 5 k2 r^4.
        let r_max = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|&(u, v): &(f64, f64)| ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt())
            .fold(0.0f64, f64::max);
        let steps = 64;
        for i in 0..=steps {
            let r = r_max * i as f64 / steps as f64;
            let deriv = 1.0 + 3.0 * k1 * r * r + 5.0 * k2 * r.powi(4);
            if deriv <= 0.0 {
                return Err(Error::contract(format!(
                    "radial distortion folds over at r = {r:.3} (k1 = {k1}, k2 = {k2})"
                )));
            }
        }
        Ok(d)
    }

    pub fn is_none(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0
    }

    fn map(&self, u: f64, v: f64) -> (f64, f64) {
        let du = u - self.center.0;
        let dv = v - self.center.1;
        let r2 = du * du + dv * dv;
        let f = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        (self.center.0 + du * f, self.center.1 + dv * f)
    }
}

/// Bilinear fetch at fractional pixel coordinates with border replication;
/// near-integer coordinates are snapped exact.
fn sample_bilinear(img: &Image, fx: f64, fy: f64, out: &mut [f32; 3]) {
    let mut fx = fx;
    let mut fy = fy;
    if (fx - fx.round()).abs() < SNAP {
        fx = fx.round();
    }
    if (fy - fy.round()).abs() < SNAP {
        fy = fy.round();
    }
    let w = img.width() as i64;
    let h = img.height() as i64;
    let x0 = fx.floor() as i64;
    let y0 = fy.floor() as i64;
    let tx = (fx - x0 as f64) as f32;
    let ty = (fy - y0 as f64) as f32;
    let cx = |x: i64| x.clamp(0, w - 1) as usize;
    let cy = |y: i64| y.clamp(0, h - 1) as usize;
    let p00 = img.pixel(cy(y0), cx(x0));
    if tx == 0.0 && ty == 0.0 {
        *out = p00;
        return;
    }
    let p01 = img.pixel(cy(y0), cx(x0 + 1));
    let p10 = img.pixel(cy(y0 + 1), cx(x0));
    let p11 = img.pixel(cy(y0 + 1), cx(x0 + 1));
    for c in 0..3 {
        let top = p00[c] + tx * (p01[c] - p00[c]);
        let bot = p10[c] + tx * (p11[c] - p10[c]);
        out[c] = top + ty * (bot - top);
    }
}

fn inverse_warp(
    src: &Image,
    h: usize,
    w: usize,
    map: impl Fn(f64, f64) -> (f64, f64) + Sync,
) -> Image {
    let mut out = Image::new(h, w);
    let inv_w = 1.0 / w as f64;
    let inv_h = 1.0 / h as f64;
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    let mut px = [0.0f32; 3];
    for y in 0..h {
        let v = (y as f64 + 0.5) * inv_h;
        for x in 0..w {
            let u = (x as f64 + 0.5) * inv_w;
            let (su, sv) = map(u, v);
            sample_bilinear(src, su * sw - 0.5, sv * sh - 0.5, &mut px);
            out.set(y, x, px);
        }
    }
    out.clamp_in_place();
    out
}

/// Projective warp; `h` maps output coordinates to source coordinates.
/// The identity homography returns the input bit-exactly.
pub fn warp_perspective(src: &Image, h: &Homography) -> Result<Image> {
    warp_perspective_to(src, h, src.height(), src.width())
}

/// Same warp rendered onto an explicitly sized raster; normalized
/// coordinates make the transform raster-independent, which is what keeps
/// the degraded and groundtruth chains aligned across their different
/// working resolutions.
pub fn warp_perspective_to(src: &Image, h: &Homography, out_h: usize, out_w: usize) -> Result<Image> {
    if h.det().abs() < 1e-9 {
        return Err(Error::contract("homography not invertible"));
    }
    if h.is_identity() && (out_h, out_w) == (src.height(), src.width()) {
        return Ok(src.clone());
    }
    Ok(inverse_warp(src, out_h, out_w, |u, v| h.apply(u, v)))
}

/// Radial lens distortion; zero coefficients return the input bit-exactly.
pub fn radial_distort(src: &Image, d: &RadialDistortion) -> Result<Image> {
    // re-validate so hand-built structs cannot smuggle in fold-over
    let d = RadialDistortion::new(d.k1, d.k2, d.center)?;
    if d.is_none() {
        return Ok(src.clone());
    }
    Ok(inverse_warp(src, src.height(), src.width(), |u, v| d.map(u, v)))
}
