//! JPEG-shaped compression noise: color transform, 4:2:0 chroma
//! subsampling, 8x8 block DCT, quantization against the standard tables
//! scaled by the libjpeg quality law, then the full decode path back to
//! RGB. Entropy coding is lossless and therefore skipped; every artifact a
//! real round trip would imprint on the pixels is produced here.

use super::Image;
use crate::error::{Error, Result};

#[rustfmt::skip]
const LUMA_BASE: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA_BASE: [i32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// libjpeg quality scaling.
pub(crate) fn quant_table(base: &[i32; 64], quality: u8) -> [i32; 64] {
    let q = quality as i32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0i32; 64];
    for (o, b) in out.iter_mut().zip(base) {
        *o = ((b * scale + 50) / 100).clamp(1, 255);
    }
    out
}

#[cfg(test)]
pub(crate) fn luma_table(quality: u8) -> [i32; 64] {
    quant_table(&LUMA_BASE, quality)
}

pub(crate) struct Dct {
    cos: [[f64; 8]; 8], // cos[(x, u)]
    c: [f64; 8],
}

impl Dct {
    fn new() -> Self {
        let mut cos = [[0.0; 8]; 8];
        for (x, row) in cos.iter_mut().enumerate() {
            for (u, v) in row.iter_mut().enumerate() {
                *v = (((2 * x + 1) as f64) * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        let mut c = [1.0; 8];
        c[0] = 1.0 / 2.0f64.sqrt();
        Dct { cos, c }
    }

    fn forward_1d(&self, f: &[f64; 8]) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (u, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for x in 0..8 {
                acc += f[x] * self.cos[x][u];
            }
            *o = 0.5 * self.c[u] * acc;
        }
        out
    }

    fn inverse_1d(&self, coef: &[f64; 8]) -> [f64; 8] {
        let mut out = [0.0; 8];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for u in 0..8 {
                acc += 0.5 * self.c[u] * coef[u] * self.cos[x][u];
            }
            *o = acc;
        }
        out
    }

    /// Separable 2-D forward transform of one block (row-major).
    pub fn forward(&self, block: &mut [f64; 64]) {
        let mut tmp = [0.0f64; 64];
        for y in 0..8 {
            let row: [f64; 8] = std::array::from_fn(|x| block[y * 8 + x]);
            let t = self.forward_1d(&row);
            tmp[y * 8..y * 8 + 8].copy_from_slice(&t);
        }
        for x in 0..8 {
            let col: [f64; 8] = std::array::from_fn(|y| tmp[y * 8 + x]);
            let t = self.forward_1d(&col);
            for y in 0..8 {
                block[y * 8 + x] = t[y];
            }
        }
    }

    pub fn inverse(&self, block: &mut [f64; 64]) {
        let mut tmp = [0.0f64; 64];
        for x in 0..8 {
            let col: [f64; 8] = std::array::from_fn(|y| block[y * 8 + x]);
            let t = self.inverse_1d(&col);
            for y in 0..8 {
                tmp[y * 8 + x] = t[y];
            }
        }
        for y in 0..8 {
            let row: [f64; 8] = std::array::from_fn(|x| tmp[y * 8 + x]);
            let t = self.inverse_1d(&row);
            block[y * 8..y * 8 + 8].copy_from_slice(&t);
        }
    }
}

#[cfg(test)]
pub(crate) fn test_dct() -> Dct {
    Dct::new()
}

/// Reference forward DCT evaluated straight from the definition; only used
/// to cross-check the separable implementation in tests.
#[cfg(test)]
pub(crate) fn dct_forward_direct(block: &[f64; 64]) -> [f64; 64] {
    let mut out = [0.0f64; 64];
    let c = |u: usize| if u == 0 { 1.0 / 2.0f64.sqrt() } else { 1.0 };
    for v in 0..8 {
        for u in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += block[y * 8 + x]
                        * (((2 * x + 1) as f64) * u as f64 * std::f64::consts::PI / 16.0).cos()
                        * (((2 * y + 1) as f64) * v as f64 * std::f64::consts::PI / 16.0).cos();
                }
            }
            out[v * 8 + u] = 0.25 * c(u) * c(v) * acc;
        }
    }
    out
}

/// Quantization round trip of one plane (values in 0..255 space).
fn degrade_plane(plane: &mut [f64], h: usize, w: usize, table: &[i32; 64], dct: &Dct) {
    let bh = h.div_ceil(8) * 8;
    let bw = w.div_ceil(8) * 8;
    let mut padded = vec![0.0f64; bh * bw];
    for y in 0..bh {
        let sy = y.min(h - 1);
        for x in 0..bw {
            padded[y * bw + x] = plane[sy * w + x.min(w - 1)];
        }
    }
    for by in (0..bh).step_by(8) {
        for bx in (0..bw).step_by(8) {
            let mut block = [0.0f64; 64];
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = padded[(by + y) * bw + bx + x] - 128.0;
                }
            }
            dct.forward(&mut block);
            for (v, q) in block.iter_mut().zip(table) {
                *v = (*v / *q as f64).round() * *q as f64;
            }
            dct.inverse(&mut block);
            for y in 0..8 {
                for x in 0..8 {
                    padded[(by + y) * bw + bx + x] = block[y * 8 + x] + 128.0;
                }
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = padded[y * bw + x];
        }
    }
}

/// Apply the compression round trip at the given quality (1..=100). The
/// output is requantized to the 8-bit grid, matching what a decoder hands
/// back.
pub fn jpeg_degrade(src: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::contract(format!(
            "jpeg quality must be in 1..=100, got {quality}"
        )));
    }
    let (h, w) = (src.height(), src.width());
    let luma_q = quant_table(&LUMA_BASE, quality);
    let chroma_q = quant_table(&CHROMA_BASE, quality);
    let dct = Dct::new();

    // BT.601 full-range color transform, in 0..255 space.
    let mut yp = vec![0.0f64; h * w];
    let mut cb = vec![0.0f64; h * w];
    let mut cr = vec![0.0f64; h * w];
    for (i, px) in src.data().chunks_exact(3).enumerate() {
        let r = px[0] as f64 * 255.0;
        let g = px[1] as f64 * 255.0;
        let b = px[2] as f64 * 255.0;
        yp[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = -0.168735892 * r - 0.331264108 * g + 0.5 * b + 128.0;
        cr[i] = 0.5 * r - 0.418687589 * g - 0.081312411 * b + 128.0;
    }

    // 4:2:0: box-average 2x2 neighborhoods (edge-replicated for odd dims).
    let ch = h.div_ceil(2);
    let cw = w.div_ceil(2);
    let subsample = |plane: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0f64; ch * cw];
        for cy in 0..ch {
            for cx in 0..cw {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let sy = (2 * cy + dy).min(h - 1);
                        let sx = (2 * cx + dx).min(w - 1);
                        acc += plane[sy * w + sx];
                    }
                }
                out[cy * cw + cx] = acc / 4.0;
            }
        }
        out
    };
    let mut cb_s = subsample(&cb);
    let mut cr_s = subsample(&cr);

    degrade_plane(&mut yp, h, w, &luma_q, &dct);
    degrade_plane(&mut cb_s, ch, cw, &chroma_q, &dct);
    degrade_plane(&mut cr_s, ch, cw, &chroma_q, &dct);

    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ci = (y / 2) * cw + x / 2;
            let yv = yp[i];
            let cbv = cb_s[ci] - 128.0;
            let crv = cr_s[ci] - 128.0;
            let r = yv + 1.402 * crv;
            let g = yv - 0.344136286 * cbv - 0.714136286 * crv;
            let b = yv + 1.772 * cbv;
            let q = |v: f64| ((v.clamp(0.0, 255.0)).round() / 255.0) as f32;
            out.set(y, x, [q(r), q(g), q(b)]);
        }
    }
    out.clamp_in_place();
    Ok(out)
}
