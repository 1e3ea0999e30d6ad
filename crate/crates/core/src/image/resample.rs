//! Separable filtering and resampling: the anti-alias filter ahead of the
//! simulated sensor, the light post-demosaic denoiser, Gaussian-prefiltered
//! decimation, and Catmull-Rom bicubic resizing.

use super::Image;
use crate::error::{Error, Result};

fn normalize(mut k: Vec<f64>) -> Vec<f64> {
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    normalize(k)
}

/// A box of `plateau` unit-spaced taps convolved with a Gaussian, sampled
/// symmetrically. Plateau 0 (or 1) degenerates to the plain Gaussian.
fn flat_top_kernel(sigma: f64, plateau: usize) -> Vec<f64> {
    let p = plateau.max(1);
    let half_span = (p - 1) as f64 / 2.0;
    let radius = (3.0 * sigma + half_span).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        let mut acc = 0.0;
        for j in 0..p {
            let d = x - (j as f64 - half_span);
            acc += (-d * d / (2.0 * sigma * sigma)).exp();
        }
        k.push(acc);
    }
    normalize(k)
}

fn to_planes(img: &Image) -> [Vec<f32>; 3] {
    let n = img.height() * img.width();
    let mut planes = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for px in img.data().chunks_exact(3) {
        planes[0].push(px[0]);
        planes[1].push(px[1]);
        planes[2].push(px[2]);
    }
    planes
}

fn from_planes(h: usize, w: usize, planes: &[Vec<f32>; 3]) -> Image {
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        data.push(planes[0][i]);
        data.push(planes[1][i]);
        data.push(planes[2][i]);
    }
    let mut img = Image::from_data(h, w, data).expect("plane sizes consistent");
    img.clamp_in_place();
    img
}

/// Horizontal pass of a centered odd kernel with border replication.
fn filter_rows(plane: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let radius = kernel.len() / 2;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let orow = &mut out[y * w..(y + 1) * w];
        for (x, o) in orow.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (j, kv) in kernel.iter().enumerate() {
                let sx = (x as i64 + j as i64 - radius as i64).clamp(0, w as i64 - 1) as usize;
                acc += kv * row[sx] as f64;
            }
            *o = acc as f32;
        }
    }
    out
}

fn filter_cols(plane: &[f32], h: usize, w: usize, kernel: &[f64]) -> Vec<f32> {
    let radius = kernel.len() / 2;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (j, kv) in kernel.iter().enumerate() {
                let sy = (y as i64 + j as i64 - radius as i64).clamp(0, h as i64 - 1) as usize;
                acc += kv * plane[sy * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

fn convolve_separable(src: &Image, kernel: &[f64]) -> Image {
    let (h, w) = (src.height(), src.width());
    let mut planes = to_planes(src);
    for p in &mut planes {
        let tmp = filter_rows(p, h, w, kernel);
        *p = filter_cols(&tmp, h, w, kernel);
    }
    from_planes(h, w, &planes)
}

/// Anti-alias filter of the simulated camera: flat-top Gaussian, unit sum,
/// border replication.
pub fn flat_top_gaussian(src: &Image, sigma: f64, plateau: usize) -> Result<Image> {
    if sigma <= 0.0 {
        return Err(Error::contract(format!(
            "flat_top_gaussian sigma must be positive, got {sigma}"
        )));
    }
    Ok(convolve_separable(src, &flat_top_kernel(sigma, plateau)))
}

/// Tap weights of the flat-top kernel; exposed for the impulse-response
/// tests.
#[cfg(test)]
pub(crate) fn flat_top_taps(sigma: f64, plateau: usize) -> Vec<f64> {
    flat_top_kernel(sigma, plateau)
}

/// Light in-camera smoothing after demosaicing: fixed 3x3 Gaussian,
/// sigma 0.5.
pub fn denoise_light(src: &Image) -> Image {
    convolve_separable(src, &gaussian_kernel(0.5, 1))
}

#[cfg(test)]
pub(crate) fn denoise_taps() -> Vec<f64> {
    gaussian_kernel(0.5, 1)
}

/// Gaussian-prefiltered decimation by an integral factor. The filter taps
/// are centered on each output cell ((factor-1)/2 into it), which keeps the
/// coarse grid phase-consistent with `resize_bicubic` upsampling.
fn polyphase_decimate(src: &Image, factor: usize, sigma: f64, gain: f64) -> Image {
    let (h, w) = (src.height(), src.width());
    let (oh, ow) = (h / factor, w / factor);
    let center = (factor - 1) as f64 / 2.0;
    let lo = (center - 3.0 * sigma).floor() as i64;
    let hi = (center + 3.0 * sigma).ceil() as i64;
    let taps = normalize(
        (lo..=hi)
            .map(|j| {
                let d = j as f64 - center;
                (-d * d / (2.0 * sigma * sigma)).exp()
            })
            .collect(),
    );

    let planes = to_planes(src);
    let mut out_planes = [Vec::new(), Vec::new(), Vec::new()];
    for (pi, plane) in planes.iter().enumerate() {
        // horizontal: h x ow
        let mut mid = vec![0.0f32; h * ow];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for xo in 0..ow {
                let base = (xo * factor) as i64 + lo;
                let mut acc = 0.0f64;
                for (j, t) in taps.iter().enumerate() {
                    let sx = (base + j as i64).clamp(0, w as i64 - 1) as usize;
                    acc += t * row[sx] as f64;
                }
                mid[y * ow + xo] = acc as f32;
            }
        }
        // vertical: oh x ow
        let mut outp = vec![0.0f32; oh * ow];
        for yo in 0..oh {
            let base = (yo * factor) as i64 + lo;
            for xo in 0..ow {
                let mut acc = 0.0f64;
                for (j, t) in taps.iter().enumerate() {
                    let sy = (base + j as i64).clamp(0, h as i64 - 1) as usize;
                    acc += t * mid[sy * ow + xo] as f64;
                }
                outp[yo * ow + xo] = (acc * gain) as f32;
            }
        }
        out_planes[pi] = outp;
    }
    from_planes(oh, ow, &out_planes)
}

/// Blur-then-decimate with sigma = factor/2; the coarse-scale image
/// preparation ahead of the restoration networks.
pub fn downsample_gaussian(src: &Image, factor: usize) -> Result<Image> {
    if factor < 1 {
        return Err(Error::contract("downsample factor must be >= 1"));
    }
    if src.height() % factor != 0 || src.width() % factor != 0 {
        return Err(Error::contract(format!(
            "image {}x{} not divisible by downsample factor {factor}; pad or crop first",
            src.height(),
            src.width()
        )));
    }
    if factor == 1 {
        return Ok(src.clone());
    }
    Ok(polyphase_decimate(src, factor, factor as f64 / 2.0, 1.0))
}

/// Map a simulated-sensor raster back to output resolution. The heavier
/// prefilter (sigma = 1.3 * ratio) averages out the subpixel/CFA sampling
/// lattice while leaving the low-frequency beat patterns in place; `gain`
/// compensates the brightness lost when one emitting stripe per cell is
/// spread over three columns.
pub fn resample_to(src: &Image, out_h: usize, out_w: usize, gain: f64) -> Result<Image> {
    if out_h == 0 || out_w == 0 || src.height() % out_h != 0 || src.width() % out_w != 0 {
        return Err(Error::contract(format!(
            "resample {}x{} -> {out_h}x{out_w} is not an integral decimation",
            src.height(),
            src.width()
        )));
    }
    let fy = src.height() / out_h;
    let fx = src.width() / out_w;
    if fy != fx {
        return Err(Error::contract(format!(
            "resample requires equal ratios, got {fy} vs {fx}"
        )));
    }
    if fy == 1 && gain == 1.0 {
        return Ok(src.clone());
    }
    Ok(polyphase_decimate(src, fy, 1.3 * fy as f64, gain))
}

fn catmull_rom_weights(t: f64) -> [f64; 4] {
    [
        ((-0.5 * t + 1.0) * t - 0.5) * t,
        (1.5 * t - 2.5) * t * t + 1.0,
        ((-1.5 * t + 2.0) * t + 0.5) * t,
        (0.5 * t - 0.5) * t * t,
    ]
}

/// Catmull-Rom bicubic resize (a = -0.5) with border replication, pixel
/// centers aligned between grids.
pub fn resize_bicubic(src: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("resize target must be non-empty"));
    }
    let (h, w) = (src.height(), src.width());
    if (out_h, out_w) == (h, w) {
        return Ok(src.clone());
    }
    let planes = to_planes(src);

    // horizontal: h x out_w
    let sx = w as f64 / out_w as f64;
    let mut mids: [Vec<f32>; 3] = [
        vec![0.0; h * out_w],
        vec![0.0; h * out_w],
        vec![0.0; h * out_w],
    ];
    for xo in 0..out_w {
        let pos = (xo as f64 + 0.5) * sx - 0.5;
        let x0 = pos.floor() as i64;
        let wts = catmull_rom_weights(pos - x0 as f64);
        for (pi, plane) in planes.iter().enumerate() {
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                let mut acc = 0.0f64;
                for (j, wt) in wts.iter().enumerate() {
                    let xs = (x0 - 1 + j as i64).clamp(0, w as i64 - 1) as usize;
                    acc += wt * row[xs] as f64;
                }
                mids[pi][y * out_w + xo] = acc as f32;
            }
        }
    }

    // vertical: out_h x out_w
    let sy = h as f64 / out_h as f64;
    let mut outs: [Vec<f32>; 3] = [
        vec![0.0; out_h * out_w],
        vec![0.0; out_h * out_w],
        vec![0.0; out_h * out_w],
    ];
    for yo in 0..out_h {
        let pos = (yo as f64 + 0.5) * sy - 0.5;
        let y0 = pos.floor() as i64;
        let wts = catmull_rom_weights(pos - y0 as f64);
        for (pi, mid) in mids.iter().enumerate() {
            for xo in 0..out_w {
                let mut acc = 0.0f64;
                for (j, wt) in wts.iter().enumerate() {
                    let ys = (y0 - 1 + j as i64).clamp(0, h as i64 - 1) as usize;
                    acc += wt * mid[ys * out_w + xo] as f64;
                }
                outs[pi][yo * out_w + xo] = acc as f32;
            }
        }
    }
    Ok(from_planes(out_h, out_w, &outs))
}

/// Fixed-ratio bicubic upsampling of the coarse restoration back to native
/// resolution.
pub fn upsample_bicubic(src: &Image, factor: usize) -> Result<Image> {
    if factor < 1 {
        return Err(Error::contract("upsample factor must be >= 1"));
    }
    resize_bicubic(src, src.height() * factor, src.width() * factor)
}

#[cfg(test)]
pub(crate) fn catmull_rom_at(t: f64) -> [f64; 4] {
    catmull_rom_weights(t)
}
