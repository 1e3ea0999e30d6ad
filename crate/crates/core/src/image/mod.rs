//! Pure, deterministic image kernels shared by the degradation synthesizer
//! and the networks' fixed resampling stages.
//!
//! Pixels are f32 in `[0,1]`, row-major, channel-interleaved. Every
//! operation clamps its output back into range on exit and is a pure
//! function of its inputs (plus an explicit seed where noise is involved).

mod cfa;
mod geom;
pub mod io;
mod jpeg;
mod noise;
mod resample;

pub use cfa::{bayer_sample, demosaic_bilinear, subpixel_render};
pub use geom::{radial_distort, warp_perspective, warp_perspective_to, Homography, RadialDistortion};
pub use jpeg::jpeg_degrade;
pub use noise::{add_gaussian_noise, add_gaussian_noise_mosaic};
pub use resample::{
    denoise_light, downsample_gaussian, flat_top_gaussian, resample_to, resize_bicubic,
    upsample_bicubic,
};

use crate::error::{Error, Result};

/// RGB raster in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::contract(format!(
                "image {height}x{width} wants {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    /// Build from a per-pixel closure returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                img.set(y, x, rgb);
            }
        }
        img.clamp_in_place();
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let off = (y * self.width + x) * 3;
        self.data[off..off + 3].copy_from_slice(&rgb);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let off = (y * self.width + x) * 3;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Rec.601 luma of one pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f32 {
        let p = self.pixel(y, x);
        0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Replicate the border outward by `margin` pixels on every side.
    pub fn pad_replicate(&self, margin: usize) -> Image {
        let (h, w) = (self.height, self.width);
        Image::from_fn(h + 2 * margin, w + 2 * margin, |y, x| {
            let sy = y.saturating_sub(margin).min(h - 1);
            let sx = x.saturating_sub(margin).min(w - 1);
            self.pixel(sy, sx)
        })
    }

    /// Axis-aligned crop.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::contract(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds image {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::new(h, w);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the 8-bit quantization of the raster; used by the
    /// pipeline-order guard and determinism tests.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for d in (self.height as u64).to_le_bytes() {
            mix(d);
        }
        for d in (self.width as u64).to_le_bytes() {
            mix(d);
        }
        for v in &self.data {
            mix((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
        h
    }
}

/// Single-plane RGGB mosaic: each site carries the one color its filter
/// admits. (0,0) red, (0,1)/(1,0) green, (1,1) blue within every 2x2 tile.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerMosaic {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl BayerMosaic {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "mosaic {height}x{width} wants {} samples, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(BayerMosaic {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Color admitted at a site: 0 red, 1 green, 2 blue.
    #[inline]
    pub fn site_color(y: usize, x: usize) -> usize {
        match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests;
