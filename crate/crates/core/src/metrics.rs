//! Image quality metrics and the evaluation harness.
//!
//! PSNR is computed over all three channels jointly (moire is chromatic);
//! identical inputs report an infinite value, serialized as the literal
//! token `inf`. SSIM is the standard single-scale formulation: 11x11
//! Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 on unit range,
//! averaged over channels and all fully-interior windows.

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_dims(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::contract(format!(
            "{what} needs equal dims, got {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over unit-range images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b, "psnr")?;
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    let mse = acc / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn sep_filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut mid = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as i64 + j as i64 - r as i64).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[y * w + sx];
            }
            mid[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let sy = (y as i64 + j as i64 - r as i64).clamp(0, h as i64 - 1) as usize;
                acc += kv * mid[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Structural similarity, mean over all interior windows and channels.
/// Computed via separable Gaussian-weighted local moments; the direct
/// windowed form lives in the tests as its independent cross-check.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0f64;
    for c in 0..3 {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * 3 + c] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * 3 + c] as f64).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = sep_filter(&pa, h, w, &k);
        let mu_b = sep_filter(&pb, h, w, &k);
        let s_aa = sep_filter(&paa, h, w, &k);
        let s_bb = sep_filter(&pbb, h, w, &k);
        let s_ab = sep_filter(&pab, h, w, &k);

        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y in r..h - r {
            for x in r..w - r {
                let i = y * w + x;
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = s_aa[i] - ma * ma;
                let vb = s_bb[i] - mb * mb;
                let cov = s_ab[i] - ma * mb;
                let v = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                acc += v;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}

/// Serialize a PSNR value; infinite values become the token `inf`.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Per-image scores plus their aggregate means.
#[derive(Clone, Debug)]
pub struct EvalReport {
    /// What was compared (mode, checkpoints, dataset); echoed into the
    /// report file header.
    pub config: Vec<String>,
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub id: u64,
    pub psnr: f64,
    pub ssim: f64,
}

impl EvalReport {
    pub fn from_rows(config: Vec<String>, rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        EvalReport {
            config,
            rows,
            mean_psnr,
            mean_ssim,
        }
    }

    /// Line-oriented machine form: config echo, one row per image, means.
    pub fn to_text(&self) -> String {
        let mut out = String::from("eval-report v1\n");
        for c in &self.config {
            out.push_str(&format!("config\t{c}\n"));
        }
        for r in &self.rows {
            out.push_str(&format!(
                "image\t{}\t{}\t{:.6}\n",
                r.id,
                format_db(r.psnr),
                r.ssim
            ));
        }
        out.push_str(&format!(
            "mean\t{}\t{:.6}\n",
            format_db(self.mean_psnr),
            self.mean_ssim
        ));
        out
    }

    /// Aligned table for humans.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:>8} {:>12} {:>10}\n", "image", "PSNR (dB)", "SSIM"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>8} {:>12} {:>10.4}\n",
                r.id,
                format_db(r.psnr),
                r.ssim
            ));
        }
        out.push_str(&format!(
            "{:>8} {:>12} {:>10.4}\n",
            "mean",
            format_db(self.mean_psnr),
            self.mean_ssim
        ));
        out
    }
}


// ---- evaluation harness ----------------------------------------------------

use crate::image::{downsample_gaussian, io, Image as Img};
use crate::net::{CoarseGenerator, FineNetwork};
use crate::synth::{DatasetManifest, Split};
use crate::train::{apply_coarse, apply_fine, SCALE_FACTOR};
use std::path::Path;

/// What to compare against the groundtruth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Downsampled degraded input vs downsampled groundtruth: the no-op
    /// floor any coarse restoration must beat.
    BaselineCoarse,
    /// Coarse restoration vs downsampled groundtruth.
    Coarse,
    /// Raw degraded input vs groundtruth at native resolution.
    BaselineFull,
    /// Full two-scale restoration vs groundtruth.
    Full,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<EvalMode> {
        match s {
            "baseline-coarse" => Some(EvalMode::BaselineCoarse),
            "coarse" => Some(EvalMode::Coarse),
            "baseline-full" => Some(EvalMode::BaselineFull),
            "full" => Some(EvalMode::Full),
            _ => None,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            EvalMode::BaselineCoarse => "baseline-coarse",
            EvalMode::Coarse => "coarse",
            EvalMode::BaselineFull => "baseline-full",
            EvalMode::Full => "full",
        }
    }
}

fn grid(input: &Img, output: &Img, groundtruth: &Img) -> Img {
    let h = input.height();
    let w = input.width();
    let sep = 2usize;
    let mut out = Img::constant(h, w * 3 + sep * 2, [1.0, 1.0, 1.0]);
    for (i, img) in [input, output, groundtruth].iter().enumerate() {
        let x_off = i * (w + sep);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x_off + x, img.pixel(y, x));
            }
        }
    }
    out
}

/// Score one split of a dataset under the given comparison mode. Rows are
/// ordered by record id; checkpoints are validated before any image work;
/// `grids` optionally receives per-image input/output/groundtruth strips.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    manifest: &DatasetManifest,
    split: Split,
    mode: EvalMode,
    coarse: Option<&CoarseGenerator>,
    fine: Option<&FineNetwork>,
    limit: Option<usize>,
    grids: Option<&Path>,
    mut config: Vec<String>,
) -> Result<EvalReport> {
    if matches!(mode, EvalMode::Coarse | EvalMode::Full) && coarse.is_none() {
        return Err(Error::contract("this mode needs a coarse checkpoint"));
    }
    if matches!(mode, EvalMode::Full) && fine.is_none() {
        return Err(Error::contract("full mode needs a fine checkpoint"));
    }
    if let Some(dir) = grids {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut records = manifest.split(split);
    records.sort_by_key(|r| r.id);
    if let Some(n) = limit {
        records.truncate(n);
    }
    config.insert(0, format!("mode\t{}", mode.name()));
    config.push(format!("images\t{}", records.len()));

    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let degraded = io::load_png(manifest.degraded_path(r))?;
        let gt = io::load_png(manifest.groundtruth_path(r))?;
        let (input, output, reference) = match mode {
            EvalMode::BaselineCoarse => {
                let i = downsample_gaussian(&degraded, SCALE_FACTOR)?;
                let j = downsample_gaussian(&gt, SCALE_FACTOR)?;
                (i.clone(), i, j)
            }
            EvalMode::Coarse => {
                let i = downsample_gaussian(&degraded, SCALE_FACTOR)?;
                let j = downsample_gaussian(&gt, SCALE_FACTOR)?;
                let out = apply_coarse(coarse.unwrap(), &i)?;
                (i, out, j)
            }
            EvalMode::BaselineFull => (degraded.clone(), degraded, gt),
            EvalMode::Full => {
                let out = apply_fine(coarse.unwrap(), fine.unwrap(), &degraded)?;
                (degraded, out, gt)
            }
        };
        let p = psnr(&output, &reference)?;
        let s = ssim(&output, &reference)?;
        if let Some(dir) = grids {
            io::save_png(dir.join(format!("{:05}.png", r.id)), &grid(&input, &output, &reference))?;
        }
        rows.push(EvalRow {
            id: r.id,
            psnr: p,
            ssim: s,
        });
    }
    Ok(EvalReport::from_rows(config, rows))
}
