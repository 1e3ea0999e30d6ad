//! The screen-capture degradation simulator: composes the image kernels
//! into the ten-stage pipeline that turns a clean patch into an aligned
//! (moire, groundtruth) pair, plus dataset construction around it.
//!
//! Stage order is data: [`PIPELINE_ORDER`] drives the canonical run, and
//! [`run_pipeline_with_order`] accepts any permutation so tests can pin the
//! ordering by hash. Every random choice derives from explicit seeds, so a
//! manifest record replays to the same bytes.

mod manifest;

pub use manifest::{DatasetManifest, ManifestRecord, Split};

use crate::error::{Error, Result};
use crate::image::{
    add_gaussian_noise, add_gaussian_noise_mosaic, bayer_sample, demosaic_bilinear, denoise_light,
    flat_top_gaussian, io, jpeg_degrade, radial_distort, resample_to, subpixel_render,
    warp_perspective_to, BayerMosaic, Homography, Image, RadialDistortion,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// SplitMix64; used to derive independent per-record and per-stage seeds
/// from one master seed.
pub fn mix_seed(master: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NOISE_SALT: u64 = 0x6e6f_6973;

/// Sampling intervals for every random field of the simulator.
#[derive(Clone, Debug)]
pub struct ParamRanges {
    /// Uniform perturbation of each projective corner, as a fraction of
    /// width/height.
    pub corner_jitter: f64,
    /// Screen content scale on the sensor (the subpixel/sensor pitch
    /// ratio), folded into the homography.
    pub content_scale: (f64, f64),
    pub k1: (f64, f64),
    pub k2: (f64, f64),
    pub aa_sigma: (f64, f64),
    pub aa_plateau_max: usize,
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
}

impl Default for ParamRanges {
    fn default() -> Self {
        ParamRanges {
            corner_jitter: 0.04,
            content_scale: (0.8, 1.3),
            k1: (-0.08, 0.04),
            k2: (0.0, 0.0),
            aa_sigma: (0.5, 1.2),
            aa_plateau_max: 2,
            noise_sigma: (0.002, 0.01),
            jpeg_quality: (60, 95),
        }
    }
}

impl ParamRanges {
    /// Lower-degradation halves of the declared ranges; the pool the
    /// supervised pretraining stage draws from.
    pub fn pretrain() -> Self {
        ParamRanges {
            corner_jitter: 0.04,
            content_scale: (0.8, 1.05),
            k1: (-0.08, -0.02),
            k2: (0.0, 0.0),
            aa_sigma: (0.5, 0.85),
            aa_plateau_max: 1,
            noise_sigma: (0.002, 0.006),
            jpeg_quality: (78, 95),
        }
    }

    /// Stronger-degradation halves, disjoint from [`ParamRanges::pretrain`];
    /// stands in for the unpaired "real capture" pool consumed by the
    /// adversarial retraining stage.
    pub fn real_standin() -> Self {
        ParamRanges {
            corner_jitter: 0.04,
            content_scale: (1.05, 1.3),
            k1: (-0.02, 0.04),
            k2: (0.0, 0.0),
            aa_sigma: (0.85, 1.2),
            aa_plateau_max: 2,
            noise_sigma: (0.006, 0.01),
            jpeg_quality: (60, 77),
        }
    }
}

/// One image's complete random draw; determines the output pair exactly.
#[derive(Clone, Debug)]
pub struct SynthesisParams {
    pub seed: u64,
    /// Inverse map, sensor coordinates to rendered-screen coordinates;
    /// includes the content scale.
    pub homography: Homography,
    pub distortion: RadialDistortion,
    pub aa_sigma: f64,
    pub aa_plateau: usize,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
    /// Ratio of the simulated sensor grid to the output grid (the subpixel
    /// rendering factor).
    pub output_scale: usize,
}

impl SynthesisParams {
    /// Geometry- and noise-free draw: identity homography, zero
    /// distortion, minimal anti-alias blur, quality 100.
    pub fn identity(seed: u64) -> Self {
        SynthesisParams {
            seed,
            homography: Homography::identity(),
            distortion: RadialDistortion::none(),
            aa_sigma: 0.5,
            aa_plateau: 0,
            noise_sigma: 0.0,
            jpeg_quality: 100,
            output_scale: 3,
        }
    }
}

/// Draw a full parameter set. Deterministic for a fixed seed; the corner
/// perturbation keeps the quadrilateral convex, so the homography is
/// always invertible.
pub fn sample_params(seed: u64, ranges: &ParamRanges) -> SynthesisParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let j = ranges.corner_jitter;
    let mut corner = |cx: f64, cy: f64| {
        (
            cx + rng.random_range(-j..j),
            cy + rng.random_range(-j..j),
        )
    };
    let corners = [
        corner(0.0, 0.0),
        corner(1.0, 0.0),
        corner(1.0, 1.0),
        corner(0.0, 1.0),
    ];
    let scale = rng.random_range(ranges.content_scale.0..=ranges.content_scale.1);
    let k1 = rng.random_range(ranges.k1.0..=ranges.k1.1);
    let k2 = if ranges.k2.0 == ranges.k2.1 {
        ranges.k2.0
    } else {
        rng.random_range(ranges.k2.0..=ranges.k2.1)
    };
    let aa_sigma = rng.random_range(ranges.aa_sigma.0..=ranges.aa_sigma.1);
    let aa_plateau = rng.random_range(0..=ranges.aa_plateau_max);
    let noise_sigma = rng.random_range(ranges.noise_sigma.0..=ranges.noise_sigma.1);
    let jpeg_quality = rng.random_range(ranges.jpeg_quality.0..=ranges.jpeg_quality.1);

    let perspective =
        Homography::from_unit_square(&corners).expect("jittered unit square stays convex");
    let zoom = Homography::scale_about(scale, 0.5, 0.5).expect("scale is positive");
    let homography = perspective.compose(&zoom).expect("composition stays invertible");
    let distortion =
        RadialDistortion::new(k1, k2, (0.5, 0.5)).expect("declared k ranges cannot fold");

    SynthesisParams {
        seed,
        homography,
        distortion,
        aa_sigma,
        aa_plateau,
        noise_sigma,
        jpeg_quality,
        output_scale: 3,
    }
}

/// The ten stages of the simulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineStep {
    SubpixelRender,
    PerspectiveWarp,
    LensDistort,
    AntiAlias,
    CfaSample,
    SensorNoise,
    Demosaic,
    Denoise,
    JpegCompress,
    OutputRescale,
}

/// Canonical stage order.
pub const PIPELINE_ORDER: [PipelineStep; 10] = [
    PipelineStep::SubpixelRender,
    PipelineStep::PerspectiveWarp,
    PipelineStep::LensDistort,
    PipelineStep::AntiAlias,
    PipelineStep::CfaSample,
    PipelineStep::SensorNoise,
    PipelineStep::Demosaic,
    PipelineStep::Denoise,
    PipelineStep::JpegCompress,
    PipelineStep::OutputRescale,
];

enum Frame {
    Rgb(Image),
    Raw(BayerMosaic),
}

impl Frame {
    fn into_rgb(self) -> Image {
        match self {
            Frame::Rgb(img) => img,
            // a raw plane viewed as an image is gray
            Frame::Raw(m) => {
                let mut img = Image::new(m.height(), m.width());
                for (px, v) in img.data_mut().chunks_exact_mut(3).zip(m.data()) {
                    px.fill(*v);
                }
                img
            }
        }
    }
}

fn crop_to_multiple(img: Image, m: usize) -> Image {
    let h = img.height() / m * m;
    let w = img.width() / m * m;
    if (h, w) == (img.height(), img.width()) {
        img
    } else {
        img.crop(0, 0, h, w).expect("floor crop fits")
    }
}

/// Run the degradation stages in the given order. Stages are total over
/// both raster kinds so any permutation executes; only the canonical order
/// is the simulator.
pub fn run_pipeline_with_order(
    src: &Image,
    p: &SynthesisParams,
    order: &[PipelineStep; 10],
) -> Result<Image> {
    let mut frame = Frame::Rgb(src.clone());
    let noise_seed = mix_seed(p.seed, NOISE_SALT);
    for step in order {
        frame = match step {
            PipelineStep::SubpixelRender => Frame::Rgb(subpixel_render(&frame.into_rgb())),
            PipelineStep::PerspectiveWarp => {
                let img = frame.into_rgb();
                let (h, w) = (img.height(), img.width());
                Frame::Rgb(warp_perspective_to(&img, &p.homography, h, w)?)
            }
            PipelineStep::LensDistort => Frame::Rgb(radial_distort(&frame.into_rgb(), &p.distortion)?),
            PipelineStep::AntiAlias => {
                Frame::Rgb(flat_top_gaussian(&frame.into_rgb(), p.aa_sigma, p.aa_plateau)?)
            }
            PipelineStep::CfaSample => {
                let img = crop_to_multiple(frame.into_rgb(), 2);
                Frame::Raw(bayer_sample(&img)?)
            }
            PipelineStep::SensorNoise => match frame {
                Frame::Raw(m) => Frame::Raw(add_gaussian_noise_mosaic(&m, p.noise_sigma, noise_seed)?),
                Frame::Rgb(img) => Frame::Rgb(add_gaussian_noise(&img, p.noise_sigma, noise_seed)?),
            },
            PipelineStep::Demosaic => match frame {
                Frame::Raw(m) => Frame::Rgb(demosaic_bilinear(&m)),
                // out of order: project through the CFA lattice first
                Frame::Rgb(img) => {
                    let img = crop_to_multiple(img, 2);
                    Frame::Rgb(demosaic_bilinear(&bayer_sample(&img)?))
                }
            },
            PipelineStep::Denoise => Frame::Rgb(denoise_light(&frame.into_rgb())),
            PipelineStep::JpegCompress => Frame::Rgb(jpeg_degrade(&frame.into_rgb(), p.jpeg_quality)?),
            PipelineStep::OutputRescale => {
                let img = crop_to_multiple(frame.into_rgb(), p.output_scale);
                let (oh, ow) = (img.height() / p.output_scale, img.width() / p.output_scale);
                Frame::Rgb(resample_to(&img, oh, ow, 3.0)?)
            }
        };
    }
    Ok(frame.into_rgb())
}

/// Margin (in output pixels) synthesized beyond the requested frame and
/// cropped away afterwards. The clamped border windows of the output
/// prefilter otherwise phase-bias the subpixel lattice, and the gain of 3
/// turns that bias into a visible border band. 8 output pixels cover the
/// widest filter support and keep the CFA phase and JPEG blocks aligned
/// (24 sensor pixels = 3 blocks).
const PAD: usize = 8;

/// Produce the aligned (degraded, groundtruth) pair. Both chains run on a
/// border-padded source; the groundtruth runs the same geometric chain at
/// the sensor raster and comes back down through the same prefilter (at
/// unit gain), so both images share one passband and stay aligned to well
/// under a pixel.
pub fn synthesize_pair(src: &Image, p: &SynthesisParams) -> Result<(Image, Image)> {
    if src.height() < 128 || src.width() < 128 {
        return Err(Error::contract(format!(
            "synthesize_pair needs sources of at least 128x128, got {}x{}",
            src.height(),
            src.width()
        )));
    }
    let padded = src.pad_replicate(PAD);
    let degraded = run_pipeline_with_order(&padded, p, &PIPELINE_ORDER)?;
    let degraded = degraded.crop(PAD, PAD, src.height(), src.width())?;

    let sh = padded.height() * p.output_scale;
    let sw = padded.width() * p.output_scale;
    let gt = warp_perspective_to(&padded, &p.homography, sh, sw)?;
    let gt = radial_distort(&gt, &p.distortion)?;
    let gt = resample_to(&gt, padded.height(), padded.width(), 1.0)?;
    let gt = gt.crop(PAD, PAD, src.height(), src.width())?;
    Ok((degraded, gt))
}

/// Everything `build_dataset` needs beyond the directories.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub n_patches: usize,
    pub patch_size: usize,
    pub master_seed: u64,
    pub ranges: ParamRanges,
    /// Unpaired clean crops for the adversarial stage (may be zero).
    pub n_clean: usize,
}

impl DatasetSpec {
    pub fn new(n_patches: usize, master_seed: u64) -> Self {
        DatasetSpec {
            n_patches,
            patch_size: 512,
            master_seed,
            ranges: ParamRanges::default(),
            n_clean: 0,
        }
    }
}

fn list_sources(src_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(src_dir).map_err(|e| Error::io(src_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(src_dir, e))?;
        let path = entry.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn luminance_std(img: &Image) -> f64 {
    let n = (img.height() * img.width()) as f64;
    let mut acc = 0.0f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            acc += img.luminance(y, x) as f64;
        }
    }
    let mean = acc / n;
    let mut var = 0.0f64;
    for y in 0..img.height() {
        for x in 0..img.width() {
            var += (img.luminance(y, x) as f64 - mean).powi(2);
        }
    }
    (var / n).sqrt()
}

/// Random crop rejecting near-constant patches (up to a bounded number of
/// redraws).
fn crop_patch(src: &Image, size: usize, rng: &mut ChaCha12Rng) -> (Image, usize, usize) {
    let max_y = src.height() - size;
    let max_x = src.width() - size;
    let mut last = None;
    for _ in 0..64 {
        let y0 = if max_y == 0 { 0 } else { rng.random_range(0..=max_y) };
        let x0 = if max_x == 0 { 0 } else { rng.random_range(0..=max_x) };
        let patch = src.crop(y0, x0, size, size).expect("crop bounds checked");
        if luminance_std(&patch) >= 1e-3 {
            return (patch, y0, x0);
        }
        last = Some((patch, y0, x0));
    }
    last.expect("at least one crop attempted")
}

/// Crop patches from the sources, synthesize pairs with per-record seeds,
/// write PNGs plus the manifest. Record ids split 75/25 train/test.
/// Identical inputs and master seed reproduce the output byte for byte.
pub fn build_dataset(src_dir: &Path, out_dir: &Path, spec: &DatasetSpec) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut sources = Vec::new();
    for path in list_sources(src_dir)? {
        match io::load_png(&path) {
            Ok(img) => {
                if img.height() >= spec.patch_size.max(128) && img.width() >= spec.patch_size.max(128)
                {
                    sources.push((path, img));
                } else {
                    eprintln!(
                        "skipping {} ({}x{} smaller than patch size {})",
                        path.display(),
                        img.height(),
                        img.width(),
                        spec.patch_size
                    );
                }
            }
            Err(e) => eprintln!("skipping unreadable {}: {e}", path.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::contract(format!(
            "no usable sources in {}: need at least 1 decodable PNG of {}x{} or larger, found 0",
            src_dir.display(),
            spec.patch_size.max(128),
            spec.patch_size.max(128)
        )));
    }
    if spec.patch_size < 128 {
        return Err(Error::contract(format!(
            "patch size must be at least 128, got {}",
            spec.patch_size
        )));
    }

    let records: Vec<ManifestRecord> = (0..spec.n_patches as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.master_seed, id));
            let source_ix = rng.random_range(0..sources.len());
            let (patch, y0, x0) = crop_patch(&sources[source_ix].1, spec.patch_size, &mut rng);
            let params = sample_params(mix_seed(spec.master_seed, id | 1 << 63), &spec.ranges);
            let (degraded, gt) = synthesize_pair(&patch, &params)?;
            let degraded_name = format!("degraded_{id:05}.png");
            let gt_name = format!("gt_{id:05}.png");
            io::save_png(out_dir.join(&degraded_name), &degraded)?;
            io::save_png(out_dir.join(&gt_name), &gt)?;
            Ok(ManifestRecord {
                id,
                split: if id % 4 == 3 { Split::Test } else { Split::Train },
                degraded: degraded_name,
                groundtruth: gt_name,
                source: sources[source_ix].0.display().to_string(),
                crop_y: y0,
                crop_x: x0,
                params,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let clean_pool: Vec<String> = (0..spec.n_clean as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha12Rng::seed_from_u64(mix_seed(spec.master_seed ^ 0xc1ea_u64, i));
            let source_ix = rng.random_range(0..sources.len());
            let (patch, _, _) = crop_patch(&sources[source_ix].1, spec.patch_size, &mut rng);
            let name = format!("clean_{i:04}.png");
            io::save_png(out_dir.join(&name), &patch)?;
            Ok(name)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        dir: out_dir.to_path_buf(),
        records,
        clean_pool,
    };
    manifest.save(out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests;
