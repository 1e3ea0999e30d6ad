use super::resample::{catmull_rom_at, denoise_taps, flat_top_taps};
use super::*;
use crate::metrics::psnr;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn gray_ramp(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, x| {
        let v = x as f32 / (w - 1) as f32;
        [v, v, v]
    })
}

fn smooth_gradient(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |y, x| {
        let u = x as f32 / (w - 1) as f32;
        let v = y as f32 / (h - 1) as f32;
        [
            0.2 + 0.6 * u,
            0.3 + 0.5 * v,
            0.5 + 0.3 * (u - v).abs(),
        ]
    })
}

// ---- subpixel rendering -------------------------------------------------

#[test]
fn subpixel_white_pixel_is_rgb_stripes() {
    let src = Image::constant(1, 1, [1.0, 1.0, 1.0]);
    let out = subpixel_render(&src);
    assert_eq!((out.height(), out.width()), (3, 3));
    for y in 0..3 {
        assert_eq!(out.pixel(y, 0), [1.0, 0.0, 0.0]);
        assert_eq!(out.pixel(y, 1), [0.0, 1.0, 0.0]);
        assert_eq!(out.pixel(y, 2), [0.0, 0.0, 1.0]);
    }
}

#[test]
fn subpixel_black_pixel_is_dark() {
    let out = subpixel_render(&Image::constant(1, 1, [0.0, 0.0, 0.0]));
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn subpixel_channel_energy_triples() {
    // each channel value is replicated over the 3 rows of its stripe, so
    // plane sums come out exactly 3x the source (divided back out by the
    // later sensor-to-output downscale)
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let src = Image::from_fn(7, 5, |_, _| {
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]
    });
    let out = subpixel_render(&src);
    for c in 0..3 {
        let sum_in: f64 = (0..src.height() * src.width())
            .map(|i| src.data()[i * 3 + c] as f64)
            .sum();
        let sum_out: f64 = (0..out.height() * out.width())
            .map(|i| out.data()[i * 3 + c] as f64)
            .sum();
        assert!(
            (sum_out - 3.0 * sum_in).abs() < 1e-4 * sum_in.max(1.0),
            "channel {c}: {sum_out} vs 3*{sum_in}"
        );
    }
}

// ---- perspective warp ---------------------------------------------------

#[test]
fn warp_identity_bit_exact() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let src = Image::from_fn(16, 24, |_, _| [rng.random_range(0.0..1.0); 3]);
    let out = warp_perspective(&src, &Homography::identity()).unwrap();
    assert_eq!(out.data(), src.data());
}

#[test]
fn warp_translation_shifts_one_column() {
    let w = 8;
    let src = gray_ramp(4, w);
    // inverse map: output (u,v) samples source at (u - 1/w, v)
    let h = Homography::new([[1.0, 0.0, -1.0 / w as f64], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        .unwrap();
    let out = warp_perspective(&src, &h).unwrap();
    for y in 0..4 {
        for x in 1..w {
            assert!((out.get(y, x, 0) - src.get(y, x - 1, 0)).abs() < 1e-6);
        }
        // leftmost column replicates the border
        assert!((out.get(y, 0, 0) - src.get(y, 0, 0)).abs() < 1e-6);
    }
}

#[test]
fn warp_roundtrip_interior_psnr() {
    let src = smooth_gradient(96, 96);
    let h = Homography::from_unit_square(&[
        (0.02, 0.01),
        (0.99, -0.015),
        (1.01, 1.02),
        (-0.01, 0.985),
    ])
    .unwrap();
    let warped = warp_perspective(&src, &h).unwrap();
    let back = warp_perspective(&warped, &h.inverse().unwrap()).unwrap();
    let a = src.crop(8, 8, 80, 80).unwrap();
    let b = back.crop(8, 8, 80, 80).unwrap();
    let v = psnr(&a, &b).unwrap();
    assert!(v > 35.0, "round-trip PSNR {v}");
}

#[test]
fn warp_rejects_singular() {
    assert!(Homography::new([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
}

#[test]
fn warp_is_pure() {
    let src = smooth_gradient(24, 24);
    let h = Homography::from_unit_square(&[(0.03, 0.0), (1.0, 0.02), (0.97, 1.0), (0.0, 0.98)])
        .unwrap();
    let a = warp_perspective(&src, &h).unwrap();
    let b = warp_perspective(&src, &h).unwrap();
    assert_eq!(a.data(), b.data());
}

// ---- radial distortion --------------------------------------------------

#[test]
fn distort_zero_is_identity() {
    let src = smooth_gradient(20, 20);
    let out = radial_distort(&src, &RadialDistortion::none()).unwrap();
    assert_eq!(out.data(), src.data());
}

#[test]
fn distort_center_is_fixed_point() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let src = Image::from_fn(33, 33, |_, _| [rng.random_range(0.0..1.0); 3]);
    for (k1, k2) in [(0.06, 0.0), (-0.07, 0.01), (0.02, -0.01)] {
        let d = RadialDistortion::new(k1, k2, (0.5, 0.5)).unwrap();
        let out = radial_distort(&src, &d).unwrap();
        // center pixel of an odd raster sits exactly at the distortion center
        assert_eq!(out.pixel(16, 16), src.pixel(16, 16), "k1 {k1} k2 {k2}");
    }
}

#[test]
fn distort_barrel_bows_line_outward() {
    // dark vertical line at x = 3/4 of the width; with k1 > 0 its midpoint
    // (closest to the center) must land farther from the center than its
    // endpoints do
    let w = 65;
    let line_x = 56;
    let src = Image::from_fn(65, w, |_, x| {
        if x == line_x {
            [0.0, 0.0, 0.0]
        } else {
            [1.0, 1.0, 1.0]
        }
    });
    let d = RadialDistortion::new(0.15, 0.0, (0.5, 0.5)).unwrap();
    let out = radial_distort(&src, &d).unwrap();
    let line_pos = |y: usize| -> f64 {
        // intensity-weighted centroid of darkness along the row
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for x in 0..w {
            let dark = (1.0 - out.get(y, x, 0)) as f64;
            num += dark * x as f64;
            den += dark;
        }
        num / den
    };
    let mid = line_pos(32);
    let top = line_pos(4);
    let bottom = line_pos(60);
    assert!(mid > top + 0.3, "mid {mid} top {top}");
    assert!(mid > bottom + 0.3, "mid {mid} bottom {bottom}");
}

#[test]
fn distort_fold_over_rejected() {
    assert!(RadialDistortion::new(-0.7, 0.0, (0.5, 0.5)).is_err());
}

// ---- flat-top gaussian --------------------------------------------------

#[test]
fn flat_top_preserves_constants() {
    let src = Image::constant(16, 16, [0.3, 0.6, 0.9]);
    for plateau in [0, 1, 2] {
        let out = flat_top_gaussian(&src, 0.8, plateau).unwrap();
        assert!(out.max_abs_diff(&src) < 1e-6, "plateau {plateau}");
    }
}

#[test]
fn flat_top_plateau_zero_matches_direct_gaussian() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let src = Image::from_fn(12, 12, |_, _| [rng.random_range(0.0..1.0); 3]);
    let sigma = 0.9f64;
    let out = flat_top_gaussian(&src, sigma, 0).unwrap();

    // direct 2-d convolution oracle with an explicitly normalized kernel
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k = vec![];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            k.push((dy, dx, (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp()));
        }
    }
    let ksum: f64 = k.iter().map(|(_, _, w)| w).sum();
    for y in 0..12i64 {
        for x in 0..12i64 {
            let mut acc = 0.0f64;
            for (dy, dx, wt) in &k {
                let sy = (y + dy).clamp(0, 11) as usize;
                let sx = (x + dx).clamp(0, 11) as usize;
                acc += wt * src.get(sy, sx, 0) as f64;
            }
            let expect = (acc / ksum) as f32;
            let got = out.get(y as usize, x as usize, 0);
            assert!((got - expect).abs() < 1e-6, "at ({y},{x}): {got} vs {expect}");
        }
    }
}

#[test]
fn flat_top_impulse_response_is_kernel() {
    let taps = flat_top_taps(0.7, 2);
    let n = 31;
    let mut src = Image::new(n, n);
    src.set(n / 2, n / 2, [1.0, 1.0, 1.0]);
    let out = flat_top_gaussian(&src, 0.7, 2).unwrap();
    let r = taps.len() / 2;
    for (i, ty) in taps.iter().enumerate() {
        for (j, tx) in taps.iter().enumerate() {
            let got = out.get(n / 2 + i - r, n / 2 + j - r, 1);
            assert!((got as f64 - ty * tx).abs() < 1e-6);
        }
    }
    // symmetric and unimodal out to the plateau
    for i in 0..taps.len() {
        assert!((taps[i] - taps[taps.len() - 1 - i]).abs() < 1e-12);
    }
    for i in 0..taps.len() / 2 {
        assert!(taps[i] <= taps[i + 1] + 1e-12);
    }
}

// ---- bayer sampling and demosaicing ------------------------------------

#[test]
fn bayer_constant_gray() {
    let src = Image::constant(6, 6, [0.4, 0.4, 0.4]);
    let m = bayer_sample(&src).unwrap();
    assert!(m.data().iter().all(|&v| v == 0.4));
}

#[test]
fn bayer_pure_red_hits_red_sites_only() {
    let src = Image::constant(6, 6, [0.8, 0.0, 0.0]);
    let m = bayer_sample(&src).unwrap();
    for y in 0..6 {
        for x in 0..6 {
            let expect = if y % 2 == 0 && x % 2 == 0 { 0.8 } else { 0.0 };
            assert_eq!(m.get(y, x), expect);
        }
    }
}

#[test]
fn bayer_rejects_odd_dims() {
    assert!(bayer_sample(&Image::new(5, 6)).is_err());
    assert!(bayer_sample(&Image::new(6, 5)).is_err());
}

#[test]
fn bayer_demosaic_reconstructs_linear_ramp() {
    let src = gray_ramp(16, 64);
    let rec = demosaic_bilinear(&bayer_sample(&src).unwrap());
    for y in 2..14 {
        for x in 2..62 {
            for c in 0..3 {
                let err = (rec.get(y, x, c) - src.get(y, x, c)).abs();
                assert!(err < 2.0 / 255.0, "err {err} at ({y},{x},{c})");
            }
        }
    }
}

#[test]
fn demosaic_constant_plane_gives_constant_gray() {
    let m = BayerMosaic::new(6, 6, vec![0.25; 36]).unwrap();
    let img = demosaic_bilinear(&m);
    assert!(img.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
}

#[test]
fn demosaic_hot_green_spreads_quarter() {
    let mut data = vec![0.0f32; 12 * 12];
    data[5 * 12 + 4] = 1.0; // (5,4) is green (odd row, even col)
    assert_eq!(BayerMosaic::site_color(5, 4), 1);
    let m = BayerMosaic::new(12, 12, data).unwrap();
    let img = demosaic_bilinear(&m);
    // orthogonal neighbors are red/blue sites; each picks up 1/4 in green
    assert_eq!(img.get(4, 4, 1), 0.25);
    assert_eq!(img.get(6, 4, 1), 0.25);
    assert_eq!(img.get(5, 3, 1), 0.25);
    assert_eq!(img.get(5, 5, 1), 0.25);
    assert_eq!(img.get(5, 4, 1), 1.0);
}

#[test]
fn bayer_demosaic_idempotent_on_constants() {
    let src = Image::constant(8, 8, [0.6, 0.6, 0.6]);
    let rec = demosaic_bilinear(&bayer_sample(&src).unwrap());
    assert_eq!(rec.data(), src.data());
}

// ---- noise ---------------------------------------------------------------

#[test]
fn noise_sigma_zero_is_identity() {
    let src = smooth_gradient(10, 10);
    let out = add_gaussian_noise(&src, 0.0, 7).unwrap();
    assert_eq!(out.data(), src.data());
}

#[test]
fn noise_is_seed_deterministic() {
    let src = Image::constant(32, 32, [0.5, 0.5, 0.5]);
    let a = add_gaussian_noise(&src, 0.02, 123).unwrap();
    let b = add_gaussian_noise(&src, 0.02, 123).unwrap();
    let c = add_gaussian_noise(&src, 0.02, 124).unwrap();
    assert_eq!(a.data(), b.data());
    assert_ne!(a.data(), c.data());
}

#[test]
fn noise_variance_matches_sigma() {
    let sigma = 0.01f64;
    let src = Image::constant(200, 200, [0.5, 0.5, 0.5]);
    let out = add_gaussian_noise(&src, sigma, 55).unwrap();
    let n = out.data().len() as f64; // 120k samples
    let mean: f64 = out.data().iter().map(|&v| v as f64 - 0.5).sum::<f64>() / n;
    let var: f64 = out
        .data()
        .iter()
        .map(|&v| (v as f64 - 0.5 - mean).powi(2))
        .sum::<f64>()
        / n;
    assert!(
        (var - sigma * sigma).abs() < 0.1 * sigma * sigma,
        "var {var} vs {}",
        sigma * sigma
    );
}

// ---- denoise -------------------------------------------------------------

#[test]
fn denoise_constant_unchanged() {
    let src = Image::constant(12, 12, [0.7, 0.2, 0.4]);
    assert!(denoise_light(&src).max_abs_diff(&src) < 1e-6);
}

#[test]
fn denoise_impulse_is_3x3_kernel() {
    let taps = denoise_taps();
    assert_eq!(taps.len(), 3);
    let mut src = Image::new(9, 9);
    src.set(4, 4, [1.0, 1.0, 1.0]);
    let out = denoise_light(&src);
    for dy in 0..3 {
        for dx in 0..3 {
            let expect = (taps[dy] * taps[dx]) as f32;
            assert!((out.get(3 + dy, 3 + dx, 0) - expect).abs() < 1e-6);
        }
    }
    assert_eq!(out.get(2, 4, 0), 0.0); // outside the 3x3 support
}

#[test]
fn denoise_reduces_noise_variance_by_kernel_power() {
    let taps = denoise_taps();
    let k2: f64 = taps.iter().map(|t| t * t).sum();
    let expect = (k2 * k2) as f64; // separable 2-d sum of squares
    let sigma = 0.05f64;
    let src = Image::constant(200, 200, [0.5, 0.5, 0.5]);
    let noisy = add_gaussian_noise(&src, sigma, 31).unwrap();
    let out = denoise_light(&noisy);
    // interior only, to keep border replication out of the estimate
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for y in 1..199 {
        for x in 1..199 {
            for c in 0..3 {
                acc += ((out.get(y, x, c) - 0.5) as f64).powi(2);
                count += 1;
            }
        }
    }
    let ratio = (acc / count as f64) / (sigma * sigma);
    assert!(
        (ratio - expect).abs() < 0.15 * expect,
        "ratio {ratio} vs {expect}"
    );
}

// ---- jpeg ----------------------------------------------------------------

#[test]
fn jpeg_quality_100_constant_identical() {
    let v = 100.0 / 255.0;
    let src = Image::constant(24, 24, [v, v, v]);
    let out = jpeg_degrade(&src, 100).unwrap();
    assert_eq!(out.data(), src.data());
}

#[test]
fn jpeg_rejects_bad_quality() {
    let src = Image::new(8, 8);
    assert!(jpeg_degrade(&src, 0).is_err());
    assert!(jpeg_degrade(&src, 101).is_err());
}

#[test]
fn jpeg_psnr_monotone_in_quality() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    // smooth content plus mild texture, quantized to the 8-bit grid
    let src = Image::from_fn(64, 64, |y, x| {
        let u = x as f32 / 63.0;
        let v = y as f32 / 63.0;
        let t = rng.random_range(-0.05..0.05f32);
        let q = |z: f32| ((z.clamp(0.0, 1.0) * 255.0).round()) / 255.0;
        [q(0.3 + 0.4 * u + t), q(0.2 + 0.5 * v + t), q(0.5 + 0.2 * u * v)]
    });
    let mut last = 0.0f64;
    for q in [30u8, 50, 70, 90] {
        let out = jpeg_degrade(&src, q).unwrap();
        let p = psnr(&src, &out).unwrap();
        assert!(p >= last, "psnr dropped from {last} to {p} at quality {q}");
        last = p;
    }
}

#[test]
fn jpeg_dct_and_quantizer_hand_block() {
    use super::jpeg::{dct_forward_direct, luma_table};
    // quality 50 leaves the base table untouched: entry (0,0) is 16
    let table = luma_table(50);
    assert_eq!(table[0], 16);
    assert_eq!(luma_table(100), [1i32; 64]);

    // separable transform agrees with the direct definition
    let mut block = [0.0f64; 64];
    for (i, v) in block.iter_mut().enumerate() {
        let (y, x) = (i / 8, i % 8);
        *v = (y as f64 * 13.0 + x as f64 * 7.0) % 97.0 - 48.0;
    }
    let direct = dct_forward_direct(&block);
    let mut sep = block;
    let dct = super::jpeg::test_dct();
    dct.forward(&mut sep);
    for (a, b) in sep.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    // DC of a constant block is 8x the level and quantizes through entry
    // (0,0); 37.3 keeps the division clear of a rounding half-boundary
    let mut flat = [37.3f64; 64];
    dct.forward(&mut flat);
    assert!((flat[0] - 8.0 * 37.3).abs() < 1e-9);
    let quantized = (flat[0] / table[0] as f64).round() * table[0] as f64;
    assert_eq!(quantized, (8.0f64 * 37.3 / 16.0).round() * 16.0);
}

// ---- resampling ----------------------------------------------------------

#[test]
fn downsample_constant() {
    let src = Image::constant(32, 32, [0.3, 0.5, 0.7]);
    let out = downsample_gaussian(&src, 4).unwrap();
    assert_eq!((out.height(), out.width()), (8, 8));
    assert!(out.max_abs_diff(&Image::constant(8, 8, [0.3, 0.5, 0.7])) < 1e-6);
}

#[test]
fn downsample_paper_scale_shape() {
    let src = Image::new(512, 512);
    let out = downsample_gaussian(&src, 4).unwrap();
    assert_eq!((out.height(), out.width()), (128, 128));
}

#[test]
fn downsample_rejects_indivisible() {
    assert!(downsample_gaussian(&Image::new(30, 32), 4).is_err());
}

#[test]
fn downsample_kills_fine_nyquist() {
    // columns alternating at the fine grid's Nyquist rate
    let src = Image::from_fn(64, 64, |_, x| {
        let v = 0.5 + 0.4 * if x % 2 == 0 { 1.0 } else { -1.0 };
        [v, v, v]
    });
    let out = downsample_gaussian(&src, 4).unwrap();
    // DFT of the central row: every AC bin must sit >20 dB below the
    // input amplitude of 0.4
    let n = out.width();
    let row: Vec<f64> = (0..n).map(|x| out.get(out.height() / 2, x, 0) as f64).collect();
    for k in 1..n {
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (x, v) in row.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * k as f64 * x as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        let amplitude = 2.0 * (re * re + im * im).sqrt() / n as f64;
        assert!(amplitude < 0.04, "bin {k} amplitude {amplitude}");
    }
}

#[test]
fn upsample_constant_and_shape() {
    let src = Image::constant(128, 128, [0.2, 0.5, 0.9]);
    let out = upsample_bicubic(&src, 4).unwrap();
    assert_eq!((out.height(), out.width()), (512, 512));
    assert!(out.max_abs_diff(&Image::constant(512, 512, [0.2, 0.5, 0.9])) == 0.0);
}

#[test]
fn upsample_checkerboard_matches_kernel_and_clamps() {
    let src = Image::from_fn(2, 2, |y, x| {
        let v = ((x + y) % 2) as f32;
        [v, v, v]
    });
    let out = upsample_bicubic(&src, 4).unwrap();
    assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    // hand evaluation: replicate-border separable Catmull-Rom in f64,
    // unclamped, for every output position
    let fetch = |y: i64, x: i64| -> f64 { src.get(y.clamp(0, 1) as usize, x.clamp(0, 1) as usize, 0) as f64 };
    let mut overshoot = false;
    for yo in 0..8i64 {
        for xo in 0..8i64 {
            let px = (xo as f64 + 0.5) * 0.25 - 0.5;
            let py = (yo as f64 + 0.5) * 0.25 - 0.5;
            let (x0, y0) = (px.floor() as i64, py.floor() as i64);
            let wx = catmull_rom_at(px - x0 as f64);
            let wy = catmull_rom_at(py - y0 as f64);
            let mut acc = 0.0f64;
            for (j, wyv) in wy.iter().enumerate() {
                let mut rowacc = 0.0f64;
                for (i, wxv) in wx.iter().enumerate() {
                    rowacc += wxv * fetch(y0 - 1 + j as i64, x0 - 1 + i as i64);
                }
                acc += wyv * rowacc;
            }
            if !(0.0..=1.0).contains(&acc) {
                overshoot = true;
            }
            let expect = (acc.clamp(0.0, 1.0)) as f32;
            let got = out.get(yo as usize, xo as usize, 0);
            assert!((got - expect).abs() < 1e-6, "at ({yo},{xo}): {got} vs {expect}");
        }
    }
    // the 2x2 checkerboard must actually exercise the clamp
    assert!(overshoot, "expected bicubic overshoot on a checkerboard");
}

#[test]
fn resample_to_identity_and_gain() {
    let src = smooth_gradient(24, 24);
    let same = resample_to(&src, 24, 24, 1.0).unwrap();
    assert_eq!(same.data(), src.data());
    let down = resample_to(&src, 8, 8, 3.0).unwrap();
    assert_eq!((down.height(), down.width()), (8, 8));
    let flat = resample_to(&Image::constant(9, 9, [0.2, 0.2, 0.2]), 3, 3, 3.0).unwrap();
    assert!(flat.max_abs_diff(&Image::constant(3, 3, [0.6, 0.6, 0.6])) < 1e-6);
}

// ---- png io ---------------------------------------------------------------

#[test]
fn png_round_trip() {
    let dir = std::env::temp_dir().join(format!("demoire-png-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("rt.png");
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    // values on the 8-bit grid survive the round trip exactly
    let src = Image::from_fn(13, 17, |_, _| {
        let q = |v: f32| (v * 255.0).round() / 255.0;
        [
            q(rng.random_range(0.0..1.0)),
            q(rng.random_range(0.0..1.0)),
            q(rng.random_range(0.0..1.0)),
        ]
    });
    io::save_png(&path, &src).unwrap();
    let back = io::load_png(&path).unwrap();
    assert_eq!(back.data(), src.data());
    assert!(io::png_header_ok(&path));
    assert!(!io::png_header_ok(dir.join("missing.png")));
    std::fs::remove_dir_all(&dir).ok();
}
