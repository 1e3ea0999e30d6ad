//! Criterion benchmarks for the hot kernels: convolution forward/backward,
//! the geometric warps, JPEG round trip, SSIM, and one full synthesis pass.

use criterion::{criterion_group, criterion_main, Criterion};
use demoire_core::image::{jpeg_degrade, warp_perspective, Homography, Image};
use demoire_core::metrics::ssim;
use demoire_core::net::{CoarseGenerator, NetworkSpec};
use demoire_core::synth::{sample_params, synthesize_pair, ParamRanges};
use demoire_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::hint::black_box;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| {
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]
    })
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[8, 16, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[16, 16, 3, 3], -0.3, 0.3, &mut rng);
    let b = Tensor::uniform(&[16], -0.1, 0.1, &mut rng);
    c.bench_function("conv2d_forward_8x16x32", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone());
            let bv = g.leaf(b.clone());
            black_box(g.conv2d(xv, wv, bv, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d_train_step_8x16x32", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(w.clone().with_requires_grad(true));
            let bv = g.leaf(b.clone().with_requires_grad(true));
            let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            let t = g.leaf(Tensor::zeros(&[8, 16, 32, 32]));
            let loss = g.mse_loss(y, t).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(wv).unwrap().len());
        })
    });
}

fn bench_generator(c: &mut Criterion) {
    let net = CoarseGenerator::new(&NetworkSpec::desk(), 3).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[1, 3, 32, 32], -1.0, 1.0, &mut rng);
    c.bench_function("coarse_generator_infer_32", |bch| {
        bch.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            black_box(net.forward_infer(&mut g, xv).unwrap());
        })
    });
}

fn bench_image_ops(c: &mut Criterion) {
    let img = random_image(256, 256, 5);
    let h =
        Homography::from_unit_square(&[(0.02, 0.01), (0.99, -0.01), (1.01, 1.02), (-0.01, 0.99)])
            .unwrap();
    c.bench_function("warp_perspective_256", |bch| {
        bch.iter(|| black_box(warp_perspective(&img, &h).unwrap()))
    });
    c.bench_function("jpeg_degrade_256_q75", |bch| {
        bch.iter(|| black_box(jpeg_degrade(&img, 75).unwrap()))
    });
    let other = random_image(256, 256, 6);
    c.bench_function("ssim_256", |bch| {
        bch.iter(|| black_box(ssim(&img, &other).unwrap()))
    });
}

fn bench_synthesis(c: &mut Criterion) {
    let src = random_image(128, 128, 7);
    let params = sample_params(9, &ParamRanges::default());
    c.bench_function("synthesize_pair_128", |bch| {
        bch.iter(|| black_box(synthesize_pair(&src, &params).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_generator, bench_image_ops, bench_synthesis
}
criterion_main!(benches);
