//! Scalar-generic convolution kernels.
//!
//! The same code paths serve the f32 forward/backward passes and the f64
//! replay used by the finite-difference checker, so the two never drift
//! apart structurally. Loops are ordered so every output element is a
//! fixed-order sum: results are bit-reproducible regardless of thread count.

use rayon::prelude::*;

/// Minimal scalar abstraction over f32/f64.
pub trait Real:
    Copy
    + Send
    + Sync
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
{
    const ZERO: Self;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Zero-pad one CHW block into a caller-provided scratch buffer.
fn pad_input<T: Real>(x: &[T], c: usize, h: usize, w: usize, pad: usize, out: &mut [T]) {
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    debug_assert_eq!(out.len(), c * hp * wp);
    for v in out.iter_mut() {
        *v = T::ZERO;
    }
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y) * w + w];
            let dst_off = (ci * hp + y + pad) * wp + pad;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
}

/// Direct convolution, one batch element per task.
pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], d: ConvDims, out: &mut [T]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hp = d.h + 2 * d.pad;
    let wp = d.w + 2 * d.pad;
    let in_block = d.c_in * d.h * d.w;
    let out_block = d.c_out * oh * ow;

    out.par_chunks_mut(out_block).enumerate().for_each(|(b, ob)| {
        let mut xpad = vec![T::ZERO; d.c_in * hp * wp];
        pad_input(&x[b * in_block..(b + 1) * in_block], d.c_in, d.h, d.w, d.pad, &mut xpad);
        for o in 0..d.c_out {
            let plane = &mut ob[o * oh * ow..(o + 1) * oh * ow];
            let bv = bias[o];
            for v in plane.iter_mut() {
                *v = bv;
            }
            for i in 0..d.c_in {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = weight[((o * d.c_in + i) * d.k + ky) * d.k + kx];
                        for y in 0..oh {
                            let src = &xpad[(i * hp + y * d.stride + ky) * wp + kx..];
                            let dst = &mut plane[y * ow..(y + 1) * ow];
                            if d.stride == 1 {
                                for (dv, sv) in dst.iter_mut().zip(&src[..ow]) {
                                    *dv += wv * *sv;
                                }
                            } else {
                                for (j, dv) in dst.iter_mut().enumerate() {
                                    *dv += wv * src[j * d.stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_backward_input(dout: &[f32], weight: &[f32], d: ConvDims, dx: &mut [f32]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hp = d.h + 2 * d.pad;
    let wp = d.w + 2 * d.pad;
    let in_block = d.c_in * d.h * d.w;
    let out_block = d.c_out * oh * ow;

    dx.par_chunks_mut(in_block).enumerate().for_each(|(b, dxb)| {
        let mut dxpad = vec![0.0f32; d.c_in * hp * wp];
        let db = &dout[b * out_block..(b + 1) * out_block];
        for o in 0..d.c_out {
            let plane = &db[o * oh * ow..(o + 1) * oh * ow];
            for i in 0..d.c_in {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = weight[((o * d.c_in + i) * d.k + ky) * d.k + kx];
                        for y in 0..oh {
                            let grow = &plane[y * ow..(y + 1) * ow];
                            let drow = &mut dxpad[(i * hp + y * d.stride + ky) * wp + kx..];
                            if d.stride == 1 {
                                for (dv, gv) in drow[..ow].iter_mut().zip(grow) {
                                    *dv += wv * *gv;
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    drow[j * d.stride] += wv * *gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        // strip padding back off, accumulating into dx
        for i in 0..d.c_in {
            for y in 0..d.h {
                let src = &dxpad[(i * hp + y + d.pad) * wp + d.pad..];
                let dst = &mut dxb[(i * d.h + y) * d.w..(i * d.h + y + 1) * d.w];
                for (dv, sv) in dst.iter_mut().zip(&src[..d.w]) {
                    *dv += *sv;
                }
            }
        }
    });
}

/// Gradients w.r.t. weights and bias. Per-batch partials are reduced in
/// batch order so the result does not depend on scheduling.
pub fn conv2d_backward_weights(
    dout: &[f32],
    x: &[f32],
    d: ConvDims,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let hp = d.h + 2 * d.pad;
    let wp = d.w + 2 * d.pad;
    let in_block = d.c_in * d.h * d.w;
    let out_block = d.c_out * oh * ow;
    let wlen = d.c_out * d.c_in * d.k * d.k;

    let partials: Vec<(Vec<f32>, Vec<f32>)> = (0..d.batch)
        .into_par_iter()
        .map(|b| {
            let mut dwb = vec![0.0f32; wlen];
            let mut dbb = vec![0.0f32; d.c_out];
            let mut xpad = vec![0.0f32; d.c_in * hp * wp];
            pad_input(&x[b * in_block..(b + 1) * in_block], d.c_in, d.h, d.w, d.pad, &mut xpad);
            let dob = &dout[b * out_block..(b + 1) * out_block];
            for o in 0..d.c_out {
                let plane = &dob[o * oh * ow..(o + 1) * oh * ow];
                let mut bias_acc = 0.0f64;
                for v in plane {
                    bias_acc += *v as f64;
                }
                dbb[o] = bias_acc as f32;
                for i in 0..d.c_in {
                    for ky in 0..d.k {
                        for kx in 0..d.k {
                            let mut acc = 0.0f64;
                            for y in 0..oh {
                                let grow = &plane[y * ow..(y + 1) * ow];
                                let srow = &xpad[(i * hp + y * d.stride + ky) * wp + kx..];
                                let mut dot = 0.0f32;
                                if d.stride == 1 {
                                    for (gv, sv) in grow.iter().zip(&srow[..ow]) {
                                        dot += *gv * *sv;
                                    }
                                } else {
                                    for (j, gv) in grow.iter().enumerate() {
                                        dot += *gv * srow[j * d.stride];
                                    }
                                }
                                acc += dot as f64;
                            }
                            dwb[((o * d.c_in + i) * d.k + ky) * d.k + kx] = acc as f32;
                        }
                    }
                }
            }
            (dwb, dbb)
        })
        .collect();

    for (dwb, dbb) in &partials {
        for (a, v) in dw.iter_mut().zip(dwb) {
            *a += *v;
        }
        for (a, v) in db.iter_mut().zip(dbb) {
            *a += *v;
        }
    }
}
