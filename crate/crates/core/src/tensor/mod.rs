//! Minimal reverse-mode differentiable compute core.
//!
//! A [`Graph`] is a single-owner tape: build the forward pass through its
//! methods, call [`Graph::backward`] on a scalar, then read gradients back
//! from the leaves. Exactly the operations the restoration networks need are
//! provided; there is no general broadcasting, no GPU path, no mixed
//! precision.
//!
//! Reductions (losses, batch statistics, pooling) accumulate in f64 before
//! rounding to f32, which keeps the finite-difference checks well inside
//! their tolerance. [`Graph::eval_f64`] replays a recorded graph entirely in
//! f64 with an optional single-coordinate perturbation; the gradient checker
//! is built on it.

pub mod adam;
mod kernels;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use kernels::ConvDims;

use crate::error::{Error, Result};
use rand::Rng;

/// Epsilon inside the batch-norm variance root.
pub const BN_EPS: f32 = 1e-5;
/// Probability clamp applied inside the cross-entropy loss.
pub const BCE_EPS: f32 = 1e-6;
/// Sigmoid outputs are pulled this far off the 0/1 rails so downstream
/// logarithms stay finite even in single precision.
pub const SIGMOID_EPS: f32 = 1e-7;

/// Dense n-dimensional value with an optional gradient slot.
#[derive(Clone, Debug, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Uniform values in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::contract(format!(
                "{what} must be 4-d (got shape {:?})",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Per-channel statistics produced by a train-mode batch-norm pass.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        // Batch stats in train mode, the supplied running stats in infer
        // mode; backward and f64 replay both need them.
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f32,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    GlobalAvgPool {
        x: Var,
    },
    MseLoss {
        a: Var,
        b: Var,
    },
    BceLoss {
        p: Var,
        target: f32,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Single-owner reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Its `requires_grad` flag decides whether
    /// `backward` deposits a gradient on it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient deposited on a node by `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].tensor.data()[0]
    }

    // ---- operations -----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, h, wd) = self.value(x).dims4("conv2d input")?;
        let (c_out, w_in, kh, kw) = self.value(w).dims4("conv2d weight")?;
        if kh != kw {
            return Err(Error::contract(format!(
                "conv2d kernel must be square, got {kh}x{kw}"
            )));
        }
        if w_in != c_in {
            return Err(Error::contract(format!(
                "conv2d channel mismatch: input has {c_in} channels, weight expects {w_in}"
            )));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::contract(format!(
                "conv2d bias shape {:?} does not match {c_out} output channels",
                self.value(b).shape()
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(Error::contract(format!(
                "conv2d kernel {kh}x{kh} does not fit padded input {}x{} (pad {pad})",
                h, wd
            )));
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            stride,
            pad,
        };
        let (oh, ow) = (dims.out_h(), dims.out_w());
        let mut out = vec![0.0f32; batch * c_out * oh * ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            dims,
            &mut out,
        );
        let t = Tensor::new(&[batch, c_out, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, dims }))
    }

    /// Train-mode batch normalization. Returns the batch statistics so the
    /// caller can fold them into its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BnStats)> {
        let (b, c, h, w) = self.value(x).dims4("batch_norm input")?;
        self.check_bn_affine(c, gamma, beta)?;
        let per_channel = b * h * w;
        if per_channel < 2 {
            return Err(Error::contract(format!(
                "batch_norm train mode needs at least 2 elements per channel, got {per_channel}"
            )));
        }
        let (mean, var) = bn_batch_stats(self.value(x).data(), b, c, h, w);
        let stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let out = bn_apply(
            self.value(x).data(),
            b,
            c,
            h,
            w,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(&[b, c, h, w], out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode: BnMode::Train,
                mean,
                var,
            },
        );
        Ok((v, stats))
    }

    /// Inference-mode batch normalization using previously estimated
    /// running statistics; deterministic in the batch.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnStats,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("batch_norm input")?;
        self.check_bn_affine(c, gamma, beta)?;
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::contract(format!(
                "running stats have {} channels, input has {c}",
                running.mean.len()
            )));
        }
        let out = bn_apply(
            self.value(x).data(),
            b,
            c,
            h,
            w,
            &running.mean,
            &running.var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode: BnMode::Infer,
                mean: running.mean.clone(),
                var: running.var.clone(),
            },
        ))
    }

    fn check_bn_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::contract(format!(
                "batch_norm affine shapes {:?}/{:?} do not match {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        Ok(())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = tensor_like(self.value(x), data);
        self.push(t, Op::Relu { x })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let t = tensor_like(self.value(x), data);
        self.push(t, Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v as f64).tanh() as f32)
            .collect();
        let t = tensor_like(self.value(x), data);
        self.push(t, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| sigmoid_f64(v as f64) as f32)
            .collect();
        let t = tensor_like(self.value(x), data);
        self.push(t, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = tensor_like(self.value(a), data);
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Concatenate along the channel axis; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4("concat input a")?;
        let (bb, cb, hb, wb) = self.value(b).dims4("concat input b")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::contract(format!(
                "concat_channels needs matching batch/spatial dims: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        let da = self.value(a).data();
        let db = self.value(b).data();
        for bi in 0..ba {
            out.extend_from_slice(&da[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&db[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let t = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.push(t, Op::ConcatChannels { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = tensor_like(self.value(x), data);
        self.push(t, Op::Scale { x, factor })
    }

    /// Elementwise clamp with pass-through gradient inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let t = tensor_like(self.value(x), data);
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Mean over the spatial dims: BCHW -> BC11.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("global_avg_pool input")?;
        let plane = h * w;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for bc in 0..b * c {
            let mut acc = 0.0f64;
            for v in &data[bc * plane..(bc + 1) * plane] {
                acc += *v as f64;
            }
            out.push((acc / plane as f64) as f32);
        }
        let t = Tensor::new(&[b, c, 1, 1], out)?;
        Ok(self.push(t, Op::GlobalAvgPool { x }))
    }

    /// Mean squared error over every element.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "mse_loss shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut acc = 0.0f64;
        for (x, y) in da.iter().zip(db) {
            let d = (*x - *y) as f64;
            acc += d * d;
        }
        let t = Tensor::scalar((acc / da.len() as f64) as f32);
        Ok(self.push(t, Op::MseLoss { a, b }))
    }

    /// Binary cross entropy against a constant 0/1 label, averaged over the
    /// batch. Probabilities are clamped to `[BCE_EPS, 1-BCE_EPS]` so the
    /// loss stays finite. Calling with `real = true` on generated samples
    /// yields the non-saturating generator objective.
    pub fn bce_loss(&mut self, p: Var, real: bool) -> Result<Var> {
        let data = self.value(p).data();
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!(
                "bce_loss probability {bad} outside [0,1]"
            )));
        }
        let target = if real { 1.0f32 } else { 0.0f32 };
        let t = target as f64;
        let mut acc = 0.0f64;
        for &v in data {
            let pc = (v as f64).clamp(BCE_EPS as f64, 1.0 - BCE_EPS as f64);
            acc -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        let out = Tensor::scalar((acc / data.len() as f64) as f32);
        Ok(self.push(out, Op::BceLoss { p, target }))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode sweep from a scalar. Every `requires_grad` leaf ends up
    /// holding d(loss)/d(leaf); repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        // Which nodes lie on a path from a requires_grad leaf.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Leaf => node.tensor.requires_grad,
                op => op_inputs(op).iter().any(|v| needs[v.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if !needs[i] {
                continue;
            }
            // Split borrows: clone out the op descriptor (cheap except BN
            // stats, which are per-channel vectors).
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let t = &mut self.nodes[i].tensor;
                    if t.requires_grad {
                        match &mut t.grad {
                            Some(g) => {
                                for (a, v) in g.iter_mut().zip(&gout) {
                                    *a += *v;
                                }
                            }
                            None => t.grad = Some(gout),
                        }
                    }
                }
                Op::Conv2d { x, w, b, dims } => {
                    if needs[x.0] {
                        let mut dx = vec![0.0f32; self.value(x).numel()];
                        kernels::conv2d_backward_input(&gout, self.value(w).data(), dims, &mut dx);
                        accumulate(&mut grads[x.0], dx);
                    }
                    if needs[w.0] || needs[b.0] {
                        let mut dw = vec![0.0f32; self.value(w).numel()];
                        let mut db = vec![0.0f32; self.value(b).numel()];
                        kernels::conv2d_backward_weights(
                            &gout,
                            self.value(x).data(),
                            dims,
                            &mut dw,
                            &mut db,
                        );
                        if needs[w.0] {
                            accumulate(&mut grads[w.0], dw);
                        }
                        if needs[b.0] {
                            accumulate(&mut grads[b.0], db);
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mode,
                    mean,
                    var,
                } => {
                    let (bs, c, h, w) = self.value(x).dims4("batch_norm input").unwrap();
                    let (dx, dgamma, dbeta) = bn_backward(
                        &gout,
                        self.value(x).data(),
                        bs,
                        c,
                        h,
                        w,
                        &mean,
                        &var,
                        self.value(gamma).data(),
                        mode,
                    );
                    if needs[x.0] {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if needs[gamma.0] {
                        accumulate(&mut grads[gamma.0], dgamma);
                    }
                    if needs[beta.0] {
                        accumulate(&mut grads[beta.0], dbeta);
                    }
                }
                Op::Relu { x } => {
                    if needs[x.0] {
                        let xin = self.value(x).data();
                        let dx = gout
                            .iter()
                            .zip(xin)
                            .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if needs[x.0] {
                        let xin = self.value(x).data();
                        let dx = gout
                            .iter()
                            .zip(xin)
                            .map(|(g, &v)| if v > 0.0 { *g } else { slope * *g })
                            .collect();
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Tanh { x } => {
                    if needs[x.0] {
                        let y = self.nodes[i].tensor.data();
                        let dx = gout.iter().zip(y).map(|(g, &v)| g * (1.0 - v * v)).collect();
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if needs[x.0] {
                        let y = self.nodes[i].tensor.data();
                        let dx = gout.iter().zip(y).map(|(g, &v)| g * v * (1.0 - v)).collect();
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Add { a, b } => {
                    if needs[a.0] {
                        accumulate(&mut grads[a.0], gout.clone());
                    }
                    if needs[b.0] {
                        accumulate(&mut grads[b.0], gout);
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (ba, ca, ha, wa) = self.value(a).dims4("concat input").unwrap();
                    let cb = self.value(b).shape()[1];
                    let plane = ha * wa;
                    if needs[a.0] {
                        let mut da = vec![0.0f32; self.value(a).numel()];
                        for bi in 0..ba {
                            let src = bi * (ca + cb) * plane;
                            da[bi * ca * plane..(bi + 1) * ca * plane]
                                .copy_from_slice(&gout[src..src + ca * plane]);
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if needs[b.0] {
                        let mut db = vec![0.0f32; self.value(b).numel()];
                        for bi in 0..ba {
                            let src = bi * (ca + cb) * plane + ca * plane;
                            db[bi * cb * plane..(bi + 1) * cb * plane]
                                .copy_from_slice(&gout[src..src + cb * plane]);
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Scale { x, factor } => {
                    if needs[x.0] {
                        let dx = gout.iter().map(|g| g * factor).collect();
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if needs[x.0] {
                        let xin = self.value(x).data();
                        let dx = gout
                            .iter()
                            .zip(xin)
                            .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    if needs[x.0] {
                        let (b, c, h, w) = self.value(x).dims4("pool input").unwrap();
                        let plane = h * w;
                        let inv = 1.0f32 / plane as f32;
                        let mut dx = vec![0.0f32; self.value(x).numel()];
                        for bc in 0..b * c {
                            let g = gout[bc] * inv;
                            for v in &mut dx[bc * plane..(bc + 1) * plane] {
                                *v = g;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::MseLoss { a, b } => {
                    let da = self.value(a).data();
                    let db = self.value(b).data();
                    let n = da.len() as f32;
                    let g = gout[0];
                    if needs[a.0] {
                        let dx = da
                            .iter()
                            .zip(db)
                            .map(|(x, y)| 2.0 * (x - y) / n * g)
                            .collect();
                        accumulate(&mut grads[a.0], dx);
                    }
                    if needs[b.0] {
                        let dx = da
                            .iter()
                            .zip(db)
                            .map(|(x, y)| -2.0 * (x - y) / n * g)
                            .collect();
                        accumulate(&mut grads[b.0], dx);
                    }
                }
                Op::BceLoss { p, target } => {
                    if needs[p.0] {
                        let data = self.value(p).data();
                        let n = data.len() as f64;
                        let g = gout[0] as f64;
                        let t = target as f64;
                        let lo = BCE_EPS as f64;
                        let hi = 1.0 - BCE_EPS as f64;
                        let dx = data
                            .iter()
                            .map(|&v| {
                                let v = v as f64;
                                if v < lo || v > hi {
                                    // clamped region: loss is flat in p
                                    0.0f32
                                } else {
                                    ((-t / v + (1.0 - t) / (1.0 - v)) / n * g) as f32
                                }
                            })
                            .collect();
                        accumulate(&mut grads[p.0], dx);
                    }
                }
            }
        }
        Ok(())
    }

    // ---- f64 replay -----------------------------------------------------

    /// Re-evaluate the recorded graph in f64 and return the (scalar) value
    /// of `out`. `perturb` adds a delta to one coordinate of one leaf; this
    /// is the engine behind the central-difference gradient checks.
    pub fn eval_f64(&self, out: Var, perturb: Option<(Var, usize, f64)>) -> f64 {
        self.eval_f64_masked(out, perturb).0
    }

    /// Like [`Graph::eval_f64`], additionally hashing which side of every
    /// piecewise boundary (relu/leaky sign, clamp region) each activation
    /// landed on. Two perturbed evaluations whose masks differ straddle a
    /// kink: the graph has no derivative there and a finite-difference
    /// estimate is meaningless.
    pub fn eval_f64_masked(&self, out: Var, perturb: Option<(Var, usize, f64)>) -> (f64, u64) {
        let mut mask: u64 = 0xcbf29ce484222325;
        let mut mix = |bit: bool| {
            mask ^= bit as u64 + 1;
            mask = mask.wrapping_mul(0x100000001b3);
        };
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
        for i in 0..=out.0 {
            let node = &self.nodes[i];
            let v = match &node.op {
                Op::Leaf => {
                    let mut v: Vec<f64> =
                        node.tensor.data().iter().map(|&x| x as f64).collect();
                    if let Some((lv, coord, delta)) = perturb {
                        if lv.0 == i {
                            v[coord] += delta;
                        }
                    }
                    v
                }
                Op::Conv2d { x, w, b, dims } => {
                    let (oh, ow) = (dims.out_h(), dims.out_w());
                    let mut o = vec![0.0f64; dims.batch * dims.c_out * oh * ow];
                    kernels::conv2d_forward(&vals[x.0], &vals[w.0], &vals[b.0], *dims, &mut o);
                    o
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mode,
                    mean,
                    var,
                } => {
                    let s = self.value(*x).shape();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (m, vr) = match mode {
                        BnMode::Train => bn_batch_stats_f64(&vals[x.0], b, c, h, w),
                        BnMode::Infer => (
                            mean.iter().map(|&v| v as f64).collect(),
                            var.iter().map(|&v| v as f64).collect(),
                        ),
                    };
                    bn_apply_f64(&vals[x.0], b, c, h, w, &m, &vr, &vals[gamma.0], &vals[beta.0])
                }
                Op::Relu { x } => vals[x.0]
                    .iter()
                    .map(|&v| {
                        mix(v > 0.0);
                        v.max(0.0)
                    })
                    .collect(),
                Op::LeakyRelu { x, slope } => vals[x.0]
                    .iter()
                    .map(|&v| {
                        mix(v > 0.0);
                        if v > 0.0 { v } else { *slope as f64 * v }
                    })
                    .collect(),
                Op::Tanh { x } => vals[x.0].iter().map(|&v| v.tanh()).collect(),
                Op::Sigmoid { x } => vals[x.0].iter().map(|&v| sigmoid_f64(v)).collect(),
                Op::Add { a, b } => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
                Op::ConcatChannels { a, b } => {
                    let (ba, ca, ha, wa) = self.value(*a).dims4("concat input").unwrap();
                    let cb = self.value(*b).shape()[1];
                    let plane = ha * wa;
                    let mut o = Vec::with_capacity(ba * (ca + cb) * plane);
                    for bi in 0..ba {
                        o.extend_from_slice(&vals[a.0][bi * ca * plane..(bi + 1) * ca * plane]);
                        o.extend_from_slice(&vals[b.0][bi * cb * plane..(bi + 1) * cb * plane]);
                    }
                    o
                }
                Op::Scale { x, factor } => {
                    vals[x.0].iter().map(|&v| v * *factor as f64).collect()
                }
                Op::Clamp { x, lo, hi } => vals[x.0]
                    .iter()
                    .map(|&v| {
                        mix(v < *lo as f64);
                        mix(v > *hi as f64);
                        v.clamp(*lo as f64, *hi as f64)
                    })
                    .collect(),
                Op::GlobalAvgPool { x } => {
                    let (b, c, h, w) = self.value(*x).dims4("pool input").unwrap();
                    let plane = h * w;
                    (0..b * c)
                        .map(|bc| {
                            vals[x.0][bc * plane..(bc + 1) * plane].iter().sum::<f64>()
                                / plane as f64
                        })
                        .collect()
                }
                Op::MseLoss { a, b } => {
                    let acc: f64 = vals[a.0]
                        .iter()
                        .zip(&vals[b.0])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    vec![acc / vals[a.0].len() as f64]
                }
                Op::BceLoss { p, target } => {
                    let t = *target as f64;
                    let acc: f64 = vals[p.0]
                        .iter()
                        .map(|&v| {
                            let pc = v.clamp(BCE_EPS as f64, 1.0 - BCE_EPS as f64);
                            -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
                        })
                        .sum();
                    vec![acc / vals[p.0].len() as f64]
                }
            };
            vals.push(v);
        }
        (vals[out.0][0], mask)
    }
}

fn tensor_like(src: &Tensor, data: Vec<f32>) -> Tensor {
    Tensor {
        shape: src.shape().to_vec(),
        data,
        grad: None,
        requires_grad: false,
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, add: Vec<f32>) {
    match slot {
        Some(g) => {
            for (a, v) in g.iter_mut().zip(&add) {
                *a += *v;
            }
        }
        None => *slot = Some(add),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Relu { x }
        | Op::LeakyRelu { x, .. }
        | Op::Tanh { x }
        | Op::Sigmoid { x }
        | Op::Scale { x, .. }
        | Op::Clamp { x, .. }
        | Op::GlobalAvgPool { x } => vec![*x],
        Op::Add { a, b } | Op::ConcatChannels { a, b } | Op::MseLoss { a, b } => vec![*a, *b],
        Op::BceLoss { p, .. } => vec![*p],
    }
}

fn sigmoid_f64(x: f64) -> f64 {
    let y = 1.0 / (1.0 + (-x).exp());
    y.clamp(SIGMOID_EPS as f64, 1.0 - SIGMOID_EPS as f64)
}

fn bn_batch_stats(x: &[f32], b: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<f32>) {
    let (m, v) = bn_batch_stats_f64(&x.iter().map(|&v| v as f64).collect::<Vec<_>>(), b, c, h, w);
    (
        m.into_iter().map(|v| v as f32).collect(),
        v.into_iter().map(|v| v as f32).collect(),
    )
}

fn bn_batch_stats_f64(x: &[f64], b: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for v in &x[off..off + plane] {
                acc += *v;
            }
        }
        mean[ci] = acc / n;
    }
    for ci in 0..c {
        let m = mean[ci];
        let mut acc = 0.0f64;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for v in &x[off..off + plane] {
                let d = *v - m;
                acc += d * d;
            }
        }
        var[ci] = acc / n;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn bn_apply(
    x: &[f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> Vec<f32> {
    let plane = h * w;
    let mut out = vec![0.0f32; x.len()];
    for ci in 0..c {
        let inv = 1.0 / ((var[ci] as f64 + BN_EPS as f64).sqrt());
        let scale = (gamma[ci] as f64 * inv) as f32;
        let shift = (beta[ci] as f64 - mean[ci] as f64 * gamma[ci] as f64 * inv) as f32;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for (o, v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = v * scale + shift;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn bn_apply_f64(
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0f64; x.len()];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + BN_EPS as f64).sqrt();
        let scale = gamma[ci] * inv;
        let shift = beta[ci] - mean[ci] * scale;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for (o, v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = v * scale + shift;
            }
        }
    }
    out
}

/// Batch-norm backward. In train mode the batch statistics are themselves
/// functions of x, which contributes the two correction sums.
#[allow(clippy::too_many_arguments)]
fn bn_backward(
    gout: &[f32],
    x: &[f32],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    mode: BnMode,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];

    for ci in 0..c {
        let m = mean[ci] as f64;
        let inv = 1.0 / ((var[ci] as f64) + BN_EPS as f64).sqrt();
        let g = gamma[ci] as f64;

        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for bi in 0..b {
            let off = (bi * c + ci) * plane;
            for j in 0..plane {
                let dy = gout[off + j] as f64;
                let xhat = (x[off + j] as f64 - m) * inv;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat as f32;
        dbeta[ci] = sum_dy as f32;

        match mode {
            BnMode::Train => {
                for bi in 0..b {
                    let off = (bi * c + ci) * plane;
                    for j in 0..plane {
                        let dy = gout[off + j] as f64;
                        let xhat = (x[off + j] as f64 - m) * inv;
                        dx[off + j] = (g * inv * (dy - sum_dy / n - xhat * sum_dy_xhat / n)) as f32;
                    }
                }
            }
            BnMode::Infer => {
                for bi in 0..b {
                    let off = (bi * c + ci) * plane;
                    for j in 0..plane {
                        dx[off + j] = (gout[off + j] as f64 * g * inv) as f32;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests;
