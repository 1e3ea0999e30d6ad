//! Central-difference verification of every differentiable operation and
//! of the full coarse generator.
//!
//! The numeric side evaluates the recorded graph in f64 via
//! [`Graph::eval_f64`]; the analytic side is the ordinary f32 backward
//! pass. Errors are vector-level: `||a - n|| / max(||a||, ||n||)` per
//! checked tensor, which stays meaningful for coordinates whose true
//! gradient is tiny.

use crate::net::{CoarseGenerator, NetworkSpec};
use crate::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Every per-tensor relative error must stay below this.
pub const TOLERANCE: f64 = 1e-3;
/// Central-difference step on inputs scaled to `[-1, 1]`.
pub const FD_STEP: f64 = 1e-3;
/// Smaller step for the composite generator check: the f64 replay keeps
/// truncation noise negligible, and the narrower window avoids straddling
/// interior ReLU kinks.
pub const GEN_FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    pub instances: usize,
    /// Check every coarse-generator parameter coordinate in the first
    /// generator instance (tens of seconds); otherwise all instances use
    /// random probes.
    pub generator_exhaustive: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 7,
            instances: 20,
            generator_exhaustive: true,
        }
    }
}

/// Per-coordinate magnitude below which a gradient is single-precision
/// noise. Conv biases that feed a train-mode batch norm have true gradient
/// exactly zero (a mean shift is what the normalization removes), so both
/// sides of the comparison are noise there and need an absolute floor.
const NOISE_FLOOR: f64 = 1e-4;

fn vec_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let floor = NOISE_FLOOR * (analytic.len().max(1) as f64).sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / na.max(nn).max(floor)
}

/// Central difference that refuses to measure across a kink: if any
/// piecewise activation lands on different sides of its boundary in the
/// +h and -h evaluations, the graph is not differentiable inside the
/// window and `None` is returned.
fn stable_central_diff(g: &Graph, loss: Var, leaf: Var, coord: usize, step: f64) -> Option<f64> {
    let (up, m_up) = g.eval_f64_masked(loss, Some((leaf, coord, step)));
    let (dn, m_dn) = g.eval_f64_masked(loss, Some((leaf, coord, -step)));
    if m_up != m_dn {
        return None;
    }
    Some((up - dn) / (2.0 * step))
}

/// Backward already run; compare each leaf's full gradient against central
/// differences, skipping coordinates that sit on a kink.
fn check_leaves(g: &Graph, loss: Var, leaves: &[Var], step: f64) -> f64 {
    let mut worst = 0.0f64;
    for &leaf in leaves {
        let n = g.value(leaf).numel();
        let grad = g.grad(leaf);
        let mut analytic = Vec::with_capacity(n);
        let mut numeric = Vec::with_capacity(n);
        for coord in 0..n {
            if let Some(nv) = stable_central_diff(g, loss, leaf, coord, step) {
                analytic.push(grad.map(|gr| gr[coord] as f64).unwrap_or(0.0));
                numeric.push(nv);
            }
        }
        worst = worst.max(vec_rel_err(&analytic, &numeric));
    }
    worst
}

/// Uniform values kept `margin` away from zero (for kinked activations).
fn away_from_zero(shape: &[usize], margin: f32, rng: &mut ChaCha12Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(margin..1.0f32);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn rand(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

type CaseFn = fn(&mut ChaCha12Rng, usize) -> (Graph, Var, Vec<Var>);

fn conv_case(rng: &mut ChaCha12Rng, instance: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(rand(&[2, 4, 8, 8], -1.0, 1.0, rng).with_requires_grad(true));
    let w = g.leaf(rand(&[6, 4, 3, 3], -0.5, 0.5, rng).with_requires_grad(true));
    let b = g.leaf(rand(&[6], -0.2, 0.2, rng).with_requires_grad(true));
    // alternate stride to cover the discriminator's configuration
    let stride = if instance % 2 == 0 { 1 } else { 2 };
    let y = g.conv2d(x, w, b, stride, 1).unwrap();
    let shape = g.value(y).shape().to_vec();
    let target = g.leaf(rand(&shape, -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x, w, b])
}

fn batch_norm_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(rand(&[2, 3, 4, 4], -1.0, 1.0, rng).with_requires_grad(true));
    let gamma = g.leaf(rand(&[3], 0.5, 1.5, rng).with_requires_grad(true));
    let beta = g.leaf(rand(&[3], -0.5, 0.5, rng).with_requires_grad(true));
    let (y, _) = g.batch_norm_train(x, gamma, beta).unwrap();
    let target = g.leaf(rand(&[2, 3, 4, 4], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x, gamma, beta])
}

fn relu_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(away_from_zero(&[64], 0.05, rng).with_requires_grad(true));
    let y = g.relu(x);
    let target = g.leaf(rand(&[64], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn leaky_relu_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(away_from_zero(&[64], 0.05, rng).with_requires_grad(true));
    let y = g.leaky_relu(x, 0.2);
    let target = g.leaf(rand(&[64], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn tanh_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(rand(&[64], -2.0, 2.0, rng).with_requires_grad(true));
    let y = g.tanh(x);
    let target = g.leaf(rand(&[64], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn sigmoid_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(rand(&[64], -2.0, 2.0, rng).with_requires_grad(true));
    let y = g.sigmoid(x);
    let target = g.leaf(rand(&[64], 0.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn add_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let a = g.leaf(rand(&[3, 5], -1.0, 1.0, rng).with_requires_grad(true));
    let b = g.leaf(rand(&[3, 5], -1.0, 1.0, rng).with_requires_grad(true));
    let y = g.add(a, b).unwrap();
    let target = g.leaf(rand(&[3, 5], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![a, b])
}

fn concat_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let a = g.leaf(rand(&[1, 3, 4, 4], -1.0, 1.0, rng).with_requires_grad(true));
    let b = g.leaf(rand(&[1, 2, 4, 4], -1.0, 1.0, rng).with_requires_grad(true));
    let y = g.concat_channels(a, b).unwrap();
    let target = g.leaf(rand(&[1, 5, 4, 4], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![a, b])
}

fn scale_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(rand(&[32], -1.0, 1.0, rng).with_requires_grad(true));
    let y = g.scale(x, 0.37);
    let target = g.leaf(rand(&[32], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn clamp_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    // keep samples away from the clamp corners the FD step would straddle
    let n = 48;
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let v = rng.random_range(-1.0f32..1.0);
            if (v.abs() - 0.7).abs() < 0.05 {
                v * 0.5
            } else {
                v
            }
        })
        .collect();
    let x = g.leaf(Tensor::new(&[n], data).unwrap().with_requires_grad(true));
    let y = g.clamp(x, -0.7, 0.7);
    let target = g.leaf(rand(&[n], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn pool_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let x = g.leaf(rand(&[2, 3, 6, 6], -1.0, 1.0, rng).with_requires_grad(true));
    let y = g.global_avg_pool(x).unwrap();
    let target = g.leaf(rand(&[2, 3, 1, 1], -1.0, 1.0, rng));
    let loss = g.mse_loss(y, target).unwrap();
    (g, loss, vec![x])
}

fn mse_case(rng: &mut ChaCha12Rng, _: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let a = g.leaf(rand(&[40], -1.0, 1.0, rng).with_requires_grad(true));
    let b = g.leaf(rand(&[40], -1.0, 1.0, rng).with_requires_grad(true));
    let loss = g.mse_loss(a, b).unwrap();
    (g, loss, vec![a, b])
}

fn bce_case(rng: &mut ChaCha12Rng, instance: usize) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let p = g.leaf(rand(&[8], 0.05, 0.95, rng).with_requires_grad(true));
    let loss = g.bce_loss(p, instance % 2 == 0).unwrap();
    (g, loss, vec![p])
}

fn run_op(name: &str, case: CaseFn, cfg: &SuiteConfig, salt: u64) -> OpReport {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ salt);
    let mut worst = 0.0f64;
    for i in 0..cfg.instances {
        let (mut g, loss, leaves) = case(&mut rng, i);
        g.backward(loss).expect("loss is scalar");
        worst = worst.max(check_leaves(&g, loss, &leaves, FD_STEP));
    }
    OpReport {
        name: name.to_string(),
        instances: cfg.instances,
        max_rel_err: worst,
    }
}

/// Full coarse generator at desk scale. The first instance (when enabled)
/// checks every parameter tensor exhaustively; the rest probe 64 random
/// coordinates each.
fn run_generator(cfg: &SuiteConfig) -> OpReport {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x67656e);
    let mut worst = 0.0f64;
    for i in 0..cfg.instances {
        let mut net = CoarseGenerator::new(&NetworkSpec::desk(), rng.random()).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(rand(&[1, 3, 6, 6], -1.0, 1.0, &mut rng));
        let bound = net.forward_train(&mut g, x).unwrap();
        let shape = g.value(bound.output).shape().to_vec();
        let target = g.leaf(rand(&shape, -1.0, 1.0, &mut rng));
        let loss = g.mse_loss(bound.output, target).unwrap();
        g.backward(loss).unwrap();

        if i == 0 && cfg.generator_exhaustive {
            let leaves: Vec<Var> = bound.trainable.iter().map(|&(_, v)| v).collect();
            worst = worst.max(check_leaves(&g, loss, &leaves, GEN_FD_STEP));
        } else {
            // random probes across all trainable tensors
            let mut analytic = Vec::with_capacity(64);
            let mut numeric = Vec::with_capacity(64);
            for _ in 0..64 {
                let &(_, leaf) = &bound.trainable[rng.random_range(0..bound.trainable.len())];
                let coord = rng.random_range(0..g.value(leaf).numel());
                if let Some(nv) = stable_central_diff(&g, loss, leaf, coord, GEN_FD_STEP) {
                    analytic.push(g.grad(leaf).map(|gr| gr[coord] as f64).unwrap_or(0.0));
                    numeric.push(nv);
                }
            }
            worst = worst.max(vec_rel_err(&analytic, &numeric));
        }
    }
    OpReport {
        name: "coarse_generator".to_string(),
        instances: cfg.instances,
        max_rel_err: worst,
    }
}

/// Run the whole verification suite and return one report per operation.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<OpReport> {
    let ops: [(&str, CaseFn); 13] = [
        ("conv2d", conv_case),
        ("batch_norm", batch_norm_case),
        ("relu", relu_case),
        ("leaky_relu", leaky_relu_case),
        ("tanh", tanh_case),
        ("sigmoid", sigmoid_case),
        ("add", add_case),
        ("concat_channels", concat_case),
        ("scale", scale_case),
        ("clamp", clamp_case),
        ("global_avg_pool", pool_case),
        ("mse_loss", mse_case),
        ("bce_loss", bce_case),
    ];
    let mut reports: Vec<OpReport> = ops
        .iter()
        .enumerate()
        .map(|(i, (name, case))| run_op(name, *case, cfg, i as u64 + 1))
        .collect();
    reports.push(run_generator(cfg));
    reports
}
