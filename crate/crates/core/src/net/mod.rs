//! The three restoration networks, scale-parameterized so the full-size
//! and desk-size instances share one code path: a residual-block coarse
//! generator (conv-BN-ReLU blocks, long skip, tanh), a two-stage fine
//! network (cascaded 5x5/3x3 conv stack with skip, then a retrieval stage
//! that concatenates the original input), and a strided-conv discriminator.
//!
//! Networks own their parameters as named tensors. A forward pass leases
//! copies onto a fresh [`Graph`]; training reads gradients back by entry
//! index and updates the owned tensors.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointTensor, NetKind};

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{BnStats, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f32 = 0.9;
/// Negative slope of the discriminator activations.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Architecture scale knobs shared by every network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkSpec {
    pub n_res_blocks: usize,
    pub n_features: usize,
    pub fine_layers: usize,
    pub disc_layers: usize,
    /// Normalization convention of network inputs and outputs.
    pub value_lo: f32,
    pub value_hi: f32,
}

impl NetworkSpec {
    /// Full-size configuration: 16 residual blocks, 64 features, 20
    /// fine-stage layers.
    pub fn paper() -> Self {
        NetworkSpec {
            n_res_blocks: 16,
            n_features: 64,
            fine_layers: 20,
            disc_layers: 4,
            value_lo: -1.0,
            value_hi: 1.0,
        }
    }

    /// Small configuration sized for CPU experiments and the test suites.
    pub fn desk() -> Self {
        NetworkSpec {
            n_res_blocks: 4,
            n_features: 16,
            fine_layers: 8,
            disc_layers: 4,
            value_lo: -1.0,
            value_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(Error::contract("spec needs at least 1 residual block"));
        }
        if self.n_features < 4 {
            return Err(Error::contract("spec needs at least 4 features"));
        }
        if self.fine_layers < 4 || self.fine_layers % 2 != 0 {
            return Err(Error::contract(format!(
                "fine_layers must be even and >= 4, got {}",
                self.fine_layers
            )));
        }
        if self.disc_layers < 1 {
            return Err(Error::contract("spec needs at least 1 discriminator layer"));
        }
        if !(self.value_lo < self.value_hi) {
            return Err(Error::contract("value range must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered named parameter storage.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, ix: usize) -> &ParamEntry {
        &self.entries[ix]
    }

    pub fn entry_mut(&mut self, ix: usize) -> &mut ParamEntry {
        &mut self.entries[ix]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    /// Lease every entry onto the graph. In train mode, trainable entries
    /// request gradients.
    fn bind(&self, g: &mut Graph, mode: Mode) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                let rg = mode == Mode::Train && e.trainable;
                g.leaf(e.tensor.clone().with_requires_grad(rg))
            })
            .collect()
    }

    fn trainable_bound(&self, vars: &[Var]) -> Vec<(usize, Var)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| (i, vars[i]))
            .collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Infer,
}

/// Result of a training-mode forward pass: the output node plus the graph
/// bindings of every trainable entry, for gradient readback.
pub struct BoundNet {
    pub output: Var,
    pub trainable: Vec<(usize, Var)>,
}

#[derive(Clone, Copy, Debug)]
struct ConvIx {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnIx {
    gamma: usize,
    beta: usize,
    rmean: usize,
    rvar: usize,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha12Rng,
}

impl<'a> Builder<'a> {
    fn new(params: &'a mut ParamSet, seed: u64) -> Self {
        Builder {
            params,
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-uniform (fan-in) conv weights, zero bias.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> ConvIx {
        let fan_in = (c_in * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::uniform(&[c_out, c_in, k, k], -bound, bound, &mut self.rng);
        let b = Tensor::zeros(&[c_out]);
        ConvIx {
            w: self.params.add(format!("{name}.w"), w, true),
            b: self.params.add(format!("{name}.b"), b, true),
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnIx {
        BnIx {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true),
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            rmean: self.params.add(format!("{name}.rmean"), Tensor::zeros(&[c]), false),
            rvar: self.params.add(format!("{name}.rvar"), Tensor::full(&[c], 1.0), false),
        }
    }
}

/// Pending running-stat updates collected during a train-mode pass.
struct BnUpdates(Vec<(BnIx, BnStats)>);

impl BnUpdates {
    fn apply(self, params: &mut ParamSet) {
        for (ix, stats) in self.0 {
            let m = params.entries[ix.rmean].tensor.data_mut();
            for (r, b) in m.iter_mut().zip(&stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let v = params.entries[ix.rvar].tensor.data_mut();
            for (r, b) in v.iter_mut().zip(&stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

fn batch_norm(
    g: &mut Graph,
    params: &ParamSet,
    vars: &[Var],
    ix: BnIx,
    x: Var,
    mode: Mode,
    updates: &mut BnUpdates,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, vars[ix.gamma], vars[ix.beta])?;
            updates.0.push((ix, stats));
            Ok(y)
        }
        Mode::Infer => {
            let running = BnStats {
                mean: params.entries[ix.rmean].tensor.data().to_vec(),
                var: params.entries[ix.rvar].tensor.data().to_vec(),
            };
            g.batch_norm_infer(x, vars[ix.gamma], vars[ix.beta], &running)
        }
    }
}

// ---- coarse generator -----------------------------------------------------

#[derive(Clone)]
struct ResBlockIx {
    conv1: ConvIx,
    bn1: BnIx,
    conv2: ConvIx,
    bn2: BnIx,
}

/// Coarse-scale generator: head conv + ReLU, a stack of residual blocks
/// (conv-BN-ReLU-conv-BN plus identity), a post conv+BN added back onto the
/// head activation, and a tanh-capped projection to RGB. Spatial dims are
/// preserved throughout.
#[derive(Clone)]
pub struct CoarseGenerator {
    spec: NetworkSpec,
    params: ParamSet,
    head: ConvIx,
    blocks: Vec<ResBlockIx>,
    post_conv: ConvIx,
    post_bn: BnIx,
    tail: ConvIx,
}

impl CoarseGenerator {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let f = spec.n_features;
        let mut params = ParamSet::default();
        let mut b = Builder::new(&mut params, seed);
        let head = b.conv("head", 3, f, 3);
        let blocks = (0..spec.n_res_blocks)
            .map(|i| ResBlockIx {
                conv1: b.conv(&format!("block{i}.conv1"), f, f, 3),
                bn1: b.bn(&format!("block{i}.bn1"), f),
                conv2: b.conv(&format!("block{i}.conv2"), f, f, 3),
                bn2: b.bn(&format!("block{i}.bn2"), f),
            })
            .collect();
        let post_conv = b.conv("post.conv", f, f, 3);
        let post_bn = b.bn("post.bn", f);
        let tail = b.conv("tail", f, 3, 3);
        Ok(CoarseGenerator {
            spec: *spec,
            params,
            head,
            blocks,
            post_conv,
            post_bn,
            tail,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_inner(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(BoundNet, BnUpdates)> {
        let vars = self.params.bind(g, mode);
        let mut updates = BnUpdates(Vec::new());
        let p = &self.params;

        let head = g.conv2d(x, vars[self.head.w], vars[self.head.b], 1, 1)?;
        let head_act = g.relu(head);

        let mut h = head_act;
        for blk in &self.blocks {
            let c1 = g.conv2d(h, vars[blk.conv1.w], vars[blk.conv1.b], 1, 1)?;
            let n1 = batch_norm(g, p, &vars, blk.bn1, c1, mode, &mut updates)?;
            let a1 = g.relu(n1);
            let c2 = g.conv2d(a1, vars[blk.conv2.w], vars[blk.conv2.b], 1, 1)?;
            let n2 = batch_norm(g, p, &vars, blk.bn2, c2, mode, &mut updates)?;
            h = g.add(n2, h)?;
        }

        let pc = g.conv2d(h, vars[self.post_conv.w], vars[self.post_conv.b], 1, 1)?;
        let pn = batch_norm(g, p, &vars, self.post_bn, pc, mode, &mut updates)?;
        let merged = g.add(pn, head_act)?;
        let out = g.conv2d(merged, vars[self.tail.w], vars[self.tail.b], 1, 1)?;
        let out = g.tanh(out);

        Ok((
            BoundNet {
                output: out,
                trainable: self.params.trainable_bound(&vars),
            },
            updates,
        ))
    }

    /// Training pass: batch statistics, gradient-ready bindings, running
    /// stats folded in.
    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<BoundNet> {
        let (bound, updates) = self.forward_inner(g, x, Mode::Train)?;
        updates.apply(&mut self.params);
        Ok(bound)
    }

    /// Inference pass: running statistics, deterministic in the batch.
    pub fn forward_infer(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (bound, _) = self.forward_inner(g, x, Mode::Infer)?;
        Ok(bound.output)
    }

    pub fn to_checkpoint(&self, kind: NetKind, step: u64) -> Result<Checkpoint> {
        if !matches!(kind, NetKind::CoarsePretrained | NetKind::CoarseRetrained) {
            return Err(Error::contract(format!(
                "coarse generator cannot be saved as {kind}"
            )));
        }
        Ok(Checkpoint::from_params(kind, self.spec, step, &self.params))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if !matches!(ckpt.kind, NetKind::CoarsePretrained | NetKind::CoarseRetrained) {
            return Err(CheckpointError::KindMismatch {
                expected: "coarse generator".into(),
                found: ckpt.kind.to_string(),
            }
            .into());
        }
        let mut net = CoarseGenerator::new(&ckpt.spec, 0)?;
        ckpt.fill(&mut net.params)?;
        Ok(net)
    }
}

// ---- fine network -----------------------------------------------------------

/// Output nodes of the fine network's two stages.
pub struct FineForward {
    /// After the cascaded conv stack and long skip.
    pub residual: Var,
    pub output: Var,
}

/// Fine-scale network. Stage one refines the bicubic-upsampled coarse
/// restoration with a deep conv cascade (first half 5x5 kernels, second
/// half 3x3) closed by a long skip. Stage two concatenates the original
/// full-resolution input and maps the 6 channels back to RGB through two
/// convolutions, clamped to the value range.
#[derive(Clone)]
pub struct FineNetwork {
    spec: NetworkSpec,
    params: ParamSet,
    stage1: Vec<ConvIx>,
    proj: ConvIx,
    retrieve1: ConvIx,
    retrieve2: ConvIx,
}

impl FineNetwork {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let f = spec.n_features;
        let mut params = ParamSet::default();
        let mut b = Builder::new(&mut params, seed);
        let stage1 = (0..spec.fine_layers)
            .map(|i| {
                let c_in = if i == 0 { 3 } else { f };
                let k = if i < spec.fine_layers / 2 { 5 } else { 3 };
                b.conv(&format!("stage1.conv{i}"), c_in, f, k)
            })
            .collect();
        let proj = b.conv("stage1.proj", f, 3, 3);
        let retrieve1 = b.conv("stage2.conv1", 6, f, 3);
        let retrieve2 = b.conv("stage2.conv2", f, 3, 3);
        Ok(FineNetwork {
            spec: *spec,
            params,
            stage1,
            proj,
            retrieve1,
            retrieve2,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        upsampled: Var,
        original: Var,
        mode: Mode,
    ) -> Result<(FineForward, Vec<(usize, Var)>)> {
        let vars = self.params.bind(g, mode);
        let mut h = upsampled;
        for (i, conv) in self.stage1.iter().enumerate() {
            let k = if i < self.spec.fine_layers / 2 { 5 } else { 3 };
            let c = g.conv2d(h, vars[conv.w], vars[conv.b], 1, k / 2)?;
            h = g.relu(c);
        }
        let r = g.conv2d(h, vars[self.proj.w], vars[self.proj.b], 1, 1)?;
        let residual = g.add(r, upsampled)?;

        let cat = g.concat_channels(residual, original)?;
        let t = g.conv2d(cat, vars[self.retrieve1.w], vars[self.retrieve1.b], 1, 1)?;
        let t = g.relu(t);
        let out = g.conv2d(t, vars[self.retrieve2.w], vars[self.retrieve2.b], 1, 1)?;
        let out = g.clamp(out, self.spec.value_lo, self.spec.value_hi);

        Ok((
            FineForward {
                residual,
                output: out,
            },
            self.params.trainable_bound(&vars),
        ))
    }

    pub fn forward_train(&mut self, g: &mut Graph, upsampled: Var, original: Var) -> Result<BoundNet> {
        let (fwd, trainable) = self.forward_inner(g, upsampled, original, Mode::Train)?;
        Ok(BoundNet {
            output: fwd.output,
            trainable,
        })
    }

    pub fn forward_infer(&self, g: &mut Graph, upsampled: Var, original: Var) -> Result<FineForward> {
        let (fwd, _) = self.forward_inner(g, upsampled, original, Mode::Infer)?;
        Ok(fwd)
    }

    pub fn to_checkpoint(&self, kind: NetKind, step: u64) -> Result<Checkpoint> {
        if !matches!(kind, NetKind::FinePretrained | NetKind::FineRetrained) {
            return Err(Error::contract(format!(
                "fine network cannot be saved as {kind}"
            )));
        }
        Ok(Checkpoint::from_params(kind, self.spec, step, &self.params))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if !matches!(ckpt.kind, NetKind::FinePretrained | NetKind::FineRetrained) {
            return Err(CheckpointError::KindMismatch {
                expected: "fine network".into(),
                found: ckpt.kind.to_string(),
            }
            .into());
        }
        let mut net = FineNetwork::new(&ckpt.spec, 0)?;
        ckpt.fill(&mut net.params)?;
        Ok(net)
    }
}

// ---- discriminator -----------------------------------------------------------

/// Patch discriminator: `disc_layers` strided 3x3 convolutions with feature
/// counts doubling from half the base width (batch-norm on all but the
/// first), leaky ReLU, global average pooling, and a 1x1 projection to a
/// single sigmoid probability per sample.
#[derive(Clone)]
pub struct Discriminator {
    spec: NetworkSpec,
    params: ParamSet,
    layers: Vec<(ConvIx, Option<BnIx>)>,
    head: ConvIx,
}

impl Discriminator {
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamSet::default();
        let mut b = Builder::new(&mut params, seed);
        let mut layers = Vec::new();
        let mut c_in = 3;
        let mut c_out = (spec.n_features / 2).max(4);
        for i in 0..spec.disc_layers {
            let conv = b.conv(&format!("layer{i}.conv"), c_in, c_out, 3);
            let bn = if i > 0 {
                Some(b.bn(&format!("layer{i}.bn"), c_out))
            } else {
                None
            };
            layers.push((conv, bn));
            c_in = c_out;
            c_out *= 2;
        }
        let head = b.conv("head", c_in, 1, 1);
        Ok(Discriminator {
            spec: *spec,
            params,
            layers,
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward_inner(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(BoundNet, BnUpdates)> {
        let shape = g.value(x).shape().to_vec();
        let min_side = 1usize << self.spec.disc_layers;
        if shape.len() != 4 || shape[2] < min_side || shape[3] < min_side {
            return Err(Error::contract(format!(
                "discriminator with {} layers needs inputs of at least {min_side}x{min_side}, got {shape:?}",
                self.spec.disc_layers
            )));
        }
        let vars = self.params.bind(g, mode);
        let mut updates = BnUpdates(Vec::new());
        let mut h = x;
        for (conv, bn) in &self.layers {
            h = g.conv2d(h, vars[conv.w], vars[conv.b], 2, 1)?;
            if let Some(ix) = bn {
                h = batch_norm(g, &self.params, &vars, *ix, h, mode, &mut updates)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h)?;
        let logit = g.conv2d(pooled, vars[self.head.w], vars[self.head.b], 1, 0)?;
        let prob = g.sigmoid(logit);
        Ok((
            BoundNet {
                output: prob,
                trainable: self.params.trainable_bound(&vars),
            },
            updates,
        ))
    }

    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<BoundNet> {
        let (bound, updates) = self.forward_inner(g, x, Mode::Train)?;
        updates.apply(&mut self.params);
        Ok(bound)
    }

    pub fn forward_infer(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (bound, _) = self.forward_inner(g, x, Mode::Infer)?;
        Ok(bound.output)
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint::from_params(
            NetKind::Discriminator,
            self.spec,
            step,
            &self.params,
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != NetKind::Discriminator {
            return Err(CheckpointError::KindMismatch {
                expected: "discriminator".into(),
                found: ckpt.kind.to_string(),
            }
            .into());
        }
        let mut net = Discriminator::new(&ckpt.spec, 0)?;
        ckpt.fill(&mut net.params)?;
        Ok(net)
    }
}
