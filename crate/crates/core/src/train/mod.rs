//! Two-stage training for both scales: supervised pretraining on synthetic
//! pairs, then adversarial retraining against an unpaired clean pool with
//! a fidelity anchor to the pretrained network's outputs.
//!
//! Pretraining is literally the adversarial loop with zero adversarial
//! weight and the groundtruth as fidelity target, so the reduction between
//! the two is an identity of code paths, not an analogy.

mod data;

pub use data::{images_to_tensor, sample_minibatch, sample_records, tensor_to_images, PatchStore};

use crate::error::{Error, Result};
use crate::image::{downsample_gaussian, upsample_bicubic, Image};
use crate::metrics;
use crate::net::{CoarseGenerator, Discriminator, FineNetwork, NetKind, NetworkSpec, ParamSet};
use crate::synth::{mix_seed, DatasetManifest, Split};
use crate::tensor::{adam_step, AdamHyper, AdamState, Graph, Tensor, Var, BCE_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

/// Downsampling factor between the native and coarse scales.
pub const SCALE_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    PretrainCoarse,
    GanCoarse,
    PretrainFine,
    GanFine,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f32,
    /// Discriminator learning rate; the adversarial game stays balanced
    /// with the discriminator an order of magnitude slower than the
    /// generator's anchor-constrained updates.
    pub disc_lr: f32,
    /// Weight of the adversarial term in the generator loss.
    pub lambda_adv: f32,
    /// Discriminator updates per generator update.
    pub disc_steps: u32,
    pub seed: u64,
    /// Evaluate on the held-out split every this many iterations (0: never).
    pub eval_every: u64,
    pub eval_patches: usize,
    /// Write a rolling checkpoint every this many iterations (0: only at
    /// the end).
    pub checkpoint_every: u64,
    /// Crop size for fine-scale training.
    pub fine_patch: usize,
}

impl TrainConfig {
    /// Full-size defaults: Adam beta1 0.9; pretraining at lr 1e-4
    /// (2e5 iterations, batch 32 coarse; 1e5 iterations, batch 64 fine);
    /// adversarial retraining at lr 1e-5 for 1e4 iterations with
    /// lambda 1e-4 and k = 1.
    pub fn paper(stage: TrainStage) -> Self {
        let (iterations, batch_size, lr, lambda_adv) = match stage {
            TrainStage::PretrainCoarse => (200_000, 32, 1e-4, 0.0),
            TrainStage::GanCoarse => (10_000, 32, 1e-5, 1e-4),
            TrainStage::PretrainFine => (100_000, 64, 1e-4, 0.0),
            TrainStage::GanFine => (10_000, 64, 1e-5, 1e-4),
        };
        TrainConfig {
            stage,
            iterations,
            batch_size,
            lr,
            disc_lr: lr / 10.0,
            lambda_adv,
            disc_steps: 1,
            seed: 1,
            eval_every: 200,
            eval_patches: 64,
            checkpoint_every: 1000,
            fine_patch: 64,
        }
    }

    /// CPU-sized defaults for the small preset.
    pub fn desk(stage: TrainStage) -> Self {
        let (iterations, batch_size, lr, lambda_adv) = match stage {
            TrainStage::PretrainCoarse => (5_000, 8, 1e-3, 0.0),
            TrainStage::GanCoarse => (1_000, 8, 1e-5, 1e-4),
            TrainStage::PretrainFine => (2_000, 4, 1e-3, 0.0),
            TrainStage::GanFine => (500, 4, 1e-5, 1e-4),
        };
        TrainConfig {
            stage,
            iterations,
            batch_size,
            lr,
            disc_lr: lr / 10.0,
            lambda_adv,
            disc_steps: 1,
            seed: 1,
            eval_every: 0,
            eval_patches: 16,
            checkpoint_every: 1000,
            fine_patch: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Disc,
    Gen,
}

#[derive(Clone, Debug)]
pub struct IterRecord {
    pub step: u64,
    pub phase: Phase,
    pub total: f32,
    pub fidelity: f32,
    pub adversarial: f32,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
}

/// In-memory training log; also streamed to `train-<stage>.log` when an
/// output directory is given. Every recorded loss is finite by
/// construction (training aborts before logging otherwise).
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalPoint>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut out = String::from("demoire-trainlog v1\n");
        let mut ei = 0;
        for r in &self.iters {
            while ei < self.evals.len() && self.evals[ei].step < r.step {
                let e = &self.evals[ei];
                out.push_str(&format!(
                    "eval\t{}\t{}\t{:.6}\n",
                    e.step,
                    metrics::format_db(e.psnr),
                    e.ssim
                ));
                ei += 1;
            }
            let phase = match r.phase {
                Phase::Disc => "disc",
                Phase::Gen => "gen",
            };
            out.push_str(&format!(
                "iter\t{}\t{}\t{:.8}\t{:.8}\t{:.8}\t{:.2}\n",
                r.step, phase, r.total, r.fidelity, r.adversarial, r.wall_ms
            ));
        }
        for e in &self.evals[ei..] {
            out.push_str(&format!(
                "eval\t{}\t{}\t{:.6}\n",
                e.step,
                metrics::format_db(e.psnr),
                e.ssim
            ));
        }
        out
    }

    pub fn gen_losses(&self) -> Vec<f32> {
        self.iters
            .iter()
            .filter(|r| r.phase == Phase::Gen)
            .map(|r| r.total)
            .collect()
    }

    fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Per-network Adam state aligned with its parameter entries.
struct NetOptimizer {
    states: Vec<AdamState>,
    hyper: AdamHyper,
}

impl NetOptimizer {
    fn new(params: &ParamSet, lr: f32) -> Self {
        NetOptimizer {
            states: params
                .entries()
                .iter()
                .map(|e| AdamState::new(e.tensor.numel()))
                .collect(),
            hyper: AdamHyper::with_lr(lr),
        }
    }

    fn step(&mut self, params: &mut ParamSet, g: &Graph, bound: &[(usize, Var)]) -> Result<()> {
        for &(ix, var) in bound {
            let Some(grad) = g.grad(var) else {
                continue; // no path from the loss to this parameter
            };
            let grad = grad.to_vec();
            let entry = params.entry_mut(ix);
            adam_step(
                &entry.name,
                entry.tensor.data_mut(),
                &grad,
                &mut self.states[ix],
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

fn check_finite(stage: &str, iteration: u64, value: f32) -> Result<f32> {
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            stage: stage.to_string(),
            iteration,
        });
    }
    Ok(value)
}

/// Warn (throttled) when the discriminator rails against its clamp.
fn check_saturation(probs: &[f32], step: u64, warned: &mut u64) {
    let railed = probs
        .iter()
        .any(|&p| p <= BCE_EPS || p >= 1.0 - BCE_EPS);
    if railed && (*warned == 0 || step.saturating_sub(*warned) >= 100) {
        eprintln!("warning: discriminator saturated at step {step}");
        *warned = step;
    }
}

fn coarse_pair(store: &PatchStore, id: u64) -> Result<(Image, Image)> {
    let pair = store.pair(id)?;
    Ok((
        downsample_gaussian(&pair.0, SCALE_FACTOR)?,
        downsample_gaussian(&pair.1, SCALE_FACTOR)?,
    ))
}

enum CoarseFidelity {
    GroundTruth,
    Frozen(Box<CoarseGenerator>),
}

/// The shared coarse-scale loop: per iteration, `disc_steps` discriminator
/// updates (when a discriminator runs) followed by one generator update on
/// fidelity + lambda * adversarial loss.
fn run_coarse(
    manifest: &DatasetManifest,
    mut net: CoarseGenerator,
    fidelity: CoarseFidelity,
    mut disc: Option<Discriminator>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CoarseGenerator, Option<Discriminator>, TrainLog)> {
    let store = PatchStore::new(manifest.clone());
    let stage = match cfg.stage {
        TrainStage::PretrainCoarse => "pretrain-coarse",
        _ => "gan-coarse",
    };
    if disc.is_some() && store.clean_len() == 0 {
        return Err(Error::contract(
            "adversarial retraining needs a non-empty clean pool in the manifest",
        ));
    }

    let mut gen_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut disc_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xd15c));
    let mut gen_opt = NetOptimizer::new(net.params(), cfg.lr);
    let mut disc_opt = disc.as_ref().map(|d| NetOptimizer::new(d.params(), cfg.disc_lr));
    let mut log = TrainLog::default();
    let mut warned = 0u64;
    let ckpt_kind = if matches!(cfg.stage, TrainStage::PretrainCoarse) {
        NetKind::CoarsePretrained
    } else {
        NetKind::CoarseRetrained
    };

    for step in 0..cfg.iterations {
        // -- discriminator phase ------------------------------------------
        if let (Some(d), Some(d_opt)) = (disc.as_mut(), disc_opt.as_mut()) {
            for _ in 0..cfg.disc_steps {
                let t0 = Instant::now();
                let records = sample_records(manifest, Split::Train, cfg.batch_size, &mut disc_rng)?;
                let mut fakes_in = Vec::with_capacity(records.len());
                for r in records {
                    fakes_in.push(coarse_pair(&store, r.id)?.0);
                }
                let fake_refs: Vec<&Image> = fakes_in.iter().collect();
                let fake_input = images_to_tensor(&fake_refs)?;

                let mut cleans = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let ix = disc_rng.random_range(0..store.clean_len());
                    cleans.push(downsample_gaussian(store.clean(ix)?.as_ref(), SCALE_FACTOR)?);
                }
                let clean_refs: Vec<&Image> = cleans.iter().collect();
                let real_input = images_to_tensor(&clean_refs)?;

                let mut g = Graph::new();
                let fx = g.leaf(fake_input);
                // fake samples come from the frozen generator path
                let fake = net.forward_infer(&mut g, fx)?;
                let rx = g.leaf(real_input);
                let d_real = d.forward_train(&mut g, rx)?;
                let d_fake_out = {
                    // detach: rebuild the fake batch as a constant leaf
                    let fake_t = g.value(fake).clone();
                    let fleaf = g.leaf(fake_t);
                    d.forward_train(&mut g, fleaf)?
                };
                check_saturation(g.value(d_real.output).data(), step, &mut warned);
                check_saturation(g.value(d_fake_out.output).data(), step, &mut warned);
                let l_real = g.bce_loss(d_real.output, true)?;
                let l_fake = g.bce_loss(d_fake_out.output, false)?;
                let loss = g.add(l_real, l_fake)?;
                let total = check_finite(stage, step, g.scalar_value(loss))?;
                g.backward(loss)?;
                let mut bound = d_real.trainable;
                bound.extend(d_fake_out.trainable);
                d_opt.step(d.params_mut(), &g, &bound)?;
                log.iters.push(IterRecord {
                    step,
                    phase: Phase::Disc,
                    total,
                    fidelity: 0.0,
                    adversarial: 0.0,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                });
            }
        }

        // -- generator phase ----------------------------------------------
        let t0 = Instant::now();
        let records = sample_records(manifest, Split::Train, cfg.batch_size, &mut gen_rng)?;
        let mut inputs = Vec::with_capacity(records.len());
        let mut gts = Vec::with_capacity(records.len());
        for r in &records {
            let (i, j) = coarse_pair(&store, r.id)?;
            inputs.push(i);
            gts.push(j);
        }
        let in_refs: Vec<&Image> = inputs.iter().collect();
        let input_t = images_to_tensor(&in_refs)?;

        let mut g = Graph::new();
        let x = g.leaf(input_t.clone());
        let bound = net.forward_train(&mut g, x)?;
        let target = match &fidelity {
            CoarseFidelity::GroundTruth => {
                let gt_refs: Vec<&Image> = gts.iter().collect();
                g.leaf(images_to_tensor(&gt_refs)?)
            }
            CoarseFidelity::Frozen(anchor) => {
                // anchor output computed frozen, inserted as a constant
                let mut ag = Graph::new();
                let ax = ag.leaf(input_t);
                let ay = anchor.forward_infer(&mut ag, ax)?;
                g.leaf(ag.value(ay).clone())
            }
        };
        let fid = g.mse_loss(bound.output, target)?;
        let (loss, fid_v, adv_v) = if cfg.lambda_adv > 0.0 {
            let d = disc
                .as_ref()
                .ok_or_else(|| Error::contract("adversarial weight without a discriminator"))?;
            let probs = d.forward_infer(&mut g, bound.output)?;
            let adv = g.bce_loss(probs, true)?;
            let scaled = g.scale(adv, cfg.lambda_adv);
            let total = g.add(fid, scaled)?;
            (total, g.scalar_value(fid), g.scalar_value(adv))
        } else {
            (fid, g.scalar_value(fid), 0.0)
        };
        let total = check_finite(stage, step, g.scalar_value(loss))?;
        check_finite(stage, step, fid_v)?;
        check_finite(stage, step, adv_v)?;
        g.backward(loss)?;
        gen_opt.step(net.params_mut(), &g, &bound.trainable)?;
        log.iters.push(IterRecord {
            step,
            phase: Phase::Gen,
            total,
            fidelity: fid_v,
            adversarial: adv_v,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        // -- periodic work --------------------------------------------------
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let (p, s) = eval_coarse(&store, &net, cfg.eval_patches)?;
            log.evals.push(EvalPoint {
                step,
                psnr: p,
                ssim: s,
            });
            eprintln!("[{stage}] step {} psnr {:.2} ssim {:.4}", step + 1, p, s);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                net.to_checkpoint(ckpt_kind, step + 1)?
                    .save(dir.join("coarse-latest.ckpt"))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        net.to_checkpoint(ckpt_kind, cfg.iterations)?
            .save(dir.join("coarse-latest.ckpt"))?;
        if let Some(d) = &disc {
            d.to_checkpoint(cfg.iterations)?
                .save(dir.join("disc-latest.ckpt"))?;
        }
        log.write(&dir.join(format!("train-{stage}.log")))?;
    }
    Ok((net, disc, log))
}

fn eval_coarse(store: &PatchStore, net: &CoarseGenerator, limit: usize) -> Result<(f64, f64)> {
    let ids: Vec<u64> = store
        .manifest()
        .split(Split::Test)
        .iter()
        .take(limit.max(1))
        .map(|r| r.id)
        .collect();
    if ids.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for id in &ids {
        let (i, j) = coarse_pair(store, *id)?;
        let restored = apply_coarse(net, &i)?;
        psnr_acc += metrics::psnr(&restored, &j)?;
        ssim_acc += metrics::ssim(&restored, &j)?;
    }
    Ok((psnr_acc / ids.len() as f64, ssim_acc / ids.len() as f64))
}

/// Run the coarse generator on one image (inference mode).
pub fn apply_coarse(net: &CoarseGenerator, input: &Image) -> Result<Image> {
    let mut g = Graph::new();
    let x = g.leaf(images_to_tensor(&[input])?);
    let y = net.forward_infer(&mut g, x)?;
    Ok(tensor_to_images(g.value(y))?.remove(0))
}

/// Supervised pretraining of the coarse generator on downsampled pairs.
pub fn pretrain_coarse(
    manifest: &DatasetManifest,
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CoarseGenerator, TrainLog)> {
    let net = CoarseGenerator::new(spec, mix_seed(cfg.seed, 0x696e69))?;
    let (net, _, log) = run_coarse(manifest, net, CoarseFidelity::GroundTruth, None, cfg, out_dir)?;
    Ok((net, log))
}

/// Adversarial retraining of the coarse generator: alternating
/// discriminator/generator updates, the generator anchored to the
/// pretrained network's outputs.
pub fn gan_retrain_coarse(
    manifest: &DatasetManifest,
    pretrained: &CoarseGenerator,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CoarseGenerator, Discriminator, TrainLog)> {
    let disc = Discriminator::new(pretrained.spec(), mix_seed(cfg.seed, 0xd5eed))?;
    let (net, disc, log) = run_coarse(
        manifest,
        pretrained.clone(),
        CoarseFidelity::Frozen(Box::new(pretrained.clone())),
        Some(disc),
        cfg,
        out_dir,
    )?;
    Ok((net, disc.expect("discriminator threaded through"), log))
}

/// The adversarial loop with the groundtruth as fidelity target. With
/// `lambda_adv = 0` this must reproduce [`pretrain_coarse`] step for step
/// from the same seed; the reduction tests pin that identity.
pub fn gan_retrain_coarse_groundtruth_target(
    manifest: &DatasetManifest,
    init: CoarseGenerator,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CoarseGenerator, Discriminator, TrainLog)> {
    let disc = Discriminator::new(init.spec(), mix_seed(cfg.seed, 0xd5eed))?;
    let (net, disc, log) = run_coarse(
        manifest,
        init,
        CoarseFidelity::GroundTruth,
        Some(disc),
        cfg,
        out_dir,
    )?;
    Ok((net, disc.expect("discriminator threaded through"), log))
}

// ---- fine scale -------------------------------------------------------------

/// Cache of the frozen coarse restoration, bicubic-upsampled back to native
/// resolution, one entry per record.
struct CoarseUpsampled<'a> {
    coarse: &'a CoarseGenerator,
    store: &'a PatchStore,
    cache: HashMap<u64, Rc<Image>>,
}

impl<'a> CoarseUpsampled<'a> {
    fn get(&mut self, id: u64) -> Result<Rc<Image>> {
        if let Some(img) = self.cache.get(&id) {
            return Ok(Rc::clone(img));
        }
        let pair = self.store.pair(id)?;
        let coarse_in = downsample_gaussian(&pair.0, SCALE_FACTOR)?;
        let restored = apply_coarse(self.coarse, &coarse_in)?;
        let up = upsample_bicubic(&restored, SCALE_FACTOR)?;
        let rc = Rc::new(up);
        self.cache.insert(id, Rc::clone(&rc));
        Ok(rc)
    }
}

enum FineFidelity {
    GroundTruth,
    Frozen(Box<FineNetwork>),
}

#[allow(clippy::too_many_arguments)]
fn run_fine(
    manifest: &DatasetManifest,
    mut net: FineNetwork,
    coarse: &CoarseGenerator,
    fidelity: FineFidelity,
    mut disc: Option<Discriminator>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(FineNetwork, Option<Discriminator>, TrainLog)> {
    let store = PatchStore::new(manifest.clone());
    let stage = match cfg.stage {
        TrainStage::PretrainFine => "pretrain-fine",
        _ => "gan-fine",
    };
    if disc.is_some() && store.clean_len() == 0 {
        return Err(Error::contract(
            "adversarial retraining needs a non-empty clean pool in the manifest",
        ));
    }
    let mut upsampled = CoarseUpsampled {
        coarse,
        store: &store,
        cache: HashMap::new(),
    };

    let mut gen_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut disc_rng = ChaCha12Rng::seed_from_u64(mix_seed(cfg.seed, 0xd15c));
    let mut gen_opt = NetOptimizer::new(net.params(), cfg.lr);
    let mut disc_opt = disc.as_ref().map(|d| NetOptimizer::new(d.params(), cfg.disc_lr));
    let mut log = TrainLog::default();
    let mut warned = 0u64;
    let p = cfg.fine_patch;
    let ckpt_kind = if matches!(cfg.stage, TrainStage::PretrainFine) {
        NetKind::FinePretrained
    } else {
        NetKind::FineRetrained
    };

    // aligned random crops of (upsampled coarse, native input, groundtruth)
    let crop_batch = |rng: &mut ChaCha12Rng,
                          ups: &mut CoarseUpsampled,
                          batch: usize|
     -> Result<(Tensor, Tensor, Tensor)> {
        let records = sample_records(manifest, Split::Train, batch, rng)?;
        let mut up_crops = Vec::with_capacity(batch);
        let mut in_crops = Vec::with_capacity(batch);
        let mut gt_crops = Vec::with_capacity(batch);
        for r in records {
            let pair = store.pair(r.id)?;
            let up = ups.get(r.id)?;
            let (h, w) = (pair.0.height(), pair.0.width());
            if h < p || w < p {
                return Err(Error::contract(format!(
                    "record {} is {h}x{w}, smaller than the fine patch {p}",
                    r.id
                )));
            }
            let y0 = if h == p { 0 } else { rng.random_range(0..=h - p) };
            let x0 = if w == p { 0 } else { rng.random_range(0..=w - p) };
            up_crops.push(up.crop(y0, x0, p, p)?);
            in_crops.push(pair.0.crop(y0, x0, p, p)?);
            gt_crops.push(pair.1.crop(y0, x0, p, p)?);
        }
        let u: Vec<&Image> = up_crops.iter().collect();
        let i: Vec<&Image> = in_crops.iter().collect();
        let j: Vec<&Image> = gt_crops.iter().collect();
        Ok((
            images_to_tensor(&u)?,
            images_to_tensor(&i)?,
            images_to_tensor(&j)?,
        ))
    };

    for step in 0..cfg.iterations {
        if let (Some(d), Some(d_opt)) = (disc.as_mut(), disc_opt.as_mut()) {
            for _ in 0..cfg.disc_steps {
                let t0 = Instant::now();
                let (up_t, in_t, _) = crop_batch(&mut disc_rng, &mut upsampled, cfg.batch_size)?;
                let mut cleans = Vec::with_capacity(cfg.batch_size);
                for _ in 0..cfg.batch_size {
                    let ix = disc_rng.random_range(0..store.clean_len());
                    let img = store.clean(ix)?;
                    let y0 = disc_rng.random_range(0..=img.height() - p);
                    let x0 = disc_rng.random_range(0..=img.width() - p);
                    cleans.push(img.crop(y0, x0, p, p)?);
                }
                let c: Vec<&Image> = cleans.iter().collect();
                let real_t = images_to_tensor(&c)?;

                let mut g = Graph::new();
                let up = g.leaf(up_t);
                let orig = g.leaf(in_t);
                let fake = net.forward_infer(&mut g, up, orig)?;
                let fake_leaf = {
                    let t = g.value(fake.output).clone();
                    g.leaf(t)
                };
                let rx = g.leaf(real_t);
                let d_real = d.forward_train(&mut g, rx)?;
                let d_fake = d.forward_train(&mut g, fake_leaf)?;
                check_saturation(g.value(d_real.output).data(), step, &mut warned);
                check_saturation(g.value(d_fake.output).data(), step, &mut warned);
                let l_real = g.bce_loss(d_real.output, true)?;
                let l_fake = g.bce_loss(d_fake.output, false)?;
                let loss = g.add(l_real, l_fake)?;
                let total = check_finite(stage, step, g.scalar_value(loss))?;
                g.backward(loss)?;
                let mut bound = d_real.trainable;
                bound.extend(d_fake.trainable);
                d_opt.step(d.params_mut(), &g, &bound)?;
                log.iters.push(IterRecord {
                    step,
                    phase: Phase::Disc,
                    total,
                    fidelity: 0.0,
                    adversarial: 0.0,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                });
            }
        }

        let t0 = Instant::now();
        let (up_t, in_t, gt_t) = crop_batch(&mut gen_rng, &mut upsampled, cfg.batch_size)?;
        let mut g = Graph::new();
        let up = g.leaf(up_t.clone());
        let orig = g.leaf(in_t.clone());
        let bound = net.forward_train(&mut g, up, orig)?;
        let target = match &fidelity {
            FineFidelity::GroundTruth => g.leaf(gt_t),
            FineFidelity::Frozen(anchor) => {
                let mut ag = Graph::new();
                let au = ag.leaf(up_t);
                let ai = ag.leaf(in_t);
                let ay = anchor.forward_infer(&mut ag, au, ai)?;
                g.leaf(ag.value(ay.output).clone())
            }
        };
        let fid = g.mse_loss(bound.output, target)?;
        let (loss, fid_v, adv_v) = if cfg.lambda_adv > 0.0 {
            let d = disc
                .as_ref()
                .ok_or_else(|| Error::contract("adversarial weight without a discriminator"))?;
            let probs = d.forward_infer(&mut g, bound.output)?;
            let adv = g.bce_loss(probs, true)?;
            let scaled = g.scale(adv, cfg.lambda_adv);
            let total = g.add(fid, scaled)?;
            (total, g.scalar_value(fid), g.scalar_value(adv))
        } else {
            (fid, g.scalar_value(fid), 0.0)
        };
        let total = check_finite(stage, step, g.scalar_value(loss))?;
        g.backward(loss)?;
        gen_opt.step(net.params_mut(), &g, &bound.trainable)?;
        log.iters.push(IterRecord {
            step,
            phase: Phase::Gen,
            total,
            fidelity: fid_v,
            adversarial: adv_v,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let (pv, sv) = eval_fine(&store, coarse, &net, cfg.eval_patches)?;
            log.evals.push(EvalPoint {
                step,
                psnr: pv,
                ssim: sv,
            });
            eprintln!("[{stage}] step {} psnr {:.2} ssim {:.4}", step + 1, pv, sv);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                net.to_checkpoint(ckpt_kind, step + 1)?
                    .save(dir.join("fine-latest.ckpt"))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        net.to_checkpoint(ckpt_kind, cfg.iterations)?
            .save(dir.join("fine-latest.ckpt"))?;
        if let Some(d) = &disc {
            d.to_checkpoint(cfg.iterations)?
                .save(dir.join("disc-latest.ckpt"))?;
        }
        log.write(&dir.join(format!("train-{stage}.log")))?;
    }
    Ok((net, disc, log))
}

fn eval_fine(
    store: &PatchStore,
    coarse: &CoarseGenerator,
    net: &FineNetwork,
    limit: usize,
) -> Result<(f64, f64)> {
    let ids: Vec<u64> = store
        .manifest()
        .split(Split::Test)
        .iter()
        .take(limit.max(1))
        .map(|r| r.id)
        .collect();
    if ids.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for id in &ids {
        let pair = store.pair(*id)?;
        let restored = apply_fine(coarse, net, &pair.0)?;
        psnr_acc += metrics::psnr(&restored, &pair.1)?;
        ssim_acc += metrics::ssim(&restored, &pair.1)?;
    }
    Ok((psnr_acc / ids.len() as f64, ssim_acc / ids.len() as f64))
}

/// Full two-scale restoration of one image: coarse restoration of the
/// downsampled input, bicubic upsampling, then the fine network against
/// the native-resolution input.
pub fn apply_fine(coarse: &CoarseGenerator, fine: &FineNetwork, input: &Image) -> Result<Image> {
    if input.height() % SCALE_FACTOR != 0 || input.width() % SCALE_FACTOR != 0 {
        return Err(Error::contract(format!(
            "input {}x{} not divisible by the scale factor {SCALE_FACTOR}",
            input.height(),
            input.width()
        )));
    }
    let coarse_in = downsample_gaussian(input, SCALE_FACTOR)?;
    let restored = apply_coarse(coarse, &coarse_in)?;
    let up = upsample_bicubic(&restored, SCALE_FACTOR)?;
    let mut g = Graph::new();
    let u = g.leaf(images_to_tensor(&[&up])?);
    let i = g.leaf(images_to_tensor(&[input])?);
    let fwd = fine.forward_infer(&mut g, u, i)?;
    Ok(tensor_to_images(g.value(fwd.output))?.remove(0))
}

/// Supervised pretraining of the fine network under a frozen coarse
/// generator.
pub fn pretrain_fine(
    manifest: &DatasetManifest,
    coarse: &CoarseGenerator,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(FineNetwork, TrainLog)> {
    let net = FineNetwork::new(coarse.spec(), mix_seed(cfg.seed, 0x696e69))?;
    let (net, _, log) = run_fine(
        manifest,
        net,
        coarse,
        FineFidelity::GroundTruth,
        None,
        cfg,
        out_dir,
    )?;
    Ok((net, log))
}

/// Adversarial retraining of the fine network, anchored to the pretrained
/// fine network's outputs; same scheme as the coarse stage.
pub fn gan_retrain_fine(
    manifest: &DatasetManifest,
    pretrained: &FineNetwork,
    coarse: &CoarseGenerator,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(FineNetwork, Discriminator, TrainLog)> {
    let disc = Discriminator::new(pretrained.spec(), mix_seed(cfg.seed, 0xd5eed))?;
    let (net, disc, log) = run_fine(
        manifest,
        pretrained.clone(),
        coarse,
        FineFidelity::Frozen(Box::new(pretrained.clone())),
        Some(disc),
        cfg,
        out_dir,
    )?;
    Ok((net, disc.expect("discriminator threaded through"), log))
}
