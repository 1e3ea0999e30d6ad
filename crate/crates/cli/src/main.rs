//! Command-line entry point: dataset synthesis, the four training stages,
//! two-scale inference, evaluation, and gradient verification.
//!
//! Exit codes: 0 success, 1 contract violation or invalid data, 2 i/o
//! failure. Diagnostics go to stderr; machine-readable output goes to
//! files or stdout.

use clap::{Args, Parser, Subcommand};
use demoire_core::error::Error;
use demoire_core::gradcheck::{self, SuiteConfig};
use demoire_core::image::io;
use demoire_core::metrics::{self, EvalMode};
use demoire_core::net::{Checkpoint, CoarseGenerator, FineNetwork, NetworkSpec};
use demoire_core::synth::{build_dataset, DatasetManifest, DatasetSpec, ParamRanges, Split};
use demoire_core::train::{self, apply_fine, TrainConfig, TrainStage};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "demoire",
    about = "Synthesize moire-degraded screen captures, train the two-scale restoration networks, and evaluate them",
    after_help = "The DEMOIRE_THREADS environment variable caps worker parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    /// 4 residual blocks, 16 features, 8 fine layers; sized for CPU runs.
    Desk,
    /// 16 residual blocks, 64 features, 20 fine layers.
    Paper,
}

impl Preset {
    fn spec(&self) -> NetworkSpec {
        match self {
            Preset::Desk => NetworkSpec::desk(),
            Preset::Paper => NetworkSpec::paper(),
        }
    }

    fn train(&self, stage: TrainStage) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(stage),
            Preset::Paper => TrainConfig::paper(stage),
        }
    }
}

#[derive(Args)]
struct TrainOverrides {
    /// Architecture and hyperparameter preset. Paper defaults: pretrain lr
    /// 1e-4 (2e5 iterations batch 32 coarse, 1e5 iterations batch 64 fine),
    /// adversarial retraining lr 1e-5 for 1e4 iterations, lambda 1e-4, k=1,
    /// Adam beta1 0.9.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Update iterations (defaults to the preset value).
    #[arg(long)]
    iterations: Option<u64>,
    /// Minibatch size (defaults to the preset value).
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate (defaults to the preset value).
    #[arg(long)]
    lr: Option<f32>,
    /// Discriminator learning rate (defaults to a tenth of the generator's).
    #[arg(long)]
    disc_lr: Option<f32>,
    /// Adversarial loss weight (defaults to the preset value).
    #[arg(long)]
    lambda: Option<f32>,
    /// Discriminator updates per generator update.
    #[arg(long, default_value_t = 1)]
    k: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Held-out evaluation cadence in iterations (0 disables).
    #[arg(long, default_value_t = 200)]
    eval_every: u64,
    /// Rolling checkpoint cadence in iterations (0: only at the end).
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: u64,
    /// Crop size for fine-scale training.
    #[arg(long, default_value_t = 64)]
    fine_patch: usize,
}

impl TrainOverrides {
    fn config(&self, stage: TrainStage) -> TrainConfig {
        let mut cfg = self.preset.train(stage);
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
            cfg.disc_lr = v / 10.0;
        }
        if let Some(v) = self.disc_lr {
            cfg.disc_lr = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda_adv = v;
        }
        cfg.disc_steps = self.k;
        cfg.seed = self.seed;
        cfg.eval_every = self.eval_every;
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.fine_patch = self.fine_patch;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic (degraded, groundtruth) dataset from clean PNGs.
    Synth {
        /// Directory of source PNGs (>= patch size each).
        #[arg(long)]
        src: PathBuf,
        /// Output directory for images and manifest.txt.
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs to synthesize.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 512)]
        patch: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sampling ranges: the full declared ranges, their lower-degradation
        /// half, or the stronger disjoint half standing in for real captures.
        #[arg(long, default_value = "default", value_parser = ["default", "pretrain", "real-standin"])]
        ranges: String,
        /// Unpaired clean crops for adversarial retraining.
        #[arg(long, default_value_t = 0)]
        clean: usize,
    },
    /// Supervised pretraining of the coarse generator.
    TrainCoarse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Adversarial retraining of the coarse generator.
    RetrainGanCoarse {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained coarse checkpoint to start from (and anchor to).
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Supervised pretraining of the fine network under a frozen coarse
    /// generator.
    TrainFine {
        #[arg(long)]
        manifest: PathBuf,
        /// Trained coarse checkpoint.
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Adversarial retraining of the fine network.
    RetrainGanFine {
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained fine checkpoint to start from (and anchor to).
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Restore one PNG through the full coarse-then-fine path.
    Infer {
        /// Input PNG; dimensions must be divisible by 4.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        fine: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset split with PSNR/SSIM.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// baseline-coarse | coarse | baseline-full | full
        #[arg(long, default_value = "coarse")]
        mode: String,
        #[arg(long)]
        coarse: Option<PathBuf>,
        #[arg(long)]
        fine: Option<PathBuf>,
        /// Write the machine-readable report here (table always on stdout).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write input|output|groundtruth comparison strips here.
        #[arg(long)]
        grids: Option<PathBuf>,
        /// Evaluate at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Random instances per operation.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Skip the exhaustive per-parameter sweep of the full generator.
        #[arg(long, default_value_t = false)]
        fast: bool,
    },
}

fn main() -> ExitCode {
    demoire_core::threads::configure_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_coarse(path: &PathBuf) -> Result<CoarseGenerator, Error> {
    CoarseGenerator::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_fine(path: &PathBuf) -> Result<FineNetwork, Error> {
    FineNetwork::from_checkpoint(&Checkpoint::load(path)?)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Synth {
            src,
            out,
            n,
            patch,
            seed,
            ranges,
            clean,
        } => {
            let spec = DatasetSpec {
                n_patches: n,
                patch_size: patch,
                master_seed: seed,
                ranges: match ranges.as_str() {
                    "pretrain" => ParamRanges::pretrain(),
                    "real-standin" => ParamRanges::real_standin(),
                    _ => ParamRanges::default(),
                },
                n_clean: clean,
            };
            let manifest = build_dataset(&src, &out, &spec)?;
            eprintln!(
                "wrote {} pairs (+{} clean) to {}",
                manifest.records.len(),
                manifest.clean_pool.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainCoarse {
            manifest,
            out,
            overrides,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg = overrides.config(TrainStage::PretrainCoarse);
            let spec = overrides.preset.spec();
            train::pretrain_coarse(&m, &spec, &cfg, Some(&out))?;
            eprintln!(
                "coarse generator written to {}",
                out.join("coarse-latest.ckpt").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::RetrainGanCoarse {
            manifest,
            pretrained,
            out,
            overrides,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg = overrides.config(TrainStage::GanCoarse);
            let net = load_coarse(&pretrained)?;
            train::gan_retrain_coarse(&m, &net, &cfg, Some(&out))?;
            eprintln!(
                "retrained generator written to {}",
                out.join("coarse-latest.ckpt").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainFine {
            manifest,
            coarse,
            out,
            overrides,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg = overrides.config(TrainStage::PretrainFine);
            let g = load_coarse(&coarse)?;
            train::pretrain_fine(&m, &g, &cfg, Some(&out))?;
            eprintln!(
                "fine network written to {}",
                out.join("fine-latest.ckpt").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::RetrainGanFine {
            manifest,
            pretrained,
            coarse,
            out,
            overrides,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg = overrides.config(TrainStage::GanFine);
            let g = load_coarse(&coarse)?;
            let h = load_fine(&pretrained)?;
            train::gan_retrain_fine(&m, &h, &g, &cfg, Some(&out))?;
            eprintln!(
                "retrained fine network written to {}",
                out.join("fine-latest.ckpt").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Infer {
            input,
            coarse,
            fine,
            out,
        } => {
            let g = load_coarse(&coarse)?;
            let h = load_fine(&fine)?;
            let img = io::load_png(&input)?;
            let restored = apply_fine(&g, &h, &img)?;
            io::save_png(&out, &restored)?;
            eprintln!("restored image written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            manifest,
            split,
            mode,
            coarse,
            fine,
            report,
            grids,
            limit,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let mode = EvalMode::parse(&mode)
                .ok_or_else(|| Error::contract(format!("unknown eval mode '{mode}'")))?;
            let split = if split == "train" { Split::Train } else { Split::Test };
            let g = coarse.as_ref().map(load_coarse).transpose()?;
            let h = fine.as_ref().map(load_fine).transpose()?;
            let mut config = vec![format!("manifest\t{}", manifest.display())];
            if let Some(p) = &coarse {
                config.push(format!("coarse\t{}", p.display()));
            }
            if let Some(p) = &fine {
                config.push(format!("fine\t{}", p.display()));
            }
            let rep = metrics::evaluate(
                &m,
                split,
                mode,
                g.as_ref(),
                h.as_ref(),
                limit,
                grids.as_deref(),
                config,
            )?;
            print!("{}", rep.to_table());
            if let Some(path) = report {
                let tmp = path.with_extension("txt.tmp");
                std::fs::write(&tmp, rep.to_text()).map_err(|e| Error::io(&tmp, e))?;
                std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            seed,
            instances,
            fast,
        } => {
            let cfg = SuiteConfig {
                seed,
                instances,
                generator_exhaustive: !fast,
            };
            let reports = gradcheck::run_suite(&cfg);
            let mut all_ok = true;
            for r in &reports {
                println!(
                    "{:<18} instances {:>3}  max_rel_err {:.3e}  {}",
                    r.name,
                    r.instances,
                    r.max_rel_err,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
                all_ok &= r.passed();
            }
            if all_ok {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "gradient check failed (tolerance {:.0e})",
                    gradcheck::TOLERANCE
                );
                Ok(ExitCode::from(1))
            }
        }
    }
}
