//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, configs or files),
//! 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::bench;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ApMode, EvalConfig, DEFAULT_IOU_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use crate::io::{generate_synthetic, load_dataset, save_dataset, SynthConfig};
use crate::model::{gradcheck, load_checkpoint, save_checkpoint, ModelConfig};
use crate::trainer::{precompute_assignments, train, TrainConfig, TrainError};

pub const OUTPUT_SCHEMA_VERSION: u32 = 1;
pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
/// Gradient checks above this relative error fail.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "sgwsod",
    version,
    about = "Saliency-guided weakly supervised object detection"
)]
pub struct Cli {
    /// RNG seed for generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Select seeds and negatives for every image of a dataset.
    Seeds(SeedsArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train and compare the full model and its two ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 48)]
    pub grid_side: u32,
    /// Superpixels per image (a perfect square).
    #[arg(long, default_value_t = 64)]
    pub superpixels: u32,
    #[arg(long, default_value_t = 1)]
    pub min_objects: u32,
    #[arg(long, default_value_t = 3)]
    pub max_objects: u32,
    /// Saliency noise amplitude in [0, 1).
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    /// Feature signal-to-noise ratio.
    #[arg(long, default_value_t = 4.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 16)]
    pub random_proposals: usize,
}

#[derive(Debug, Args)]
pub struct SeedsArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    /// Area scale of the saliency contrast.
    #[arg(long, default_value_t = 1e3)]
    pub sigma: f64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Comma-separated trunk layer widths.
    #[arg(long, value_delimiter = ',', default_value = "128,128")]
    pub trunk_widths: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub saliency_hidden: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Learning rate of the first phase.
    #[arg(long, default_value_t = 1e-5)]
    pub lr1: f64,
    /// Learning rate after --phase-boundary.
    #[arg(long, default_value_t = 1e-6)]
    pub lr2: f64,
    /// Last epoch trained with --lr1.
    #[arg(long, default_value_t = 10)]
    pub phase_boundary: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Seed classification loss weight.
    #[arg(long, default_value_t = 0.1)]
    pub lambda1: f64,
    /// Seed saliency loss weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// Weight decay.
    #[arg(long, default_value_t = 5e-4)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 1e3)]
    pub sigma: f64,
    #[arg(long)]
    pub disable_seed_losses: bool,
    #[arg(long)]
    pub disable_saliency_subnet: bool,
    /// Std-dev of Gaussian feature jitter (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub feature_jitter: f64,
}

#[derive(Debug, Args)]
pub struct EvalOpts {
    /// IoU needed for a correct detection.
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    /// NMS suppression IoU.
    #[arg(long, default_value_t = DEFAULT_NMS_THRESHOLD)]
    pub nms: f64,
    /// 11-point interpolated AP instead of the continuous area.
    #[arg(long)]
    pub ap11: bool,
}

impl EvalOpts {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            iou_threshold: self.iou,
            nms_threshold: self.nms,
            ap_mode: if self.ap11 {
                ApMode::ElevenPoint
            } else {
                ApMode::Continuous
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset for CorLoc, normally the training split; defaults to --data.
    #[arg(long)]
    pub corloc_data: Option<PathBuf>,
    /// Write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the per-class table as CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalOpts,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Training dataset; the standard benchmark for --seed when omitted.
    #[arg(long, requires = "test")]
    pub data: Option<PathBuf>,
    /// Test dataset.
    #[arg(long, requires = "data")]
    pub test: Option<PathBuf>,
    /// Overrides the benchmark epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides the benchmark first-phase learning rate.
    #[arg(long)]
    pub lr1: Option<f64>,
    /// Overrides the benchmark second-phase learning rate.
    #[arg(long)]
    pub lr2: Option<f64>,
    #[command(flatten)]
    pub eval: EvalOpts,
}

/// Parses `argv` (including the program name), runs it and returns the exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn emit(out: &mut dyn Write, json: bool, value: serde_json::Value, human: &str) -> Result<()> {
    let text = if json {
        let mut v = value;
        v["schema_version"] = json!(OUTPUT_SCHEMA_VERSION);
        serde_json::to_string(&v).expect("json value")
    } else {
        human.trim_end().to_string()
    };
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn from_train_error(e: TrainError) -> Error {
    if let Some(p) = &e.last_good {
        log::warn!(
            "training stopped; last good parameters are finite: {}",
            p.net.all_finite()
        );
    }
    e.source
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                grid_side: a.grid_side,
                superpixels: a.superpixels,
                min_objects: a.min_objects,
                max_objects: a.max_objects,
                num_images: a.images,
                num_classes: a.classes,
                feature_dim: a.feature_dim,
                noise_amplitude: a.noise,
                snr: a.snr,
                random_proposals: a.random_proposals,
                seed: cli.seed,
            };
            let ds = generate_synthetic(&cfg)?;
            save_dataset(&ds, &a.out)?;
            emit(
                out,
                cli.json,
                json!({"command": "synth", "out": a.out, "images": ds.len(), "config": cfg}),
                &format!("wrote {} images to {}", ds.len(), a.out.display()),
            )?;
        }
        Command::Seeds(a) => {
            if !(a.sigma > 0.0 && a.sigma.is_finite()) {
                return Err(Error::Config(format!(
                    "sigma must be positive, got {}",
                    a.sigma
                )));
            }
            let ds = load_dataset(&a.data)?;
            let assignments = precompute_assignments(&ds, a.sigma)?;
            write_json(&a.out, &assignments)?;
            emit(
                out,
                cli.json,
                json!({"command": "seeds", "out": a.out, "images": assignments.len()}),
                &format!(
                    "wrote seeds for {} images to {}",
                    assignments.len(),
                    a.out.display()
                ),
            )?;
        }
        Command::Train(a) => {
            let tc = TrainConfig {
                epochs: a.epochs,
                lr_phase1: a.lr1,
                lr_phase2: a.lr2,
                phase_boundary: a.phase_boundary,
                momentum: a.momentum,
                lambda1: a.lambda1,
                lambda2: a.lambda2,
                lambda3: a.lambda3,
                sigma: a.sigma,
                shuffle_seed: cli.seed,
                init_seed: cli.seed,
                disable_seed_losses: a.disable_seed_losses,
                disable_saliency_subnet: a.disable_saliency_subnet,
                feature_jitter: a.feature_jitter,
            };
            tc.validate()?;
            let ds = load_dataset(&a.data)?;
            let mc = ModelConfig {
                trunk_widths: a.model.trunk_widths.clone(),
                saliency_hidden: a.model.saliency_hidden,
                ..ModelConfig::new(ds.feature_dim(), ds.num_classes())
            };
            mc.validate()?;
            let (params, mut log) = train(&ds, &mc, &tc).map_err(from_train_error)?;
            save_checkpoint(&params, &a.out)?;
            log.checkpoint = Some(a.out.clone());
            let lines: Vec<String> = log
                .epochs
                .iter()
                .map(|e| serde_json::to_string(e).expect("serializable"))
                .collect();
            if let Some(path) = &a.log {
                let mut text = lines.join("\n");
                text.push('\n');
                fs::write(path, text).map_err(|e| Error::io(path, e))?;
            }
            if cli.json {
                for e in &log.epochs {
                    emit(out, true, json!({"command": "train", "epoch": e}), "")?;
                }
            }
            let last = log.epochs.last().expect("at least one epoch");
            emit(
                out,
                cli.json,
                json!({"command": "train", "checkpoint": a.out, "final": last}),
                &format!(
                    "trained {} epochs, final loss {:.4}\ncheckpoint: {}",
                    log.epochs.len(),
                    last.mean.total,
                    a.out.display()
                ),
            )?;
        }
        Command::Eval(a) => {
            let cfg = a.eval.config();
            cfg.validate()?;
            let params = load_checkpoint(&a.checkpoint)?;
            let test = load_dataset(&a.data)?;
            let loc = a.corloc_data.as_ref().map(load_dataset).transpose()?;
            let report = evaluate(&params, &test, loc.as_ref(), &cfg)?;
            if let Some(path) = &a.out {
                write_json(path, &report)?;
            }
            if let Some(path) = &a.csv {
                fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            emit(
                out,
                cli.json,
                json!({"command": "eval", "report": report}),
                &report.to_csv(),
            )?;
        }
        Command::Gradcheck(a) => {
            let gc = gradcheck::GradCheckConfig {
                instances: a.instances,
                step: a.step,
                seed: cli.seed,
                ..Default::default()
            };
            if gc.instances == 0 || !(gc.step > 0.0 && gc.step < 1.0) {
                return Err(Error::Config(
                    "need at least one instance and a step in (0, 1)".into(),
                ));
            }
            let report = gradcheck::run(&gc)?;
            let passed = report.max_rel_error < GRADCHECK_TOLERANCE;
            emit(
                out,
                cli.json,
                json!({
                    "command": "gradcheck",
                    "passed": passed,
                    "tolerance": GRADCHECK_TOLERANCE,
                    "report": report,
                }),
                &format!(
                    "max relative error {:.3e} ({}) over {} parameters in {} instances: {}",
                    report.max_rel_error,
                    report.worst_tensor,
                    report.parameters_checked,
                    report.instances.len(),
                    if passed { "pass" } else { "FAIL" }
                ),
            )?;
            if !passed {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Ablate(a) => {
            let cfg = a.eval.config();
            cfg.validate()?;
            let (train_set, test_set) = match (&a.data, &a.test) {
                (Some(d), Some(t)) => (load_dataset(d)?, load_dataset(t)?),
                _ => bench::standard_benchmark(cli.seed)?,
            };
            let mut tc = bench::benchmark_training(cli.seed);
            tc.epochs = a.epochs.unwrap_or(tc.epochs);
            tc.lr_phase1 = a.lr1.unwrap_or(tc.lr_phase1);
            tc.lr_phase2 = a.lr2.unwrap_or(tc.lr_phase2);
            tc.validate()?;
            let mc = bench::benchmark_model(train_set.feature_dim(), train_set.num_classes());
            let rows = bench::run_ablation(&train_set, &test_set, &mc, &tc, &cfg)
                .map_err(from_train_error)?;
            emit(
                out,
                cli.json,
                json!({"command": "ablate", "rows": rows}),
                &bench::format_ablation(&rows),
            )?;
        }
    }
    Ok(EXIT_OK)
}
