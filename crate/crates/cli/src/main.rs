//! `vigru` command-line driver.
//!
//! Exit codes: 0 success, 1 check failure, 2 io, 3 numeric abort,
//! 4 configuration.

mod lock;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vigru::checkpoint::checkpoint_load;
use vigru::config::{Precision, RunConfig};
use vigru::data::{load_split, scan_dataset, stratified_split, synth_generate, DatasetIndex, Split};
use vigru::metrics::{evaluate_model, export_embeddings, MetricsReport};
use vigru::model::{model_grad_check, Model, ModelConfig};
use vigru::rng;
use vigru::tensor::{ParamCheckStatus, Scalar, Tensor};
use vigru::train::{train, Resume};
use vigru::{Error, Result};

use crate::lock::OutputLock;

const TRAIN_DEFAULTS: &str = "Reference defaults (used for any key the config omits):
  train.batch_size 32, train.epochs 200, train.lr0 1e-3, train.lr_min 1e-6,
  optimizer Adam (beta1 0.9, beta2 0.999, eps 1e-8), cosine annealing per epoch,
  categorical cross-entropy loss;
  model.vit: image 224, patch 16, d_model 768, depth 12, heads 12, mlp 3072, freeze_n 6;
  model.head: d_gru 512, num_classes 3; data.split_ratio 0.8.";

#[derive(Parser)]
#[command(name = "vigru", version, about = "ViT + Bi-GRU image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic class-per-folder image dataset.
    Synth(SynthArgs),
    /// Train from a JSON config.
    #[command(after_help = TRAIN_DEFAULTS)]
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the per-class table.
    Eval(EvalArgs),
    /// Export pooled embeddings to CSV.
    Extract(ExtractArgs),
    /// Finite-difference gradient check of the 64-bit model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Images per class.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 224)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides train.epochs (default 200).
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.batch_size (default 32).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides train.lr0 (default 1e-3).
    #[arg(long)]
    lr0: Option<f64>,
    /// Overrides train.lr_min (default 1e-6).
    #[arg(long)]
    lr_min: Option<f64>,
    /// Overrides train.seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.workers (default 0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report path; defaults to <output_dir>/eval_<split>.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Config whose model section is checked; the tiny model when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Maximum relative error per element.
    #[arg(long, default_value = "1e-4")]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value = "1e-5")]
    step: f64,
    /// Random labelled images in the loss.
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<u8> {
    let index = synth_generate(&a.out, a.per_class, a.classes, a.image_size, a.seed)?;
    for (name, n) in index.classes.iter().zip(index.counts()) {
        println!("{name}\t{n}");
    }
    println!("total\t{}", index.records.len());
    Ok(0)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Scans and splits the configured dataset root.
fn dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    let root = cfg
        .data
        .root
        .as_deref()
        .ok_or_else(|| Error::Config("data.root is not set".into()))?;
    let (index, skipped) = scan_dataset(root)?;
    for s in &skipped.skipped {
        log::warn!("skipped {}: {}", s.path.display(), s.reason);
    }
    if !skipped.is_empty() && cfg.output_dir.is_dir() {
        let path = cfg.output_dir.join("skipped.json");
        write_file(&path, serde_json::to_string_pretty(&skipped).expect("serializes").as_bytes())?;
    }
    stratified_split(&index, cfg.data.split_ratio, cfg.split_seed())
}

fn cmd_train(a: TrainArgs) -> Result<u8> {
    let mut cfg = RunConfig::load(&a.config)?;
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.workers {
        t.workers = v;
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let out = cfg.output_dir.clone();
    cfg.train.checkpoint_path.get_or_insert_with(|| out.join("best.ckpt"));
    cfg.train.last_checkpoint_path.get_or_insert_with(|| out.join("last.ckpt"));
    cfg.train.log_path.get_or_insert_with(|| out.join("train_log.jsonl"));
    write_file(&out.join("config.json"), cfg.to_json().as_bytes())?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, a.resume.as_deref()),
        Precision::F64 => train_with::<f64>(&cfg, a.resume.as_deref()),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<u8> {
    let index = dataset(cfg)?;
    let size = cfg.model.vit.image_size;
    let train_set = load_split::<T>(&index, Split::Train, size)?;
    let test_set = load_split::<T>(&index, Split::Test, size)?;
    log::info!("{} train / {} test images, {} classes", train_set.len(), test_set.len(), index.num_classes());
    if index.num_classes() != cfg.model.head.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but model.head.num_classes is {}",
            index.num_classes(),
            cfg.model.head.num_classes
        )));
    }
    let (mut model, resume) = match resume {
        Some(path) => {
            let r = checkpoint_load::<T>(path, Some(&cfg.model))?;
            let optimizer = r
                .optimizer
                .ok_or_else(|| Error::Load(format!("{} holds no optimizer state", path.display())))?;
            log::info!("resuming after epoch {}", r.meta.epoch);
            (r.model, Some(Resume { optimizer, meta: r.meta }))
        }
        None => (Model::<T>::new(cfg.model.clone(), cfg.train.seed)?, None),
    };
    let log = train(&mut model, &train_set, &test_set, &cfg.train, &cfg.augment, resume)?;
    if let Some(last) = log.last() {
        println!(
            "final epoch {}: train loss {:.5}, train top-1 {:.4}, test top-1 {:?}",
            last.epoch, last.train_loss, last.train_top1, last.test_top1
        );
    }
    if let (Some(e), Some(b)) = (log.best_epoch, log.best_test_top1) {
        println!("best test top-1 {b:.4} at epoch {e}");
    }
    if !test_set.is_empty() {
        let (report, _) = evaluate_model(&model, &test_set, &index.classes)?;
        print!("{}", report.text_table());
        write_file(&cfg.output_dir.join("final_report.json"), report.to_json().as_bytes())?;
    }
    Ok(0)
}

/// Loads a checkpoint in the precision it was requested in.
fn with_checkpoint<R>(
    ckpt: &Path,
    cfg: &RunConfig,
    f32_fn: impl FnOnce(Model<f32>) -> Result<R>,
    f64_fn: impl FnOnce(Model<f64>) -> Result<R>,
) -> Result<R> {
    match cfg.precision {
        Precision::F32 => f32_fn(checkpoint_load::<f32>(ckpt, Some(&cfg.model))?.model),
        Precision::F64 => f64_fn(checkpoint_load::<f64>(ckpt, Some(&cfg.model))?.model),
    }
}

fn eval_with<T: Scalar>(model: Model<T>, index: &DatasetIndex, split: Split) -> Result<MetricsReport> {
    let samples = load_split::<T>(index, split, model.config.vit.image_size)?;
    Ok(evaluate_model(&model, &samples, &index.classes)?.0)
}

fn cmd_eval(a: EvalArgs) -> Result<u8> {
    let cfg = RunConfig::load(&a.config)?;
    let index = dataset(&cfg)?;
    let report = with_checkpoint(
        &a.ckpt,
        &cfg,
        |m| eval_with(m, &index, a.split),
        |m| eval_with(m, &index, a.split),
    )?;
    print!("{}", report.text_table());
    let path = a
        .out
        .unwrap_or_else(|| cfg.output_dir.join(format!("eval_{}.json", a.split.as_str())));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(&path, report.to_json().as_bytes())?;
    println!("report written to {}", path.display());
    Ok(0)
}

fn extract_with<T: Scalar>(model: Model<T>, index: &DatasetIndex, split: Split, out: &Path) -> Result<usize> {
    let samples = load_split::<T>(index, split, model.config.vit.image_size)?;
    export_embeddings(&model, &samples, out)
}

fn cmd_extract(a: ExtractArgs) -> Result<u8> {
    let cfg = RunConfig::load(&a.config)?;
    let index = dataset(&cfg)?;
    let rows = with_checkpoint(
        &a.ckpt,
        &cfg,
        |m| extract_with(m, &index, a.split, &a.out),
        |m| extract_with(m, &index, a.split, &a.out),
    )?;
    println!("{rows} rows written to {}", a.out.display());
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let config = match &a.config {
        Some(path) => RunConfig::load(path)?.model,
        None => ModelConfig::tiny(),
    };
    if a.samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let model = Model::<f64>::new(config, a.seed)?;
    let vit = &model.config.vit;
    let n = vit.image_size * vit.image_size * vit.channels;
    let samples: Vec<(Tensor<f64>, usize)> = (0..a.samples)
        .map(|i| {
            let mut r = rng::substream(a.seed, "gradcheck", &[i as u64]);
            let pixels = (0..n).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
            let image = Tensor::new(&[vit.image_size, vit.image_size, vit.channels], pixels)?;
            Ok((image, i % model.config.head.num_classes))
        })
        .collect::<Result<_>>()?;
    let started = std::time::Instant::now();
    let report = model_grad_check(&model, &samples, a.step, a.tol)?;
    println!("{:<14} {:>7} {:>8} {:>14}  status", "group", "tensors", "values", "max rel err");
    for g in &report.groups {
        let status = match g.status {
            ParamCheckStatus::Passed => "pass",
            ParamCheckStatus::Failed => "FAIL",
            ParamCheckStatus::Skipped => "skipped (frozen)",
        };
        let err = if g.status == ParamCheckStatus::Skipped {
            "-".to_string()
        } else {
            format!("{:.3e}", g.worst_rel_err)
        };
        println!("{:<14} {:>7} {:>8} {:>14}  {status}", g.group, g.tensors, g.values, err);
    }
    println!("tolerance {:e}, step {:e}, {:.1}s", a.tol, a.step, started.elapsed().as_secs_f64());
    Ok(if report.passed() { 0 } else { 1 })
}
