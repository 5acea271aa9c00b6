//! `chroma`: train, apply and evaluate the colorization models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chroma_core::data::{self, CifarSplit, Dataset, DatasetKind};
use chroma_core::eval::{self, EvalReport};
use chroma_core::gradcheck::{self, GradCheckOptions};
use chroma_core::training::{self, Checkpoint, ModelKind, StepMetrics, TrainConfig, TrainOutput, Trainer};
use chroma_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

/// Exit status for a gradient check that found a mismatch.
const GRADCHECK_FAILED: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "chroma", version, about = "Conditional-GAN image colorization")]
struct Cli {
    /// Random seed for initialization, data order and sample selection.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON training configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, metrics and outputs.
    #[arg(long, global = true, default_value = "chroma-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a GAN or baseline colorizer.
    Train(TrainArgs),
    /// Colorize image files with a trained checkpoint.
    Colorize(ColorizeArgs),
    /// Score a checkpoint on a dataset and write eval.csv.
    Eval(EvalArgs),
    /// Write a grid of grayscale, ground truth and colorized samples.
    Montage(MontageArgs),
    /// Check every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long, default_value = "cifar10")]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: PathBuf,
    /// CIFAR-10 split to read.
    #[arg(long, default_value = "test")]
    split: CifarSplit,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    lambda_l1: Option<f32>,
    #[arg(long)]
    label_smooth: Option<f32>,
    #[arg(long)]
    disc_updates: Option<usize>,
    /// Predict L*a*b* instead of a*b* only.
    #[arg(long)]
    full_color: bool,
    /// Random horizontal flips.
    #[arg(long)]
    flip: bool,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Record elapsed seconds in the metrics file.
    #[arg(long)]
    wall_clock: bool,
    /// Continue from a checkpoint; only --epochs may change.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ColorizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Crop and resize inputs to the model size instead of rejecting them.
    #[arg(long)]
    resize: bool,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct MontageArgs {
    /// One output column per checkpoint, in order.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Number of sample rows.
    #[arg(short, long, default_value_t = 8)]
    n: usize,
    /// Output file; defaults to montage.png in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5)]
    instances: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Deliberately distort one op's gradient.
    #[arg(long, hide = true)]
    perturb: Option<String>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        4
    } else if e.is_data_error() {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a),
        Command::Colorize(a) => cmd_colorize(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Montage(a) => cmd_montage(&cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(&cli, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let Some(path) = &cli.config else { return Ok(TrainConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    TrainConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut TrainConfig, cli: &Cli, a: &TrainArgs) {
    fn set<T: Clone>(dst: &mut T, v: &Option<T>) {
        if let Some(v) = v {
            *dst = v.clone();
        }
    }
    set(&mut cfg.seed, &cli.seed);
    set(&mut cfg.model, &a.model);
    set(&mut cfg.dataset, &a.dataset);
    if a.data_dir.is_some() {
        cfg.data_dir = a.data_dir.clone();
    }
    if a.limit.is_some() {
        cfg.limit = a.limit;
    }
    if a.depth.is_some() {
        cfg.depth = a.depth;
    }
    set(&mut cfg.epochs, &a.epochs);
    set(&mut cfg.batch_size, &a.batch_size);
    set(&mut cfg.image_size, &a.image_size);
    set(&mut cfg.base_channels, &a.base_channels);
    set(&mut cfg.lr, &a.lr);
    set(&mut cfg.lambda_l1, &a.lambda_l1);
    set(&mut cfg.label_smooth, &a.label_smooth);
    set(&mut cfg.disc_updates, &a.disc_updates);
    set(&mut cfg.log_every, &a.log_every);
    set(&mut cfg.checkpoint_every, &a.checkpoint_every);
    cfg.predict_ab &= !a.full_color;
    cfg.flip |= a.flip;
    cfg.wall_clock_metrics |= a.wall_clock;
}

fn load_dataset(kind: DatasetKind, dir: &Path, size: usize, split: CifarSplit, limit: Option<usize>) -> Result<Dataset> {
    let ds = data::load(kind, dir, size, split, limit)?;
    for line in &ds.report {
        println!("{line}");
    }
    println!("loaded {} images from {}", ds.len(), ds.source);
    Ok(ds)
}

fn status_line(m: &StepMetrics) -> String {
    format!(
        "step {} d_loss {:.4} g_adv {:.4} g_l1 {:.4} d_real_acc {:.3} d_fake_acc {:.3}",
        m.step, m.d_loss, m.g_adv_loss, m.g_l1_loss, m.d_real_acc, m.d_fake_acc
    )
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<u8> {
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = training::resume(path)?;
            if let Some(e) = a.epochs {
                t.config.epochs = e;
            }
            if a.data_dir.is_some() {
                t.config.data_dir = a.data_dir.clone();
            }
            println!("resuming from {} at step {}", path.display(), t.step);
            t
        }
        None => {
            let mut cfg = load_config(cli)?;
            apply_overrides(&mut cfg, cli, a);
            Trainer::new(cfg)?
        }
    };
    let cfg = trainer.config.clone();
    let dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("no data directory: pass --data-dir or set data_dir in the config".into()))?;
    let ds = load_dataset(cfg.dataset, &dir, cfg.image_size, CifarSplit::Train, cfg.limit)?;
    let out = TrainOutput { dir: cli.out_dir.clone() };
    match training::train(&mut trainer, &ds, Some(&out), |m| println!("{}", status_line(m))) {
        Ok(_) => {
            println!("wrote {}", out.checkpoint_path(trainer.step).display());
            Ok(0)
        }
        Err(Error::NumericAbort { step }) => {
            eprintln!("diagnostic checkpoint: {}", out.diagnostic_path(step).display());
            Err(Error::NumericAbort { step })
        }
        Err(e) => Err(e),
    }
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    Checkpoint::load(path)?.into_trainer(path)
}

fn cmd_colorize(cli: &Cli, a: &ColorizeArgs) -> Result<u8> {
    let trainer = load_trainer(&a.checkpoint)?;
    let size = trainer.config.image_size;
    create_dir(&cli.out_dir)?;
    for input in &a.inputs {
        let img = data::read_rgb(input)?;
        let img = if img.dimensions() == (size as u32, size as u32) {
            img
        } else if a.resize {
            data::fit_square(&img, size)
        } else {
            return Err(Error::Image {
                path: input.clone(),
                reason: format!(
                    "image is {}x{} but the model requires {size}x{size}; pass --resize to crop and scale",
                    img.width(),
                    img.height()
                ),
            });
        };
        let sample = data::Sample::from_rgb(img);
        let out = eval::colorize(&trainer.generator, &[&sample.norm], 1)?.remove(0);
        let stem = input.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let path = cli.out_dir.join(format!("{stem}.colorized.png"));
        data::write_png(&path, &out)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<u8> {
    let trainer = load_trainer(&a.checkpoint)?;
    let d = &a.data;
    let ds = load_dataset(d.dataset, &d.data_dir, trainer.config.image_size, d.split, d.limit)?;
    let report = EvalReport::evaluate(&trainer.generator, &ds, 32)?;
    create_dir(&cli.out_dir)?;
    let path = cli.out_dir.join("eval.csv");
    std::fs::write(&path, report.to_csv()).map_err(|source| Error::Io { path: path.clone(), source })?;
    println!("{}", report.summary());
    println!("wrote {}", path.display());
    Ok(0)
}

fn cmd_montage(cli: &Cli, a: &MontageArgs) -> Result<u8> {
    let trainers = a.checkpoints.iter().map(|p| load_trainer(p)).collect::<Result<Vec<_>>>()?;
    let size = trainers[0].config.image_size;
    if let Some((p, t)) = a.checkpoints.iter().zip(&trainers).find(|(_, t)| t.config.image_size != size) {
        return Err(Error::Config(format!(
            "{} uses {}x{} images, the first checkpoint {size}x{size}",
            p.display(),
            t.config.image_size,
            t.config.image_size
        )));
    }
    let d = &a.data;
    let ds = load_dataset(d.dataset, &d.data_dir, size, d.split, d.limit)?;
    let picks = eval::select_samples(ds.len(), a.n, cli.seed.unwrap_or(0))?;
    let samples: Vec<_> = picks.iter().map(|&i| &ds.samples[i].norm).collect();
    let columns = trainers
        .iter()
        .map(|t| eval::colorize(&t.generator, &samples, 32))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<_>> = picks
        .iter()
        .enumerate()
        .map(|(r, &i)| {
            let mut row = vec![eval::grayscale(&ds.samples[i].norm), ds.samples[i].rgb.clone()];
            row.extend(columns.iter().map(|c| c[r].clone()));
            row
        })
        .collect();
    let grid = eval::montage(&rows)?;
    let path = match &a.output {
        Some(p) => p.clone(),
        None => {
            create_dir(&cli.out_dir)?;
            cli.out_dir.join("montage.png")
        }
    };
    data::write_png(&path, &grid)?;
    println!("wrote {} ({}x{})", path.display(), grid.width(), grid.height());
    Ok(0)
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<u8> {
    let opts = GradCheckOptions {
        instances: a.instances,
        tolerance: a.tolerance,
        seed: cli.seed.unwrap_or(0),
        perturb: a.perturb.clone(),
        ..GradCheckOptions::default()
    };
    let reports = gradcheck::run_suite(&opts)?;
    println!("{:<18} {:>9} {:>14}  status", "op", "instances", "max_rel_error");
    for r in &reports {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<18} {:>9} {:>14.3e}  {status}", r.op, r.instances, r.max_rel_error);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op).collect();
    if failed.is_empty() {
        println!("all {} ops within {:e}", reports.len(), a.tolerance);
        Ok(0)
    } else {
        eprintln!("gradient check failed for: {}", failed.join(", "));
        Ok(GRADCHECK_FAILED)
    }
}
