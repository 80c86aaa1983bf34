use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msfnet::ablation::{rows_to_csv, run_ablation, AblationPlan, Sweep};
use msfnet::checkpoint::load_checkpoint;
use msfnet::dataset::{gen_synthetic, load_dataset, DatasetIndex, Sample, Split, SynthConfig};
use msfnet::eval::{
    bench_latency, count_flops, emit_report, evaluate_model, miou, MetricsReport, ReportFormat, DEFAULT_BENCH_RUNS,
};
use msfnet::labels::{boundary_labels, downsample_labels, BoundaryConfig, BoundaryMode, IdGrid};
use msfnet::model::parse_boundary_mode;
use msfnet::t4::{write_t4, T4};
use msfnet::train::fit;
use msfnet::{build_model, kv, IGNORE};

mod run_config;

use run_config::{Preset, RunConfig};

/// Real-time semantic segmentation with multi-resolution feature fusion and
/// class-boundary supervision.
#[derive(Parser, Debug)]
#[command(name = "msfnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic shapes dataset
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and loss log
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Write boundary target maps for a dataset split
    Boundary(BoundaryArgs),
    /// Report analytic MACs and FLOPs for a configuration
    Flops(FlopsArgs),
    /// Time eval-mode forwards of a model
    Bench(BenchArgs),
    /// Train a named configuration sweep and write a comparison CSV
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Base configuration before the config file and overrides
    #[arg(long, value_enum, default_value_t = Preset::Micro)]
    preset: Preset,
    /// Flat `key = value` config file (model.*, train.*, loss.*, boundary.*)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set model.fusion_width=32 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::new(self.preset);
        if let Some(path) = &self.config {
            rc.apply_file(path)?;
        }
        rc.apply_overrides(&self.overrides)?;
        Ok(rc)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training samples
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Validation samples
    #[arg(long, default_value_t = 16)]
    val_samples: usize,
    /// Image height and width
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Number of classes including background
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Fewest shapes per image
    #[arg(long, default_value_t = 1)]
    shapes_min: usize,
    /// Most shapes per image
    #[arg(long, default_value_t = 4)]
    shapes_max: usize,
    /// Standard deviation of the pixel noise
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Run directory for the checkpoint, log and resolved config
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides train.epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides train.max_steps
    #[arg(long)]
    max_steps: Option<usize>,
    /// Overrides train.seed (also seeds model initialization)
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.batch_size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides train.lr_max
    #[arg(long)]
    lr_max: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Split to score (train or val)
    #[arg(long, default_value = "val")]
    split: String,
    /// Report file; the format follows --format
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format (json, csv or svg)
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args, Debug)]
struct BoundaryArgs {
    /// Dataset root
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Split whose labels are converted (train or val)
    #[arg(long, default_value = "train")]
    split: String,
    /// Output directory for <id>.t4 boundary maps
    #[arg(long, default_value = "boundaries")]
    out: PathBuf,
    /// Boundary width in pixels (Chebyshev distance)
    #[arg(long, default_value_t = 1)]
    epsilon: usize,
    /// Boundary ids: class or zero_one
    #[arg(long, default_value = "class")]
    mode: String,
    /// Number of segmentation classes K
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Downsample labels by this factor before extraction
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1024)]
    height: usize,
    #[arg(long, default_value_t = 2048)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Also list every layer
    #[arg(long)]
    layers: bool,
    /// Write the full report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Benchmark this checkpoint instead of a freshly initialized model
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    height: usize,
    #[arg(long, default_value_t = 2048)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Timed forwards
    #[arg(long, default_value_t = DEFAULT_BENCH_RUNS)]
    runs: usize,
    /// Untimed forwards before timing
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Keep batch norms unfolded
    #[arg(long)]
    no_fold: bool,
    /// Write the latency report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// pooling-count, kernel-mode, boundary-width, branch-fusion, boundary-mode or modules
    sweep: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated sweep values; defaults to the full axis
    #[arg(long)]
    values: Option<String>,
    /// Comma-separated seeds
    #[arg(long, default_value = "1")]
    seeds: String,
    /// Dataset root
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Comparison CSV
    #[arg(long, default_value = "ablation.csv")]
    out: PathBuf,
    /// Overrides train.max_steps
    #[arg(long)]
    max_steps: Option<usize>,
    /// Overrides train.epochs
    #[arg(long)]
    epochs: Option<usize>,
}

/// Worker threads for sample loading, from MSF_THREADS (default 1).
fn loader_threads() -> Result<usize> {
    match std::env::var("MSF_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("MSF_THREADS must be a positive integer, got `{v}`"),
        },
        Err(_) => Ok(1),
    }
}

/// Loads every sample of `index`, preserving manifest order.
fn load_samples(index: &DatasetIndex) -> Result<Vec<Sample>> {
    let threads = loader_threads()?.min(index.len().max(1));
    if threads == 1 {
        return Ok(index.load_all()?);
    }
    let chunk = index.len().div_ceil(threads);
    let parts: Vec<msfnet::Result<Vec<Sample>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..index.len())
            .step_by(chunk)
            .map(|start| {
                s.spawn(move || {
                    (start..(start + chunk).min(index.len()))
                        .map(|i| index.sample(i))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(index.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let index = load_dataset(root, split)?;
    load_samples(&index)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        num_samples: a.samples,
        val_samples: a.val_samples,
        height: a.size,
        width: a.size,
        num_classes: a.classes,
        shapes_min: a.shapes_min,
        shapes_max: a.shapes_max,
        noise_std: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    gen_synthetic(&cfg, &a.out)?;
    println!(
        "wrote {} train and {} val samples to {}",
        a.samples,
        a.val_samples,
        a.out.display()
    );
    Ok(())
}

/// Crop defaults to the dataset's image size unless `train.crop` was given.
fn default_crop(rc: &mut RunConfig, samples: &[Sample]) {
    if !rc.crop_set {
        if let Some(s) = samples.first() {
            rc.train.augment.crop_h = s.labels.height();
            rc.train.augment.crop_w = s.labels.width();
        }
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut rc = a.config.resolve()?;
    if let Some(v) = a.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = a.max_steps {
        rc.train.max_steps = Some(v);
    }
    if let Some(v) = a.seed {
        rc.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        rc.train.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        rc.train.lr_max = v;
    }
    let samples = load_split(&a.data, Split::Train)?;
    default_crop(&mut rc, &samples);
    rc.validate()?;
    if samples[0].image.shape()[0] != rc.model.encoder.input_channels {
        bail!(
            "dataset images have {} channels but model.input_channels is {}",
            samples[0].image.shape()[0],
            rc.model.encoder.input_channels
        );
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let config_path = a.out.join("config.txt");
    fs::write(&config_path, kv::render(&rc.to_kv())).with_context(|| format!("writing {}", config_path.display()))?;

    let mut model = build_model::<f32>(&rc.model, rc.train.seed)?;
    let report = fit(&mut model, &samples, &rc.train, &rc.loss, Some(&a.out))?;
    let last = report.log.last().context("training ran zero steps")?;
    println!(
        "trained {} steps: seg_loss {:.6}, total {:.6}; checkpoint in {}",
        report.log.len(),
        last.seg_loss,
        last.total,
        a.out.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let split: Split = a.split.parse()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let samples = load_split(&a.data, split)?;
    let cm = evaluate_model(&ck.model, &samples, &ck.channel_means, IGNORE)?;
    let (per_class, m) = miou(&cm)?;
    let (h, w) = (samples[0].labels.height(), samples[0].labels.width());
    let cost = count_flops(ck.model.config(), 1, h, w)?;
    println!("mIoU: {m}");
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: {v}"),
            None => println!("class {c}: undefined"),
        }
    }
    if let Some(out) = &a.out {
        let report = MetricsReport {
            per_class_iou: per_class,
            miou: m,
            macs: cost.macs,
            flops: cost.flops,
            latency: None,
            config: ck.model.config().to_kv(),
        };
        emit_report(&report, format, out)?;
    }
    Ok(())
}

fn boundary(a: &BoundaryArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let mode: BoundaryMode = parse_boundary_mode(&a.mode)?.context("boundary mode `off` writes nothing")?;
    let cfg = BoundaryConfig::new(a.epsilon, mode, a.classes)?;
    let index = load_dataset(&a.data, split)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for s in load_samples(&index)? {
        let labels = downsample_labels(&s.labels, a.stride)?;
        let map = boundary_labels(&labels, &cfg);
        write_t4(a.out.join(format!("{}.t4", s.id)), &T4::from_grid(&map))?;
    }
    println!("wrote {} boundary maps to {}", index.len(), a.out.display());
    Ok(())
}

fn flops(a: &FlopsArgs) -> Result<()> {
    let rc = a.config.resolve()?;
    let report = count_flops(&rc.model, a.batch, a.height, a.width)?;
    if a.layers {
        for l in &report.layers {
            println!("{} macs={} other_ops={}", l.name, l.macs, l.other_ops);
        }
    }
    println!("macs: {}", report.macs);
    println!("flops: {}", report.flops);
    println!("other_ops: {}", report.other_ops);
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report)?;
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let mut model = match &a.checkpoint {
        Some(path) => load_checkpoint(path)?.model,
        None => build_model::<f32>(&a.config.resolve()?.model, 0)?,
    };
    if !a.no_fold {
        model.fold_batch_norms()?;
    }
    let c = model.config().encoder.input_channels;
    let stats = bench_latency(&model, [a.batch, c, a.height, a.width], a.runs, a.warmup)?;
    println!("runs: {}", stats.runs);
    println!("mean_ms: {}", stats.mean_ms);
    println!("median_ms: {}", stats.median_ms);
    println!("p95_ms: {}", stats.p95_ms);
    println!("fps: {}", stats.fps);
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&stats)?).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let sweep: Sweep = a.sweep.parse()?;
    let mut rc = a.config.resolve()?;
    if let Some(v) = a.max_steps {
        rc.train.max_steps = Some(v);
    }
    if let Some(v) = a.epochs {
        rc.train.epochs = v;
    }
    let values: Vec<String> = match &a.values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => sweep.default_values(),
    };
    let seeds: Vec<u64> = kv::list("--seeds", &a.seeds)?;
    let train = load_split(&a.data, Split::Train)?;
    let val = load_split(&a.data, Split::Val)?;
    default_crop(&mut rc, &train);
    rc.validate()?;
    let plan = AblationPlan {
        base_model: rc.model,
        base_loss: rc.loss,
        train: rc.train,
        seeds,
    };
    let rows = run_ablation(sweep, &values, &plan, &train, &val)?;
    fs::write(&a.out, rows_to_csv(&rows)).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Boundary(a) => boundary(a),
        Command::Flops(a) => flops(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
