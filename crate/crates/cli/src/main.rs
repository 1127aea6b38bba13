//! `scanet` command-line tool: train, pretrain, eval, infer, curves, bench.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use image::imageops::{self, FilterType};
use serde::Deserialize;

use scanet::bench::{self, BenchPrecision};
use scanet::data::{self, Sample};
use scanet::model::{Scanet, ScanetConfig};
use scanet::nn::{ParamStore, Session};
use scanet::objective::{self, DEFAULT_CURVE_POINTS};
use scanet::train::{self, Checkpoint, PretrainConfig, TrainConfig, TrainData};

/// Failures that map to exit code 2 (inputs that do not exist).
#[derive(Debug)]
struct MissingInput(String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingInput {}

#[derive(Parser)]
#[command(name = "scanet", version, about = "Lightweight sky/cloud segmentation")]
struct Cli {
    /// Intra-op worker threads (defaults to all cores).
    #[arg(long, env = "SCANET_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write history, checkpoints and a metrics table.
    Train(TrainArgs),
    /// Pre-train the backbone on cloud/sky patches.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint and write a metrics table.
    Eval(EvalArgs),
    /// Segment one image.
    Infer(InferArgs),
    /// Write PR and F-measure curves.
    Curves(CurvesArgs),
    /// Measure single-image latency.
    Bench(BenchArgs),
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset root with images/ and GTmaps/.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use N generated samples instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Square input size (multiple of 16).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Disable random flips.
    #[arg(long)]
    no_augment: bool,
    /// Initial weights; tensors are matched by name.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, default_value = "runs/pretrain")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which part of the split to score.
    #[arg(long, value_parser = ["test", "train", "all"], default_value = "test")]
    split: String,
    #[arg(long, default_value = "runs/eval")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    /// Also write s_1..s_4 and m_2..m_4 as grayscale images.
    #[arg(long)]
    dump_stages: bool,
    #[arg(long, default_value = "runs/infer")]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CURVE_POINTS)]
    points: usize,
    #[arg(long, default_value = "runs/curves")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "random_weights")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    random_weights: bool,
    #[arg(long, default_value = "lite")]
    variant: String,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value = "fp32")]
    precision: BenchPrecision,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    /// Directory for bench.csv and bench.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// JSON run config. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    variant: Option<String>,
    /// Full model config; takes precedence over `variant`.
    model: Option<ScanetConfig>,
    size: Option<usize>,
    night_marker: Option<String>,
    train: TrainConfig,
    pretrain: PretrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| MissingInput(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn model_config(run: &RunConfig, variant: Option<&str>, size: Option<usize>) -> Result<ScanetConfig> {
    let mut cfg = match (variant, &run.model, &run.variant) {
        (Some(v), _, _) => ScanetConfig::by_name(v)?,
        (None, Some(m), _) => m.clone(),
        (None, None, Some(v)) => ScanetConfig::by_name(v)?,
        (None, None, None) => ScanetConfig::lite(),
    };
    if let Some(s) = size.or(run.size) {
        cfg.input_size = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads or generates samples and splits them 9:1.
fn load_split(args: &DataArgs, size: usize, seed: u64, night_marker: &str) -> Result<TrainData> {
    match (&args.data, args.synthetic) {
        (Some(root), _) => {
            if !root.is_dir() {
                return Err(MissingInput(format!("dataset root {} does not exist", root.display())).into());
            }
            let index = data::load_dataset_with_marker(root, seed, night_marker)?;
            eprintln!("dataset {}: {} train / {} test (split seed {seed})", root.display(), index.train.len(), index.test.len());
            Ok(TrainData {
                train: data::prepare_all(&index.train, size, false, seed)?,
                test: data::prepare_all(&index.test, size, false, seed)?,
            })
        }
        (None, Some(n)) => {
            let split = data::split(data::synth_generate(n, size, seed)?, seed);
            Ok(TrainData { train: split.train, test: split.test })
        }
        (None, None) => bail!("pass --data <dir> or --synthetic <n>"),
    }
}

fn load_model(path: &Path) -> Result<(Scanet, ParamStore)> {
    if !path.is_file() {
        return Err(MissingInput(format!("checkpoint {} does not exist", path.display())).into());
    }
    let ck = train::load_checkpoint(path)?;
    Ok(train::model_from_checkpoint(&ck)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let run = read_config(a.config.as_deref())?;
    let model_cfg = model_config(&run, a.variant.as_deref(), a.data.size)?;
    let mut cfg = run.train.clone();
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.eval_every = a.eval_every.unwrap_or(cfg.eval_every);
    cfg.seed = a.data.seed.unwrap_or(cfg.seed);
    cfg.augment &= !a.no_augment;
    cfg.validate()?;

    let marker = run.night_marker.as_deref().unwrap_or(data::DEFAULT_NIGHT_MARKER);
    let split = load_split(&a.data, model_cfg.input_size, cfg.seed, marker)?;
    let (model, mut store) = Scanet::build(model_cfg, cfg.seed)?;
    if let Some(init) = &a.init {
        if !init.is_file() {
            return Err(MissingInput(format!("checkpoint {} does not exist", init.display())).into());
        }
        let copied = train::load_checkpoint(init)?.load_into(&mut store, false)?;
        if copied == 0 {
            bail!("{} shares no tensors with this model", init.display());
        }
        eprintln!("initialised {copied} tensors from {}", init.display());
    }
    eprintln!(
        "training {} ({} params) on {} samples, {} epochs",
        model.config.variant,
        store.param_count(),
        split.train.len(),
        cfg.epochs
    );
    let history = train::train(&model, &mut store, &split, &cfg, Some(&a.out), |r| {
        let eval = r.eval.map(|e| format!(" acc {:.4} miou {:.4}", e.accuracy, e.miou)).unwrap_or_default();
        eprintln!("epoch {:>3} loss {:.5} lr {:.3e}{eval}", r.epoch, r.loss, r.lr);
    })?;
    let eval_set = if split.test.is_empty() { &split.train } else { &split.test };
    let rows = report::subset_metrics(eval_set, |s| predict_one(&model, &mut store, s))?;
    report::write_metrics_table(&a.out.join("metrics.csv"), &rows)?;
    report::print_table(&rows);
    if let Some(best) = history.best_epoch {
        eprintln!("best MIoU at epoch {best}; artifacts in {}", a.out.display());
    }
    Ok(())
}

fn predict_one(model: &Scanet, store: &mut ParamStore, s: &Sample) -> scanet::Result<scanet::tensor::Tensor> {
    train::predict(model, store, &s.image, scanet::tensor::Precision::F32)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let run = read_config(a.config.as_deref())?;
    let model_cfg = model_config(&run, a.variant.as_deref(), a.data.size)?;
    let mut cfg = run.pretrain.clone();
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.seed = a.data.seed.unwrap_or(cfg.seed);
    let marker = run.night_marker.as_deref().unwrap_or(data::DEFAULT_NIGHT_MARKER);
    let split = load_split(&a.data, model_cfg.input_size, cfg.seed, marker)?;

    let mut patches = Vec::new();
    for s in &split.train {
        patches.extend(data::swpt_extract(&s.image, &s.mask)?);
    }
    let total = split.train.len() * data::PATCH_GRID * data::PATCH_GRID;
    let pos = patches.iter().filter(|p| p.label == data::PatchLabel::Positive).count();
    println!("patches: positive {pos}, negative {}, ignored {}", patches.len() - pos, total - patches.len());

    let (model, mut store) = Scanet::build(model_cfg, cfg.seed)?;
    let rep = train::pretrain_swpt(&model, &mut store, &patches, &cfg)?;
    println!("pretrain: final loss {:.5}, patch accuracy {:.4}", rep.losses.last().copied().unwrap_or(f64::NAN), rep.accuracy);
    let path = a.out.join("backbone.sckp");
    let ck = Checkpoint::from_store(&store.subset("backbone."), Some(&model.config), cfg.epochs, None);
    train::save_checkpoint(&path, &ck)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval_samples(split: TrainData, which: &str) -> Vec<Sample> {
    match which {
        "train" => split.train,
        "all" => split.train.into_iter().chain(split.test).collect(),
        _ => split.test,
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    let size = a.data.size.unwrap_or(model.config.input_size);
    let split = load_split(&a.data, size, a.data.seed.unwrap_or(0), data::DEFAULT_NIGHT_MARKER)?;
    let samples = eval_samples(split, &a.split);
    if samples.is_empty() {
        bail!("the {} split is empty", a.split);
    }
    let rows = report::subset_metrics(&samples, |s| predict_one(&model, &mut store, s))?;
    std::fs::create_dir_all(&a.out)?;
    report::write_metrics_table(&a.out.join("metrics.csv"), &rows)?;
    let (m, c) = &rows[0].1;
    objective::write_metrics_json(&a.out.join("metrics.json"), m, c)?;
    report::print_table(&rows);
    Ok(())
}

fn gray(t: &scanet::tensor::Tensor) -> Result<image::GrayImage> {
    Ok(data::tensor_to_gray(t)?)
}

/// Mean over channels, for dumping multi-channel masks.
fn channel_mean(t: &scanet::tensor::Tensor) -> scanet::tensor::Tensor {
    let s = t.shape();
    let plane = s.h * s.w;
    scanet::tensor::Tensor::from_fn(scanet::tensor::Shape::new(1, 1, s.h, s.w), |p| {
        (0..s.c).map(|c| t.data()[c * plane + p]).sum::<f32>() / s.c as f32
    })
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    if !a.image.is_file() {
        return Err(MissingInput(format!("image {} does not exist", a.image.display())).into());
    }
    let img = image::open(&a.image).with_context(|| format!("cannot decode {}", a.image.display()))?.to_rgb8();
    let size = a.size.unwrap_or(model.config.input_size);
    let resized = imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    let input = data::image_to_tensor(&resized);

    let mut s = Session::new(&mut store, false);
    let x = s.input(input);
    let out = model.forward(&mut s, x)?;
    let final_map = s.value(out.s[3]);
    let binary = final_map.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
    let mask = imageops::resize(&gray(&binary)?, img.width(), img.height(), FilterType::Nearest);

    std::fs::create_dir_all(&a.out)?;
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = a.out.join(format!("{stem}_mask.png"));
    mask.save(&mask_path)?;
    println!("wrote {}", mask_path.display());
    if a.dump_stages {
        for (i, &v) in out.s.iter().enumerate() {
            let p = a.out.join(format!("{stem}_s{}.png", i + 1));
            gray(s.value(v))?.save(&p)?;
            println!("wrote {}", p.display());
        }
        for (i, &v) in out.m.iter().enumerate() {
            let p = a.out.join(format!("{stem}_m{}.png", i + 2));
            gray(&channel_mean(s.value(v)))?.save(&p)?;
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn cmd_curves(a: CurvesArgs) -> Result<()> {
    let (model, mut store) = load_model(&a.checkpoint)?;
    let size = a.data.size.unwrap_or(model.config.input_size);
    let split = load_split(&a.data, size, a.data.seed.unwrap_or(0), data::DEFAULT_NIGHT_MARKER)?;
    if split.test.is_empty() {
        bail!("test split is empty; curves need at least one test sample");
    }
    std::fs::create_dir_all(&a.out)?;
    let mut preds = Vec::with_capacity(split.test.len());
    for s in &split.test {
        preds.push(predict_one(&model, &mut store, s)?);
    }
    for (name, members) in report::subsets(&split.test) {
        let p: Vec<_> = members.iter().map(|&i| preds[i].clone()).collect();
        let g: Vec<_> = members.iter().map(|&i| split.test[i].mask.clone()).collect();
        objective::write_pr_csv(&a.out.join(format!("pr_{name}.csv")), &objective::pr_curve(&p, &g, a.points)?)?;
        objective::write_f_csv(&a.out.join(format!("f_{name}.csv")), &objective::f_measure_curve(&p, &g, a.points)?)?;
        println!("wrote pr_{name}.csv and f_{name}.csv ({} images)", members.len());
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let (model, store) = match &a.checkpoint {
        Some(path) => {
            let (m, s) = load_model(path)?;
            match a.size {
                Some(size) => (Scanet::new(m.config.clone().with_input_size(size))?, s),
                None => (m, s),
            }
        }
        None => {
            if !a.random_weights {
                eprintln!("no checkpoint given; using random weights");
            }
            let mut cfg = ScanetConfig::by_name(&a.variant)?;
            if let Some(size) = a.size {
                cfg.input_size = size;
            }
            Scanet::build(cfg, 0)?
        }
    };
    model.config.validate()?;
    let r = bench::run_bench(&model, &store, a.precision, a.iters, a.warmup)?;
    println!("{}", bench::BenchReport::csv_header());
    println!("{}", r.csv_row());
    println!("flop convention: {}", r.flop_convention);
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("bench.csv"), format!("{}\n{}\n", bench::BenchReport::csv_header(), r.csv_row()))?;
        std::fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("cannot size thread pool: {e}"))?;
    }
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Curves(a) => cmd_curves(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
