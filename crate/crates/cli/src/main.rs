//! `rankcut` — train, compress, evaluate and inspect CNN classifiers.
//!
//! Exit codes: 0 success, 3 success with the accuracy constraint missed,
//! 1 usage or configuration error, 2 runtime fault.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use config::{parse_config, CliConfig, ConfigError, DatasetSpec};
use rankcut::checkpoint;
use rankcut::conductor::{run_pipeline, PipelineData};
use rankcut::data::{load_idx, znorm_stats, Dataset};
use rankcut::metrics::{count_macs, layer_macs, memory_footprint, BYTES_PER_PARAM};
use rankcut::nn::{evaluate_top1, reference_cnn, train, TrainConfig};
use rankcut::report::Report;
use rankcut::Model;

/// Fraction of the training data held out for validation.
const VAL_FRACTION: f64 = 0.1;
/// Fixed so that `train` and `optimize` hold out the same samples.
const SPLIT_SEED: u64 = 0x5EED_5711;

#[derive(Parser)]
#[command(name = "rankcut", version, about = "Delta-constrained low-rank compression of CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference CNN and write a baseline checkpoint.
    Train(Common),
    /// Compress a checkpoint within the accuracy tolerance.
    Optimize(Common),
    /// Top-1 accuracy of a checkpoint.
    Eval(Common),
    /// Per-layer shapes, parameters and MACs of a checkpoint.
    Inspect(Common),
    /// Re-render a stored optimization report.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    report: Option<String>,
    /// Tolerable accuracy drop in percentage points.
    #[arg(long)]
    delta: Option<String>,
    /// 1 = exploration only, 2 = exploration + annealing.
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    /// Only `cpu:<workers>` is supported.
    #[arg(long)]
    device: Option<String>,
    /// IDX image files: training set, then optionally the test set.
    #[arg(long, num_args = 1..=2, value_names = ["TRAIN", "TEST"])]
    idx_images: Vec<String>,
    /// IDX label files matching --idx-images.
    #[arg(long, num_args = 1..=2, value_names = ["TRAIN", "TEST"])]
    idx_labels: Vec<String>,
    /// Synthetic shapes dataset.
    #[arg(long, value_name = "N,CLASSES,HW,SEED")]
    synth: Option<String>,
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] rankcut::Error),
    #[error("{0}: {1}")]
    RuntimeAt(String, rankcut::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 1,
            Failure::Runtime(_) | Failure::RuntimeAt(..) => 2,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Train(c) => cmd_train(&load_config(&c)?),
        Command::Optimize(c) => cmd_optimize(&load_config(&c)?),
        Command::Eval(c) => cmd_eval(&load_config(&c)?),
        Command::Inspect(c) => cmd_inspect(&load_config(&c)?),
        Command::Report(c) => cmd_report(&load_config(&c)?),
    }
}

fn load_config(c: &Common) -> Result<CliConfig, Failure> {
    let text = match &c.config {
        Some(p) => Some(
            fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = Vec::new();
    for (key, value) in [
        ("model", &c.model),
        ("out", &c.out),
        ("report", &c.report),
        ("delta", &c.delta),
        ("stage", &c.stage),
        ("seed", &c.seed),
        ("workers", &c.workers),
        ("device", &c.device),
        ("synth", &c.synth),
    ] {
        if let Some(v) = value {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    if c.idx_images.len() != c.idx_labels.len() {
        return Err(Failure::Usage(
            "--idx-images and --idx-labels need the same number of files".into(),
        ));
    }
    for (i, (images, labels)) in c.idx_images.iter().zip(&c.idx_labels).enumerate() {
        let split = if i == 0 { "train" } else { "test" };
        overrides.push((format!("idx_{split}_images"), images.clone()));
        overrides.push((format!("idx_{split}_labels"), labels.clone()));
    }
    let cfg = parse_config(text.as_deref(), &overrides)?;
    for line in cfg.echo().lines() {
        log::debug!("config: {line}");
    }
    Ok(cfg)
}

struct Data {
    train: Dataset,
    val: Dataset,
    test: Option<Dataset>,
    descriptor: String,
}

fn load_data(cfg: &CliConfig) -> Result<Data, Failure> {
    let spec = cfg.dataset()?.ok_or_else(|| {
        Failure::Usage("no dataset given; pass --synth or --idx-images/--idx-labels".into())
    })?;
    let (full, test, descriptor) = match &spec {
        DatasetSpec::Synth(s) => {
            let (train, test) = s.train_test()?;
            let d = format!(
                "synthetic shapes n_per_class={} classes={} hw={} seed={}",
                s.n_per_class, s.num_classes, s.hw, s.seed
            );
            (train, Some(test), d)
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test,
        } => {
            let load = |i: &PathBuf, l: &PathBuf| {
                load_idx(i, l).map_err(|e| Failure::RuntimeAt(format!("{} / {}", i.display(), l.display()), e))
            };
            let train = load(train_images, train_labels)?;
            let test = match test {
                Some((i, l)) => Some(load(i, l)?),
                None => None,
            };
            let d = format!(
                "idx train={} test={}",
                train_images.display(),
                test.as_ref().map_or("none".to_string(), |t| format!("{} samples", t.len()))
            );
            (train, test, d)
        }
    };
    let (train, val) = full.stratified_split(VAL_FRACTION, SPLIT_SEED)?;
    info!(
        "data: {} train, {} validation, {} test",
        train.len(),
        val.len(),
        test.as_ref().map_or(0, Dataset::len)
    );
    Ok(Data {
        train,
        val,
        test,
        descriptor,
    })
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    checkpoint::load(path).map_err(|e| Failure::RuntimeAt(path.display().to_string(), e))
}

fn check_compatible(model: &Model, data: &Data) -> Result<(), Failure> {
    if data.train.sample_shape() != model.input_shape || data.train.num_classes > model.num_classes {
        return Err(Failure::Usage(format!(
            "dataset ({:?}, {} classes) does not fit the model ({:?}, {} classes)",
            data.train.sample_shape(),
            data.train.num_classes,
            model.input_shape,
            model.num_classes
        )));
    }
    Ok(())
}

fn cmd_train(cfg: &CliConfig) -> Result<u8, Failure> {
    let out = cfg.require("out")?;
    let data = load_data(cfg)?;
    let o = &cfg.opt;
    let model = reference_cnn(data.train.sample_shape(), data.train.num_classes, o.seed)?
        .with_input_norm(znorm_stats(&data.train)?)?;
    let tc = TrainConfig {
        epochs: cfg.train_epochs,
        batch_size: o.batch_size,
        lr: cfg.train_lr,
        momentum: o.momentum,
        weight_decay: o.weight_decay,
        seed: o.seed,
        workers: o.workers,
        shuffle: true,
        augment: o.augment.then(Default::default),
        frozen: Vec::new(),
    };
    let model = train(&model, &data.train, &tc)?.model;
    println!("validation accuracy: {:.2}%", evaluate_top1(&model, &data.val)?);
    if let Some(test) = &data.test {
        println!("test accuracy: {:.2}%", evaluate_top1(&model, test)?);
    }
    checkpoint::save(&model, &out).map_err(|e| Failure::RuntimeAt(out.display().to_string(), e))?;
    info!("wrote {}", out.display());
    Ok(0)
}

fn cmd_optimize(cfg: &CliConfig) -> Result<u8, Failure> {
    let model = load_model(&cfg.require("model")?)?;
    let out = cfg.require("out")?;
    let data = load_data(cfg)?;
    check_compatible(&model, &data)?;
    let input = PipelineData {
        train: &data.train,
        val: &data.val,
        test: data.test.as_ref(),
        descriptor: data.descriptor.clone(),
    };
    let outcome = run_pipeline(&model, &input, &cfg.opt)?;
    checkpoint::save(&outcome.model, &out).map_err(|e| Failure::RuntimeAt(out.display().to_string(), e))?;
    info!("wrote {}", out.display());
    if let Some(path) = &cfg.report {
        fs::write(path, outcome.report.to_json()?)
            .map_err(|e| Failure::RuntimeAt(path.display().to_string(), e.into()))?;
        info!("wrote {}", path.display());
    }
    print!("{}", outcome.report.table());
    if outcome.report.delta_not_met {
        eprintln!(
            "warning: accuracy drop exceeds delta {} (margin {:.2}); returning the best candidate found",
            cfg.opt.delta, outcome.report.margin
        );
        return Ok(3);
    }
    Ok(0)
}

fn cmd_eval(cfg: &CliConfig) -> Result<u8, Failure> {
    let model = load_model(&cfg.require("model")?)?;
    let data = load_data(cfg)?;
    check_compatible(&model, &data)?;
    println!("validation accuracy: {:.2}%", evaluate_top1(&model, &data.val)?);
    if let Some(test) = &data.test {
        println!("test accuracy: {:.2}%", evaluate_top1(&model, test)?);
    }
    Ok(0)
}

fn cmd_inspect(cfg: &CliConfig) -> Result<u8, Failure> {
    let model = load_model(&cfg.require("model")?)?;
    let shapes = model.infer_shapes()?;
    println!("{} — input {:?}, {} classes", model.name, model.input_shape, model.num_classes);
    println!("{:>3}  {:<18} {:<16} {:>10} {:>12}", "#", "layer", "output", "params", "MACs");
    let mut input = model.input_act();
    for (i, (layer, out)) in model.layers.iter().zip(&shapes).enumerate() {
        let kind = match layer {
            rankcut::LayerSpec::DecomposedConv2d(l) => format!("{} r={}", layer.kind(), l.rank),
            rankcut::LayerSpec::DecomposedDense(l) => format!("{} r={}", layer.kind(), l.rank),
            _ => layer.kind().to_string(),
        };
        println!(
            "{i:>3}  {kind:<18} {:<16} {:>10} {:>12}",
            out.to_string(),
            layer.param_count(),
            layer_macs(layer, &input)?
        );
        input = out.clone();
    }
    let params = model.count_params() as u64;
    println!("params: {params}");
    println!("size: {} bytes", BYTES_PER_PARAM * params);
    println!("MACs: {}", count_macs(&model)?);
    println!("memory footprint: {} bytes", memory_footprint(&model)?);
    Ok(0)
}

fn cmd_report(cfg: &CliConfig) -> Result<u8, Failure> {
    let path = cfg.require("report")?;
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::RuntimeAt(path.display().to_string(), e.into()))?;
    let report = Report::from_json(&text)?;
    println!("model: {}", report.model_name);
    println!("dataset: {}", report.dataset);
    println!("composed list: {}", report.composed_list.render());
    println!("ranks: {:?}", report.ranks);
    println!("delta: {} (margin {:.2})", report.config.delta, report.margin);
    print!("{}", report.table());
    Ok(if report.delta_not_met { 3 } else { 0 })
}
