use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use lapx::analysis::{bench_latency, count_flops, BenchError};
use lapx::annotations::{AnnotationError, AnnotationSet};
use lapx::metrics::{ap_over_oks, pckh, MetricError, OksConstants};
use lapx::model::{write_atomic, ConfigError, Model, ModelConfig, TensorFile, WeightsError};
use lapx::train::{
    evaluate, synth_dataset, synth_flip_pairs, synth_joint_groups, EvalOptions, LrSchedule, TrainConfig, TrainError,
    Trainer,
};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}

usage_from!(
    ConfigError,
    WeightsError,
    AnnotationError,
    MetricError,
    BenchError,
    std::io::Error,
    lapx::model::ModelError
);

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "lapx", version, about = "Lightweight attention hourglass pose networks")]
struct Cli {
    /// Seed for initialization, data generation and shuffling.
    #[arg(long, global = true, env = "LAPX_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write the report as JSON to this path.
    #[arg(long, global = true)]
    json_out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model config JSON file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset, e.g. lapx-3s208. Without --config or --preset the toy config is used.
    #[arg(long)]
    preset: Option<String>,
    /// Override the number of stages.
    #[arg(long)]
    stages: Option<usize>,
    /// Override the channel width.
    #[arg(long)]
    channels: Option<usize>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
                ModelConfig::from_json(&text)?
            }
            (None, Some(name)) => ModelConfig::preset(name)?,
            (None, None) => ModelConfig::toy(3, 32),
        };
        if let Some(s) = self.stages {
            cfg.num_stages = s;
            cfg.nonlocal_stages.retain(|&i| i <= s);
        }
        if let Some(c) = self.channels {
            cfg.channels = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Number of synthetic samples.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    /// Seed of the synthetic dataset; defaults to --seed.
    #[arg(long)]
    data_seed: Option<u64>,
}

fn parse_hw(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok([p(h)?, p(w)?])
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameter and MAC table.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
        /// Input size HxW; defaults to the configured size.
        #[arg(long, value_parser = parse_hw)]
        input: Option<[usize; 2]>,
    },
    /// Train on synthetic stick figures.
    TrainToy {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
        train_samples: u64,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        val_samples: u64,
        #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
        epochs: u64,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        batch_size: u64,
        /// Base learning rate.
        #[arg(long)]
        lr: Option<f64>,
        /// Output directory for the checkpoint, log and config.
        #[arg(long)]
        out: PathBuf,
    },
    /// PCKh of a checkpoint on synthetic data.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        flip_test: bool,
        #[arg(long)]
        heatmap_shift: bool,
        #[arg(long)]
        quarter_offset: bool,
    },
    /// Forward-pass latency.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        /// Weights to load; random initialization otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_hw)]
        input: Option<[usize; 2]>,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        iters: u64,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        threads: u64,
    },
    /// Write freshly initialized weights.
    Export {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCKh and OKS AP of prediction files against ground truth.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// PCKh threshold as a fraction of the head segment.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn echo_config(cfg: &ModelConfig) {
    println!(
        "config {} {}",
        cfg.hash(),
        serde_json::to_string(cfg).expect("config serializes")
    );
}

fn write_json(path: &Option<PathBuf>, value: &serde_json::Value) -> Result<()> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(value).expect("json serializes");
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn load_model(cfg: &ModelConfig, seed: u64, checkpoint: Option<&Path>) -> Result<Model> {
    let mut m = Model::build(cfg, seed)?;
    if let Some(path) = checkpoint {
        m.load_tensor_file(&TensorFile::read(path)?)
            .map_err(|e| CliError::Usage(format!("checkpoint does not match config: {e}")))?;
    }
    Ok(m)
}

fn summary(cli: &Cli, model: &ModelArgs, input: Option<[usize; 2]>) -> Result<()> {
    let cfg = model.resolve()?;
    echo_config(&cfg);
    let m = Model::build(&cfg, cli.seed)?;
    let [h, w] = input.unwrap_or(cfg.input_hw);
    let report = count_flops(&m, [1, 3, h, w])?;
    print!("{}", report.to_text());
    write_json(&cli.json_out, &json!({"config": cfg, "report": report}))
}

#[allow(clippy::too_many_arguments)]
fn train_toy(
    cli: &Cli,
    model: &ModelArgs,
    train_n: u64,
    val_n: u64,
    epochs: u64,
    batch: u64,
    lr: Option<f64>,
    out: &Path,
) -> Result<()> {
    let cfg = model.resolve()?;
    echo_config(&cfg);
    if cfg.num_keypoints < 4 || cfg.num_keypoints > lapx::train::MAX_KEYPOINTS {
        return Err(CliError::Usage("synthetic data needs 4..=16 keypoints".into()));
    }
    std::fs::create_dir_all(out)?;
    let hw = cfg.input_hw;
    let k = cfg.num_keypoints;
    let train = synth_dataset(train_n as usize, hw, k, cli.seed.wrapping_add(1));
    let val = synth_dataset(val_n as usize, hw, k, cli.seed.wrapping_add(2));
    let mut tc = TrainConfig::toy(epochs as usize, cli.seed);
    tc.batch_size = batch as usize;
    if let Some(lr) = lr {
        tc.lr =
            LrSchedule::new(lr, tc.lr.milestones.clone(), tc.lr.factor).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut trainer = Trainer::new(&cfg, tc, synth_flip_pairs(k))?;
    let mut log = String::new();
    for _ in 0..epochs {
        let r = trainer.run_epoch(&train, &val)?;
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.5}  val PCKh {:.2}",
            r.epoch, r.lr, r.total_loss, r.val_pckh
        );
        log.push_str(&r.to_json_line());
        log.push('\n');
    }
    let best = trainer
        .log
        .iter()
        .max_by(|a, b| a.val_pckh.total_cmp(&b.val_pckh).then(b.epoch.cmp(&a.epoch)))
        .expect("at least one epoch");
    write_atomic(&out.join("config.json"), cfg.to_json().as_bytes())?;
    write_atomic(&out.join("train_log.jsonl"), log.as_bytes())?;
    trainer.checkpoint().write(&out.join("checkpoint.lapx"))?;
    println!("best val PCKh {:.2} at epoch {}", best.val_pckh, best.epoch);
    write_json(
        &cli.json_out,
        &json!({"config": cfg, "best_val_pckh": best.val_pckh, "best_epoch": best.epoch, "log": trainer.log}),
    )
}

fn eval(cli: &Cli, model: &ModelArgs, checkpoint: &Path, data: &DataArgs, opts: EvalOptions) -> Result<()> {
    let cfg = model.resolve()?;
    echo_config(&cfg);
    let m = load_model(&cfg, cli.seed, Some(checkpoint))?;
    let k = cfg.num_keypoints;
    if !(4..=lapx::train::MAX_KEYPOINTS).contains(&k) {
        return Err(CliError::Usage("synthetic data needs 4..=16 keypoints".into()));
    }
    let samples = synth_dataset(
        data.samples as usize,
        cfg.input_hw,
        k,
        data.data_seed.unwrap_or(cli.seed),
    );
    let report = evaluate(&m, &samples, &synth_flip_pairs(k), opts)?;
    println!(
        "flip_test={} heatmap_shift={} quarter_offset={}",
        opts.flip_test, opts.heatmap_shift, opts.quarter_offset
    );
    let mut groups = Vec::new();
    for (name, joints) in synth_joint_groups(k) {
        let v = report.pckh.group(&joints);
        match v {
            Some(v) => println!("{name:<10} {v:>7.2}"),
            None => println!("{name:<10} {:>7}", "n/a"),
        }
        groups.push(json!({"group": name, "pckh": v}));
    }
    println!("{:<10} {:>7.2}", "total", report.pckh.total);
    write_json(
        &cli.json_out,
        &json!({"config": cfg, "options": opts, "groups": groups, "pckh": report.pckh}),
    )
}

#[allow(clippy::too_many_arguments)]
fn bench(
    cli: &Cli,
    model: &ModelArgs,
    checkpoint: Option<&Path>,
    input: Option<[usize; 2]>,
    warmup: usize,
    iters: u64,
    threads: u64,
) -> Result<()> {
    let cfg = model.resolve()?;
    echo_config(&cfg);
    let m = load_model(&cfg, cli.seed, checkpoint)?;
    let [h, w] = input.unwrap_or(cfg.input_hw);
    let report = bench_latency(&m, [1, 3, h, w], warmup, iters as usize, threads as usize)?;
    print!("{}", report.to_text());
    write_json(&cli.json_out, &json!({"config": cfg, "report": report}))
}

fn export(cli: &Cli, model: &ModelArgs, out: &Path) -> Result<()> {
    let cfg = model.resolve()?;
    echo_config(&cfg);
    let m = Model::build(&cfg, cli.seed)?;
    m.save_weights(out)?;
    println!("wrote {} tensors to {}", m.params.len(), out.display());
    write_json(&cli.json_out, &json!({"config": cfg, "tensors": m.params.len()}))
}

fn score(cli: &Cli, pred: &Path, gt: &Path, threshold: f64) -> Result<()> {
    let preds = AnnotationSet::read(pred)?;
    let gts = AnnotationSet::read(gt)?;
    let (mut p_flat, mut g_flat) = (Vec::new(), Vec::new());
    for (image, g) in &gts.0 {
        let p = preds.0.get(image).map_or(&[][..], |v| v.as_slice());
        if p.len() != g.len() {
            return Err(CliError::Usage(format!(
                "{image}: {} predictions for {} annotations",
                p.len(),
                g.len()
            )));
        }
        p_flat.extend(p.iter().cloned());
        g_flat.extend(g.iter().cloned());
    }
    let k = g_flat.first().map_or(0, |a| a.num_joints());
    let pck = pckh(&p_flat, &g_flat, threshold)?;
    println!("PCKh@{threshold} {:.2}", pck.total);
    let ap = if g_flat.iter().all(|a| a.num_joints() == k) && k > 0 {
        let r = ap_over_oks(&preds, &gts, &OksConstants::for_keypoints(k))?;
        println!("AP {:.4}  AR {:.4}", r.ap, r.ar);
        Some(r)
    } else {
        None
    };
    write_json(&cli.json_out, &json!({"pckh": pck, "ap": ap}))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Summary { model, input } => summary(cli, model, *input),
        Command::TrainToy {
            model,
            train_samples,
            val_samples,
            epochs,
            batch_size,
            lr,
            out,
        } => train_toy(cli, model, *train_samples, *val_samples, *epochs, *batch_size, *lr, out),
        Command::Eval {
            model,
            checkpoint,
            data,
            flip_test,
            heatmap_shift,
            quarter_offset,
        } => eval(
            cli,
            model,
            checkpoint,
            data,
            EvalOptions {
                flip_test: *flip_test,
                heatmap_shift: *heatmap_shift,
                quarter_offset: *quarter_offset,
            },
        ),
        Command::Bench {
            model,
            checkpoint,
            input,
            warmup,
            iters,
            threads,
        } => bench(cli, model, checkpoint.as_deref(), *input, *warmup, *iters, *threads),
        Command::Export { model, out } => export(cli, model, out),
        Command::Score { pred, gt, threshold } => score(cli, pred, gt, *threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
