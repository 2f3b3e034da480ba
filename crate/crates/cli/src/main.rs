//! `unetmer`: synthesize data, train, evaluate and rank by scale agreement.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unetmer::backbone::Variant;
use unetmer::dataset::Split;
use unetmer::patchify::Scale;
use unetmer::training::ScaleSchedule;
use unetmer::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "unetmer", version, about = "Multi-scale patch segmentation with confidence ranking")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ellipse dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and history.
    Train(TrainArgs),
    /// Score a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Rank images by scale agreement, least confident first.
    Rank(RankArgs),
    /// Train and score a grid of backbones, scale sets and bottlenecks.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Square image side, a multiple of 64.
    #[arg(long)]
    size: Option<usize>,
    /// Foreground contrast range as `LO,HI`.
    #[arg(long, value_parser = parse_pair_f64)]
    contrast: Option<(f64, f64)>,
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Flip the foreground sign at random per image.
    #[arg(long)]
    random_polarity: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// unet, attention_unet or unetpp.
    #[arg(long)]
    backbone: Option<Variant>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    n_pool: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Model input size as `HxW`.
    #[arg(long, value_parser = parse_size)]
    input_size: Option<(usize, usize)>,
    /// Drop the shared transformer bottleneck.
    #[arg(long)]
    no_transformer: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args)]
struct TrainFlags {
    /// Training scales, e.g. `1,2`; also the model's output scales.
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<Scale>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_halving_period: Option<usize>,
    /// round_robin or random.
    #[arg(long, value_parser = parse_schedule)]
    scale_schedule: Option<ScaleSchedule>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train or test.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: CheckpointArgs,
    /// Score every configured scale, not just scale 1.
    #[arg(long)]
    per_scale: bool,
}

#[derive(Args)]
struct RankArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: CheckpointArgs,
    /// Scale pair `i,j` ordering the ranking.
    #[arg(long, value_delimiter = ',')]
    pair: Option<Vec<Scale>>,
    /// Also score images with the ProtoSeg baseline.
    #[arg(long)]
    protoseg: bool,
    /// Rank as if no ground truth were available.
    #[arg(long)]
    ignore_ground_truth: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainFlags,
    /// Backbones to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    backbones: Option<Vec<Variant>>,
    /// Scale sets separated by `;`, e.g. `1;1,2;1,2,4`.
    #[arg(long)]
    scale_sets: Option<String>,
    /// Transformer bottleneck arms to train.
    #[arg(long, value_enum)]
    transformer: Option<Arms>,
    /// Runs trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    Ok((h.trim().parse().map_err(|_| "bad height")?, w.trim().parse().map_err(|_| "bad width")?))
}

fn parse_pair_f64(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    Ok((a.trim().parse().map_err(|_| "bad number")?, b.trim().parse().map_err(|_| "bad number")?))
}

#[derive(Clone, Copy, ValueEnum)]
enum Arms {
    On,
    Off,
    Both,
}

impl Arms {
    fn values(self) -> Vec<bool> {
        match self {
            Arms::On => vec![true],
            Arms::Off => vec![false],
            Arms::Both => vec![true, false],
        }
    }
}

fn parse_scale_sets(s: &str) -> unetmer::Result<Vec<Vec<Scale>>> {
    s.split(';').map(|set| set.split(',').map(str::parse).collect()).collect()
}

fn parse_schedule(s: &str) -> Result<ScaleSchedule, String> {
    match s {
        "round_robin" => Ok(ScaleSchedule::RoundRobin),
        "random" => Ok(ScaleSchedule::Random),
        _ => Err("expected round_robin or random".into()),
    }
}

fn base(common: &Common) -> unetmer::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_model(cfg: &mut RunConfig, a: &ModelArgs) {
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    let m = cfg.model_or_default();
    if let Some(v) = a.backbone {
        m.backbone.variant = v;
    }
    if let Some(v) = a.base_channels {
        m.backbone.base_channels = v;
    }
    if let Some(v) = a.n_pool {
        m.backbone.n_pool = v;
    }
    if let Some(v) = a.num_classes {
        m.backbone.num_classes = v;
    }
    if let Some(v) = a.input_size {
        m.input_size = v;
    }
    if a.no_transformer {
        m.use_transformer = false;
    }
    if let Some(v) = a.layers {
        m.transformer.num_layers = v;
    }
    if let Some(v) = a.heads {
        m.transformer.num_heads = v;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainFlags) {
    if let Some(s) = &a.scales {
        cfg.model_or_default().scales = s.clone();
        cfg.train.scales = s.clone();
    }
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr0 = v;
    }
    if let Some(v) = a.lr_halving_period {
        t.lr_halving_period = v;
    }
    if let Some(v) = a.scale_schedule {
        t.scale_schedule = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = Some(v);
    }
}

fn apply_source(cfg: &mut RunConfig, a: &CheckpointArgs) {
    if let Some(m) = &a.manifest {
        cfg.manifest = Some(m.clone());
    }
    if let Some(c) = &a.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(s) = a.split {
        cfg.split = Some(s);
    }
}

fn run(command: Command) -> unetmer::Result<()> {
    match command {
        Command::Synth(a) => {
            let mut cfg = base(&a.common)?;
            let s = &mut cfg.synth;
            if let Some(v) = a.seed {
                s.seed = v;
            }
            if let Some(v) = a.count {
                s.count = v;
            }
            if let Some(v) = a.size {
                s.spec.size = (v, v);
            }
            if let Some(v) = a.contrast {
                s.spec.contrast_range = v;
            }
            if let Some(v) = a.test_fraction {
                s.test_fraction = v;
            }
            if a.random_polarity {
                s.spec.random_polarity = true;
            }
            cfg.apply_seed_env()?;
            commands::synth(&cfg)
        }
        Command::Train(a) => {
            let mut cfg = base(&a.common)?;
            apply_model(&mut cfg, &a.model);
            apply_train(&mut cfg, &a.train);
            cfg.model_or_default();
            cfg.apply_seed_env()?;
            commands::train(&cfg).map(drop)
        }
        Command::Eval(a) => {
            let mut cfg = base(&a.common)?;
            apply_source(&mut cfg, &a.source);
            if a.per_scale {
                cfg.per_scale = true;
            }
            commands::eval(&cfg).map(drop)
        }
        Command::Rank(a) => {
            let mut cfg = base(&a.common)?;
            apply_source(&mut cfg, &a.source);
            if let Some(p) = a.pair {
                let &[i, j] = p.as_slice() else {
                    return Err(Error::Validation("--pair takes exactly two scales `i,j`".into()));
                };
                cfg.pair = Some((i, j));
            }
            if a.protoseg {
                cfg.protoseg = true;
            }
            if a.ignore_ground_truth {
                cfg.ignore_ground_truth = true;
            }
            commands::rank(&cfg).map(drop)
        }
        Command::Sweep(a) => {
            let mut cfg = base(&a.common)?;
            apply_model(&mut cfg, &a.model);
            apply_train(&mut cfg, &a.train);
            if let Some(v) = a.backbones {
                cfg.sweep.backbones = v;
            }
            if let Some(v) = a.scale_sets {
                cfg.sweep.scale_sets = parse_scale_sets(&v)?;
            }
            if let Some(v) = a.transformer {
                cfg.sweep.transformer = v.values();
            }
            if let Some(v) = a.jobs {
                cfg.sweep.jobs = v;
            }
            cfg.apply_seed_env()?;
            commands::sweep(&cfg)
        }
    }
}

/// 2 validation, 3 I/O, 4 divergence, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Validation(_) | Error::Parse { .. } => 2,
        Error::Io { .. } => 3,
        Error::Divergence { .. } => 4,
        Error::UndefinedCorrelation(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
