//! `same` — train, probe, and report multi-task graph node embeddings.
//!
//! Exit codes: 0 success, 2 usage errors, 3 data-format errors, 4 numeric
//! errors, 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use same_core::model::{Task, TaskSet};
use same_core::training::{MetaGradMode, StrategyKind};
use same_core::{Error, Result};

use config::{parse_config_file, RunConfig};

#[derive(Parser)]
#[command(
    name = "same",
    version,
    about = "Multi-task graph node embeddings via single-task adaptation meta-learning"
)]
struct Cli {
    /// Worker threads for parallel folds (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print dataset statistics
    Inspect(DataArgs),
    /// Train one strategy across folds; writes checkpoints and curves
    Train(TrainArgs),
    /// Evaluate trained checkpoints with a probe or the model heads
    Probe(ProbeArgs),
    /// Train a source model and probe a task it never saw
    Transfer(TransferArgs),
    /// Aggregate metrics files into report tables
    Report(ReportArgs),
    /// Generate synthetic datasets in TUDataset format
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset name (under the data root) or a directory path
    #[arg(long)]
    dataset: String,
    /// Dataset root directory (or set SAME_DATA_ROOT)
    #[arg(long = "data-root")]
    data_root: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CommonTrainArgs {
    /// Config file with key = value lines; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long = "data-root")]
    data_root: Option<PathBuf>,
    /// classical-st | classical-mt | trad-meta | finetune | isame | esame
    #[arg(long)]
    strategy: Option<String>,
    /// Comma-separated task set, e.g. gc,nc,lp
    #[arg(long)]
    tasks: Option<String>,
    /// Number of cross-validation folds
    #[arg(long)]
    folds: Option<usize>,
    /// Restrict to specific fold indices (repeatable)
    #[arg(long = "fold")]
    fold: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "inner-lr")]
    inner_lr: Option<f64>,
    #[arg(long = "outer-lr")]
    outer_lr: Option<f64>,
    #[arg(long = "inner-steps")]
    inner_steps: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// fo (first-order) or so (second-order)
    #[arg(long = "meta-grad")]
    meta_grad: Option<String>,
    #[arg(long = "hidden-dim")]
    hidden_dim: Option<usize>,
    #[arg(long = "num-layers")]
    num_layers: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// A train-output directory holding fold_*/checkpoint.txt
    #[arg(long)]
    run: Option<PathBuf>,
    /// Individual checkpoint files (repeatable)
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// linear | neural | head
    #[arg(long, default_value = "linear")]
    probe: String,
    /// Tasks to evaluate (default: the tasks the checkpoint trained on)
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Task the probe is evaluated on (unseen by the source model)
    #[arg(long = "eval-task")]
    eval_task: String,
    /// linear | neural | head
    #[arg(long, default_value = "linear")]
    probe: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory scanned recursively for metrics JSON files
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// parser-fixture | communities | enzymes-like
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 60)]
    graphs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_run_config(common: &CommonTrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_pairs(&parse_config_file(path)?)?;
    }
    if let Some(v) = &common.dataset {
        cfg.dataset = v.clone();
    }
    if let Some(v) = &common.data_root {
        cfg.data_root = Some(v.clone());
    }
    if let Some(v) = &common.strategy {
        cfg.strategy = StrategyKind::parse(v)?;
    }
    if let Some(v) = &common.tasks {
        cfg.tasks = TaskSet::parse(v)?;
    }
    if let Some(v) = common.folds {
        cfg.folds = v;
    }
    if !common.fold.is_empty() {
        cfg.fold_filter = common.fold.clone();
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.inner_lr {
        cfg.inner_lr = v;
    }
    if let Some(v) = common.outer_lr {
        cfg.outer_lr = v;
    }
    if let Some(v) = common.inner_steps {
        cfg.inner_steps = v;
    }
    if let Some(v) = common.epochs {
        cfg.epochs = Some(v);
    }
    if let Some(v) = common.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &common.meta_grad {
        cfg.meta_grad = MetaGradMode::parse(v)?;
    }
    if let Some(v) = common.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = common.num_layers {
        cfg.num_layers = v;
    }
    if let Some(v) = common.patience {
        cfg.patience = v;
    }
    if let Some(v) = common.eval_every {
        cfg.eval_every = v;
    }
    if cfg.dataset.is_empty() {
        return Err(Error::Argument("--dataset is required".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .map_err(|e| Error::Argument(format!("cannot configure {workers} workers: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    if let Some(workers) = cli.workers {
        if workers > 1 {
            eprintln!("built without the parallel feature; --workers ignored");
        }
    }

    match cli.command {
        Command::Inspect(args) => {
            let cfg = RunConfig {
                dataset: args.dataset,
                data_root: args.data_root,
                ..RunConfig::default()
            };
            commands::cmd_inspect(&cfg)
        }
        Command::Train(args) => {
            let cfg = resolve_run_config(&args.common)?;
            commands::cmd_train(&cfg, &args.out)
        }
        Command::Probe(args) => {
            let cfg = RunConfig {
                dataset: args.data.dataset.clone(),
                data_root: args.data.data_root.clone(),
                ..RunConfig::default()
            };
            let tasks = args.tasks.as_deref().map(TaskSet::parse).transpose()?;
            commands::cmd_probe(
                &cfg,
                args.run.as_deref(),
                &args.checkpoint,
                &args.probe,
                tasks,
                &args.out,
            )
        }
        Command::Transfer(args) => {
            let cfg = resolve_run_config(&args.common)?;
            let eval_task = Task::parse(&args.eval_task)?;
            commands::cmd_transfer(&cfg, eval_task, &args.probe, &args.out)
        }
        Command::Report(args) => commands::cmd_report(&args.results, &args.out),
        Command::Synth(args) => commands::cmd_synth(&args.kind, args.graphs, args.seed, &args.out),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Argument(_) => 2,
        Error::Format(_) | Error::Parse { .. } | Error::Integrity(_) => 3,
        Error::Numeric(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
