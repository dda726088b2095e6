//! `nddr` command-line tool: dataset generation, training, evaluation,
//! gradient checking, parameter accounting and ablation grids.

mod ablate;
mod config;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

/// Invalid flags or flag combinations (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A check that ran and failed (exit code 1).
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Parser)]
#[command(
    name = "nddr",
    version,
    about = "Multi-task CNNs with NDDR feature fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a single-task, shared-trunk or fused multi-task network.
    Train(TrainArgs),
    /// Train over an initialization or learning-rate-scale grid.
    Ablate(ablate::AblateArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Parameter ledger of a network configuration.
    CountParams(CountArgs),
    /// Evaluate a checkpoint (or a fresh initialization) on the `--data` dataset.
    Eval(EvalArgs),
    /// Re-run a command from its run.json echo.
    Replay(ReplayArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// `shapes` (segmentation + boundary normals) or `attrs` (size class + orientation).
    #[arg(long, default_value = "shapes")]
    generator: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    hw: usize,
    /// Segmentation classes including background (shapes only).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `train` or `eval`.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

/// Network and optimization flags shared by `train` and `ablate`. Unset
/// flags fall back to the `--config` file, then to built-in defaults.
#[derive(Args, Clone, Default)]
pub struct RunFlags {
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// single | shared | nddr | cross-stitch | sluice
    #[arg(long)]
    mode: Option<String>,
    /// Task trained in single mode.
    #[arg(long)]
    task: Option<usize>,
    /// Aggregate all fusion levels before the heads.
    #[arg(long)]
    shortcut: bool,
    /// diag:α,β or xavier
    #[arg(long)]
    init: Option<String>,
    /// Fusion normalization: shared | per-task | none
    #[arg(long)]
    norm: Option<String>,
    /// Channel subspaces per task (sluice).
    #[arg(long)]
    subspaces: Option<usize>,
    #[arg(long)]
    nddr_lr_scale: Option<f64>,
    #[arg(long)]
    base_lr: Option<f64>,
    /// Weight decay λ.
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Poly learning-rate decay power; 0 keeps the rate constant.
    #[arg(long)]
    poly_power: Option<f64>,
    /// Train fusion normalization on running statistics.
    #[arg(long)]
    freeze_fusion_norm: bool,
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset directory evaluated during training.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Comma-separated single-task checkpoints, one per task.
    #[arg(long, value_delimiter = ',')]
    pretrain: Vec<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    flags: RunFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// `all` or one operation name.
    #[arg(long, default_value = "all")]
    module: String,
    /// Only f64 is supported.
    #[arg(long, default_value = "f64")]
    dtype: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
pub struct CountArgs {
    #[arg(long, default_value = "nddr")]
    mode: String,
    /// Stage widths.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
    channels: Vec<usize>,
    /// 3×3 convs per stage: one value for all stages or one per stage.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    convs: Vec<usize>,
    /// Number of tasks.
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    in_channels: usize,
    /// Output channels of each (pixel) head.
    #[arg(long, default_value_t = 3)]
    head_outputs: usize,
    #[arg(long)]
    shortcut: bool,
    #[arg(long, default_value_t = 2)]
    subspaces: usize,
    /// Fusion normalization: shared | per-task | none
    #[arg(long, default_value = "shared")]
    norm: String,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate; a fresh initialization when absent.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// run.json describing the network; defaults to the one beside the checkpoint.
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    flags: RunFlags,
}

#[derive(Args)]
pub struct ReplayArgs {
    run_json: PathBuf,
    /// Output directory replacing the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => run::gen_data(&run::GenRun::resolve(a)?),
        Command::Train(a) => {
            let out = a
                .out
                .ok_or_else(|| UsageError("--out is required".into()))?;
            run::train(&run::TrainRun::resolve(&a.flags, out)?).map(|_| ())
        }
        Command::Ablate(a) => ablate::ablate(a),
        Command::Gradcheck(a) => run::gradcheck(&a),
        Command::CountParams(a) => run::count_params(&a),
        Command::Eval(a) => run::eval(&a),
        Command::Replay(a) => run::replay(&a.run_json, a.out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some()
        || matches!(
            err.downcast_ref::<nddr::Error>(),
            Some(nddr::Error::Invalid(_))
        )
    {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
