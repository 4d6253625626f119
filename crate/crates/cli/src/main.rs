//! `netshrink`: build, train, prune, verify and cost segmentation models.
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 unachievable budget, 4 I/O.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "netshrink", version, about = "Structured channel pruning for segmentation graphs")]
struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, env = "NETSHRINK_SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an untrained HRNet-lite model.
    Build(BuildArgs),
    /// Train a model on the synthetic segmentation task.
    Train(TrainArgs),
    /// Select a global channel mask and shrink the model.
    Prune(PruneArgs),
    /// Check a shrunk model against its masked original.
    Verify(VerifyArgs),
    /// Count parameters and MACs.
    Cost(CostArgs),
    /// Fit or apply the MAC-to-energy model.
    Energy(EnergyArgs),
    /// Integrate a tegrastats power log.
    Power(PowerArgs),
    /// Human-readable JSON dump of a model.
    Dump(DumpArgs),
}

#[derive(Debug, Args, Serialize)]
struct BuildArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width_px: usize,
    /// Random BatchNorm parameters instead of the identity.
    #[arg(long)]
    random_bn: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum RegularizerArg {
    None,
    Slimming,
    Swd,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// JSON run config; omitted sections take toy defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    regularizer: Option<RegularizerArg>,
    /// Overrides the final rate of both regularizers.
    #[arg(long)]
    final_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run the full prune pipeline after training.
    #[arg(long)]
    pipeline: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum BudgetArg {
    Params,
    Channels,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    /// Write the mask and a channel-silenced model with unchanged shapes.
    MaskOnly,
    /// Physically remove channels, reconciling residual Adds.
    Full,
}

#[derive(Debug, Args, Serialize)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Fraction to remove, of parameters or channels.
    #[arg(long)]
    target: f64,
    #[arg(long, value_enum, default_value_t = BudgetArg::Params)]
    budget: BudgetArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Full)]
    method: MethodArg,
    #[arg(long)]
    out: PathBuf,
    /// Random inputs for the post-shrink equivalence check.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    shrunk: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct CostArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated NCHW shape, e.g. 1,3,512,1024.
    #[arg(long, value_delimiter = ',')]
    input_shape: Option<Vec<usize>>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("mode").required(true).args(["calibrate", "estimate"])))]
struct EnergyArgs {
    /// Fit on a calibration CSV; without a path, on the shipped series.
    #[arg(long, num_args = 0..=1)]
    calibrate: Option<Option<PathBuf>>,
    /// Predict energy for this model.
    #[arg(long, requires = "baseline")]
    estimate: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Fitted model from `--calibrate`; defaults to a fit on the shipped series.
    #[arg(long)]
    model_file: Option<PathBuf>,
    #[arg(long, default_value = "swd")]
    series: String,
    #[arg(long, default_value = "512x1024")]
    resolution: String,
    /// Series scored against the fit as a hold-out check.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct PowerArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value = netshrink::power::DEFAULT_RAIL)]
    rail: String,
    #[arg(long)]
    inferences: Option<u64>,
    /// Sampling period of logs without timestamps, in seconds.
    #[arg(long, default_value_t = 1.0)]
    period: f64,
    /// Subtract this idle power (mW) from every sample.
    #[arg(long)]
    idle_mw: Option<f64>,
    /// Inclusive window `t0,t1` in seconds.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    window: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    values: bool,
    /// Attach the channel-group table.
    #[arg(long)]
    partition: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Build(a) => commands::build(a, cli.seed),
        Command::Train(a) => commands::train(a, cli.seed),
        Command::Prune(a) => commands::prune(a, cli.seed),
        Command::Verify(a) => commands::verify(a, cli.seed),
        Command::Cost(a) => commands::cost(a, cli.seed),
        Command::Energy(a) => commands::energy(a, cli.seed),
        Command::Power(a) => commands::power(a, cli.seed),
        Command::Dump(a) => commands::dump(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
