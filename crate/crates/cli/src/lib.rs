//! The `progressd` command-line pipeline: generate, segment, train, eval and plot.

pub mod commands;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use progressd_core::ViewMask;

/// Environment variable that overrides config-file seeds (a `--seed` flag wins over it).
pub const SEED_ENV: &str = "PROGRESSD_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "progressd",
    version,
    about = "Multi-view action progress prediction"
)]
pub struct Cli {
    /// Where to write the run manifest (defaults next to the main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Detect action boundaries from sensor traces.
    Segment(SegmentArgs),
    /// Train a progress model.
    Train(TrainArgs),
    /// Evaluate a model or a baseline.
    Eval(EvalArgs),
    /// Draw predicted progress curves for one episode.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic dataset config (JSON); defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the episodes of an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Dataset or episode directory.
    #[arg(long)]
    pub episodes: PathBuf,
    /// One rule, or a map from action name to rule (JSON). Built-in rules by default.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Store the detected boundaries in each episode manifest.
    #[arg(long)]
    pub write_boundaries: bool,
    /// Boundary report CSV (default `<episodes>/boundaries.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Training config (JSON); defaults apply without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; the model config is written to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics CSV (default `<out>.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Boundary rule used for episodes without stored boundaries.
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("predictor").required(true).args(["model", "baseline"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// static, random, average_index, frame_counter or oracle.
    #[arg(long)]
    pub baseline: Option<String>,
    /// `all`, or a comma-separated subset of left, central, right.
    #[arg(long, default_value = "all")]
    pub mask: ViewMask,
    /// JSON report; the CSV row is written next to it with a `.csv` extension.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("predictor").required(true).multiple(true).args(["model", "oracle"])))]
pub struct PlotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    pub model2: Option<PathBuf>,
    /// Also draw the ground-truth oracle predictor.
    #[arg(long)]
    pub oracle: bool,
    /// Camera mask; repeat for one curve per mask.
    #[arg(long = "mask", default_value = "all")]
    pub masks: Vec<ViewMask>,
    #[arg(long)]
    pub episode: String,
    /// SVG path; the raw series go to the same path with a `.csv` extension.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

/// Bad input from the user: flags, config files, rules. Exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<progressd_core::Error>()
                .is_some_and(|c| c.is_usage())
    });
    if usage {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let manifest = cli.manifest;
    match cli.command {
        Command::Generate(a) => commands::generate(&a, manifest),
        Command::Segment(a) => commands::segment(&a, manifest),
        Command::Train(a) => commands::train(&a, manifest),
        Command::Eval(a) => commands::eval(&a, manifest),
        Command::Plot(a) => commands::plot(&a, manifest),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
