mod commands;
mod images;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Flow stochastic segmentation networks: data, analysis, training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "flowssn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    GenerateData(GenerateArgs),
    /// Numerical and effective rank of pixel covariances.
    AnalyzeRank(RankArgs),
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Draw label maps and an uncertainty map from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Render charts and covariance panels.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Markovshapes,
    Multirater,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    /// MarkovShapes quadrant side in pixels.
    #[arg(long)]
    quadrant_size: Option<usize>,
    /// Multi-rater annotators per image.
    #[arg(long)]
    raters: Option<usize>,
    /// Multi-rater image shape as HxW.
    #[arg(long)]
    shape: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Family {
    Default,
    Floor,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// MarkovShapes dataset directory.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    dataset: Option<PathBuf>,
    /// Random low-rank logit specs as k,d.
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16])]
    ranks: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    rel_tol: f64,
    #[arg(long, value_enum, default_value_t = Family::Default)]
    family: Family,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SolverArgs {
    /// Euler steps for continuous-time models.
    #[arg(long, conflicts_with = "adaptive")]
    steps: Option<usize>,
    /// Adaptive Dormand-Prince integration.
    #[arg(long)]
    adaptive: bool,
    #[arg(long, default_value_t = 1e-6, requires = "adaptive")]
    tol: f64,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset supplying the input image for conditional models.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Repeat the evaluation for each Euler step count, one row each.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["steps", "adaptive"])]
    sweep: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PlotKind {
    Bpd,
    GedVsSteps,
    Covariance,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long, value_enum)]
    kind: PlotKind,
    /// Training logs (bpd).
    #[arg(long)]
    log: Vec<PathBuf>,
    /// Sweep reports (ged-vs-steps).
    #[arg(long)]
    report: Vec<PathBuf>,
    /// MarkovShapes checkpoint (covariance).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failures split by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<flowssn::Error> for CliError {
    fn from(e: flowssn::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenerateData(a) => commands::generate_data(a),
        Command::AnalyzeRank(a) => commands::analyze_rank(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Plot(a) => plot::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
