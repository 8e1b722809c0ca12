use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "seca", version, about = "Continual learning experiments with semantic-guided distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train over the whole task stream and write checkpoint and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on the test sets of the tasks it has seen.
    Eval(EvalArgs),
    /// Every distillation strategy with and without the prototype classifier.
    AblateDistill(RunArgs),
    /// Every classifier design under the configured distillation strategy.
    AblateClassifier(RunArgs),
    /// One row per value of a single hyper-parameter.
    Sweep(SweepArgs),
    /// Check the closed-form teacher weights against numeric minimization.
    TheoryCheck(TheoryArgs),
    /// Write the configured synthetic stream as a binary feature bank.
    GenData(GenDataArgs),
    /// Merge report directories and re-format them.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's init and shuffle seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the data source from this config instead of the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Repeated runs per variant; trial k shifts every seed by k.
    #[arg(long, default_value_t = 3)]
    pub trials: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Beta,
    #[value(name = "tau_prime")]
    TauPrime,
    Pool,
    Width,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::TauPrime => "tau_prime",
            SweepParam::Pool => "pool",
            SweepParam::Width => "width",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values, e.g. `1,3,5,ALL` or `0.5,task_index`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub instances: usize,
    /// Random simplex probes per instance, on top of vertices and centre.
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run config whose data source must be synthetic.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the bank, its name manifest and a matching config.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the synthetic data seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    Md,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Md => "md",
        }
    }
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directories of earlier runs.
    #[arg(long = "in", num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Md)]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
}
