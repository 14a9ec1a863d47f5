//! `ncpp`: ingest, train, cross-validate, evaluate, predict, explain,
//! generate synthetic data and run ablations.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod exit;
pub mod manifest;

#[derive(Parser, Debug)]
#[command(name = "ncpp", version, about = "Grouped-attention CPU performance predictor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean raw per-run rows and consolidate them into multi-output records.
    Ingest(IngestArgs),
    /// Train on a fixed train/validation/test split.
    Train(TrainArgs),
    /// k-fold cross-validation over the training and validation parts.
    Cv(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(ModelArgs),
    /// Write predictions of a checkpoint for every record.
    Predict(ModelArgs),
    /// Export attention matrices and aggregated feature importance.
    Explain(ExplainArgs),
    /// Generate a synthetic dataset with a planted label function.
    Synth(SynthArgs),
    /// Run the ablation arms (all six, or one with --arm).
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Directory all outputs are written under.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Feature schema JSON (default: the built-in 35-feature schema).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Benchmark suite name.
    #[arg(long)]
    pub suite: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Consolidated CSV, or raw per-run CSV (detected by its benchmark and
    /// score columns) which is ingested in memory.
    #[arg(long)]
    pub data: PathBuf,
    /// DIMM part-number lookup CSV, for raw input.
    #[arg(long)]
    pub dimm: Option<PathBuf>,
    /// z-score outlier threshold for raw input.
    #[arg(long, default_value_t = 3.0)]
    pub z_threshold: f64,
    /// Skip the outlier filter for raw input.
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Args, Debug, Clone)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    /// Raw per-run CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub dimm: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    pub z_threshold: f64,
    #[arg(long)]
    pub no_filter: bool,
    /// What to do with configurations missing some benchmark.
    #[arg(long, value_enum, default_value_t = Policy::Drop)]
    pub policy: Policy,
    /// Output file (default: <out-dir>/consolidated.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Drop,
    Mask,
}

/// Training hyperparameters; flags override the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Hyper {
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Attention heads.
    #[arg(long)]
    pub heads: Option<usize>,
    /// Encoder layers per stack.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Huber threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of cross-validation folds.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: Hyper,
    /// Print progress every this many epochs (0 = quiet).
    #[arg(long, default_value_t = 0)]
    pub log_every: usize,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Run a single arm: full, no-intra, no-memory, no-other, no-cpu,
    /// no-workload.
    #[arg(long)]
    pub arm: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by train.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory holding normalizer.json and vocab.json (default: the
    /// checkpoint's directory).
    #[arg(long)]
    pub transforms: Option<PathBuf>,
    /// Output file stem.
    #[arg(long)]
    pub stem: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Record index within the data file.
    #[arg(long, default_value_t = 0, conflicts_with = "mean")]
    pub sample: usize,
    /// Average attention over every record instead.
    #[arg(long)]
    pub mean: bool,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::Received)]
    pub reduction: ReductionArg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReductionArg {
    /// Column mean (attention received).
    Received,
    /// Row mean (attention given).
    Given,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Generator config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV (default: <out-dir>/synth.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the consolidated layout instead of raw per-run rows.
    #[arg(long)]
    pub consolidated: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyArg {
    Linear,
    Nonlinear,
}

/// Parses `args` (program name first), runs the command and maps the
/// outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit::code_for(&err))
        }
    }
}
