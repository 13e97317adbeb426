//! `rlsparse`: update-sparsity analyses over safetensors checkpoints.

mod commands;
mod manifest;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rlsparse_core::checkpoint::DEFAULT_CHUNK_ELEMS;
use rlsparse_core::rank::RankPolicy;
use rlsparse_core::{Error, ErrorClass};

use output::Format;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Io => 3,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rlsparse", version, about = "Measure how sparsely fine-tuning updates model parameters")]
pub struct Cli {
    /// Worker threads [default: available parallelism].
    #[arg(long, global = true, env = "RLSPARSE_THREADS")]
    pub threads: Option<usize>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Update sparsity between two checkpoints, per tensor, layer, role and globally.
    Sparsity(DiffArgs),
    /// Per-layer, per-role sparsity rows with an "Average Sparsity" row per layer.
    Layers(DiffArgs),
    /// Subnetwork masks.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Numerical rank of each 2-D update matrix.
    Rank(RankArgs),
    /// Sparsity trajectory over an ordered checkpoint sequence.
    Dynamics(SeqArgs),
    /// Untouched / canceled / subnetwork partition of all parameters.
    Classify(SeqArgs),
    /// Small policy-network experiments.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Initial (reference) checkpoint: a .safetensors file or a sharded index .json.
    #[arg(long, value_name = "PATH")]
    pub init: PathBuf,
    /// Fine-tuned checkpoint.
    #[arg(long, value_name = "PATH")]
    pub tuned: PathBuf,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Regex of tensor names to leave out (repeatable).
    #[arg(long, value_name = "PATTERN")]
    pub exclude: Vec<String>,
    /// Elements per streamed chunk.
    #[arg(long, default_value_t = DEFAULT_CHUNK_ELEMS)]
    pub chunk_elems: usize,
    /// JSON role-pattern file overriding the built-in tensor classification.
    #[arg(long, value_name = "PATH")]
    pub roles: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Absolute tolerance (repeatable); values are sorted and deduplicated.
    #[arg(long = "tol", value_name = "TAU", default_values = ["1e-8", "1e-7", "1e-6", "1e-5"])]
    pub tol: Vec<f64>,
    #[command(flatten)]
    pub stream: StreamArgs,
}

#[derive(Debug, Subcommand)]
pub enum MaskCommand {
    /// Write the mask of parameters that moved by more than the tolerance.
    Extract(ExtractArgs),
    /// One-sided overlaps of two masks with random-guessing baselines.
    Overlap(OverlapArgs),
    /// Combine two masks with the same schema.
    Intersect(CombineArgs),
    /// Seeded random mask with a given density over an existing schema.
    Random(RandomArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Absolute tolerance.
    #[arg(long, value_name = "TAU", default_value = "1e-5")]
    pub tol: f64,
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Mask file to write.
    #[arg(long, value_name = "FILE")]
    pub mask_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlapArgs {
    /// First mask file.
    #[arg(long, value_name = "MASK")]
    pub a: PathBuf,
    /// Second mask file.
    #[arg(long, value_name = "MASK")]
    pub b: PathBuf,
    /// Add a per-layer breakdown (layers from tensor names).
    #[arg(long)]
    pub by_layer: bool,
    /// JSON role-pattern file used for the per-layer breakdown.
    #[arg(long, value_name = "PATH")]
    pub roles: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CombineOp {
    Intersect,
    Union,
    Difference,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    #[arg(long, value_name = "MASK")]
    pub a: PathBuf,
    #[arg(long, value_name = "MASK")]
    pub b: PathBuf,
    /// Set operation; `difference` keeps bits of A not in B.
    #[arg(long, value_enum, default_value_t = CombineOp::Intersect)]
    pub op: CombineOp,
    #[arg(long, value_name = "FILE")]
    pub mask_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RandomArgs {
    /// Mask file or checkpoint whose tensor schema the random mask copies.
    #[arg(long, value_name = "PATH")]
    pub like: PathBuf,
    /// Probability that each bit is set.
    #[arg(long)]
    pub density: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Regex of tensor names to leave out when copying a checkpoint schema (repeatable).
    #[arg(long, value_name = "PATTERN")]
    pub exclude: Vec<String>,
    #[arg(long, value_name = "FILE")]
    pub mask_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    /// Threshold policy: rel:EPS keeps sigma > sigma_max * max(rows, cols) * EPS;
    /// abs:TAU keeps sigma > TAU. The default EPS is 2^-23.
    #[arg(long, value_parser = parse_policy, default_value = "rel:1.1920928955078125e-7")]
    pub policy: RankPolicy,
    /// Skip matrices whose smaller side is below this.
    #[arg(long, default_value_t = 1)]
    pub min_dim: usize,
    /// Regex of tensor names to leave out (repeatable).
    #[arg(long, value_name = "PATTERN")]
    pub exclude: Vec<String>,
    /// Round each delta to bfloat16 before decomposing.
    #[arg(long)]
    pub quantize_bf16: bool,
    /// Seed for randomized sketches (only used when both sides exceed 4096).
    #[arg(long, default_value_t = 0)]
    pub svd_seed: u64,
}

fn parse_policy(s: &str) -> Result<RankPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct SeqArgs {
    /// Initial checkpoint.
    #[arg(long, value_name = "PATH")]
    pub init: PathBuf,
    /// Intermediate checkpoints in training order (repeatable).
    #[arg(long = "ckpt", value_name = "PATH")]
    pub ckpts: Vec<PathBuf>,
    /// Final checkpoint, appended after the intermediates.
    #[arg(long = "final", value_name = "PATH")]
    pub final_ckpt: Option<PathBuf>,
    /// Absolute tolerance.
    #[arg(long, value_name = "TAU", default_value = "1e-5")]
    pub tol: f64,
    #[command(flatten)]
    pub stream: StreamArgs,
}

#[derive(Debug, Subcommand)]
pub enum ToyCommand {
    /// Train once and optionally persist the run directory.
    Run(ToyRunArgs),
    /// Train, then retrain with gradients masked to the updated parameters, and compare.
    Replay(ToyMultiArgs),
    /// Final sparsity and loss for each objective and seed.
    Sweep(ToySweepArgs),
}

/// Toy settings. Unset flags fall back to the config file, then to the built-in defaults.
#[derive(Debug, Args)]
pub struct ToyArgs {
    /// TOML (.toml) or JSON config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Input features [default: 32].
    #[arg(long)]
    pub input_dim: Option<usize>,
    /// Hidden units [default: 64].
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Discrete actions [default: 16].
    #[arg(long)]
    pub num_actions: Option<usize>,
    /// Training steps [default: 2000].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Examples per step [default: 32].
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate [default: 0.01].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Preference inverse temperature [default: 0.1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// SFT_OOD or DPO_IND [default: DPO_IND].
    #[arg(long)]
    pub objective: Option<String>,
    /// BF16_EMULATED or F32 [default: BF16_EMULATED].
    #[arg(long)]
    pub storage: Option<String>,
    /// sgd or adam [default: sgd].
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Temperature of the supervised target distribution [default: 0.5].
    #[arg(long)]
    pub teacher_temperature: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ToyRunArgs {
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Run seed [default: the config seed, 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for init/final checkpoints, mask, log.csv and config.json.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Save a parameter checkpoint every N steps into the run directory.
    #[arg(long, value_name = "N")]
    pub snapshot_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ToyMultiArgs {
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Comma-separated seeds [default: the config seed].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct ToySweepArgs {
    #[command(flatten)]
    pub toy: ToyArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// Comma-separated objectives.
    #[arg(long, value_delimiter = ',', default_value = "DPO_IND,SFT_OOD")]
    pub objectives: Vec<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
