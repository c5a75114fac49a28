//! `pecl` command-line driver: experiment configs, training, evaluation and
//! the reporting commands.
//!
//! Exit codes are a stable contract: 0 success, 2 usage, config, data or IO
//! error, 3 numerical failure (including a failed gradient check).

pub mod commands;
pub mod experiment;
pub mod sweep;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pecl_core::config::{AdapterKind, FusionMode, Placement};
use pecl_core::Error;

pub use experiment::{DataSource, ExperimentConfig, Protocol};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pecl", version, about = "Parameter-efficient crossmodal deception detection experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on every split of the selected protocol.
    Train(RunArgs),
    /// Evaluate a checkpoint on a protocol split.
    Eval(EvalArgs),
    /// Finite-difference check of the full model in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Print the trainable/frozen parameter breakdown.
    Params(ParamsArgs),
    /// Write the splits of a protocol.
    Split(RunArgs),
    /// Inter-annotator agreement from annotation tables.
    Kappa(KappaArgs),
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train every ablation variant and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    Fold1,
    Fold2,
    Fold3,
    Duration,
    Gender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum FusionArg {
    Pavf,
    Concat,
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum AdapterArg {
    None,
    Ut,
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlacementArg {
    ParallelBoth,
    ParallelMhsa,
    ParallelFfn,
    Between,
}

/// Flags shared by every command that resolves an experiment config.
/// Precedence: preset, then `--config`, then these flags.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON experiment config; only the keys it names override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset: desk, micro or paper.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory (or its manifest.jsonl) written by `pecl synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of synthetic clips when the data source is generated in memory.
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    pub multitask: Option<Switch>,
    #[arg(long, value_enum)]
    pub adapter: Option<AdapterArg>,
    #[arg(long, value_enum)]
    pub placement: Option<PlacementArg>,
    #[arg(long)]
    pub pavf_count: Option<usize>,
    /// Encoder depth (layers per modality).
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Allow subjects to appear in both train and test.
    #[arg(long)]
    pub mixed_subjects: bool,
    /// Gender protocol trains on one gender and tests on the other.
    #[arg(long)]
    pub cross_gender: bool,
    /// Record per-epoch wall time in the training log (breaks byte equality).
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint file written by `pecl train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to evaluate; defaults to the checkpoint's directory name.
    #[arg(long)]
    pub split: Option<String>,
    /// Weight of the visual probability in score fusion.
    #[arg(long)]
    pub score_weight: Option<f64>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Route the loss through an identity whose backward doubles the
    /// gradient; the check must then fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ParamsArgs {
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct KappaArgs {
    /// Annotation tables, one JSON file per annotator.
    #[arg(required = true, num_args = 2..)]
    pub tables: Vec<PathBuf>,
    /// Feature alphabet used to group features by modality.
    #[arg(long, default_value = "mumin30")]
    pub alphabet: String,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Also write the report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Write only a manifest mirroring the reference corpus statistics.
    #[arg(long)]
    pub reference_manifest: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Axes to sweep, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "placement,adapter,pavf,depth")]
    pub axes: Vec<sweep::Axis>,
    #[command(flatten)]
    pub run: RunArgs,
}

impl From<FusionArg> for FusionMode {
    fn from(v: FusionArg) -> Self {
        match v {
            FusionArg::Pavf => FusionMode::Pavf,
            FusionArg::Concat => FusionMode::Concat,
            FusionArg::Score => FusionMode::Score,
        }
    }
}

impl From<AdapterArg> for AdapterKind {
    fn from(v: AdapterArg) -> Self {
        match v {
            AdapterArg::None => AdapterKind::None,
            AdapterArg::Ut => AdapterKind::Ut,
            AdapterArg::Bottleneck => AdapterKind::Bottleneck,
        }
    }
}

impl From<PlacementArg> for Placement {
    fn from(v: PlacementArg) -> Self {
        match v {
            PlacementArg::ParallelBoth => Placement::ParallelBoth,
            PlacementArg::ParallelMhsa => Placement::ParallelMhsa,
            PlacementArg::ParallelFfn => Placement::ParallelFfn,
            PlacementArg::Between => Placement::Between,
        }
    }
}

impl From<ProtocolArg> for Protocol {
    fn from(v: ProtocolArg) -> Self {
        match v {
            ProtocolArg::Fold1 => Protocol::Fold1,
            ProtocolArg::Fold2 => Protocol::Fold2,
            ProtocolArg::Fold3 => Protocol::Fold3,
            ProtocolArg::Duration => Protocol::Duration,
            ProtocolArg::Gender => Protocol::Gender,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command, writing reports
/// to `out` and diagnostics to stderr. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
