use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use graphflow::data::SplitName;
use graphflow::trainer::{NormFit, Preset};

mod commands;
mod config;

/// Graph-conditioned normalizing-flow anomaly detection for multivariate
/// time series.
#[derive(Debug, Parser)]
#[command(name = "graphflow", version, about)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a CSV series and write a checkpoint.
    Train(Box<TrainArgs>),
    /// Score windows and write the anomaly report.
    Score(ScoreArgs),
    /// Score windows, print the summary and AUROC.
    Eval(ScoreArgs),
    /// Export learned adjacency matrices.
    InspectGraph(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of entities.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Number of timesteps.
    #[arg(long, default_value_t = 2000)]
    pub len: usize,
    /// Fraction of labeled timesteps, at most 0.3.
    #[arg(long, default_value_t = 0.05)]
    pub rate: f64,
    /// Comma-separated anomaly kinds: spike, level-shift, decorrelate.
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Input CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Flat key=value file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of flow blocks.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// LSTM hidden size.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Condition width per timestep.
    #[arg(long)]
    pub cond_dim: Option<usize>,
    #[arg(long)]
    pub made_hidden: Option<usize>,
    /// Attention dropout during training.
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub split_train: Option<f64>,
    #[arg(long)]
    pub split_val: Option<f64>,
    /// Fit normalization on the training split or the whole series.
    #[arg(long, value_enum)]
    pub norm_fit: Option<NormFitArg>,
    /// Replace the learned graph with the identity.
    #[arg(long)]
    pub no_graph: bool,
    /// Use one N(0, I) target for every entity.
    #[arg(long)]
    pub single_target: bool,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV (required for `score`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    pub split: SplitArg,
    /// Entity threshold multiplier: one value, or one per entity.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated window indices over the whole series.
    #[arg(long, value_delimiter = ',', required = true)]
    pub windows: Vec<usize>,
    /// Output CSV; with several windows, `_w<i>` is added to the file stem.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Swat,
    Wadi,
    Small,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Swat => Preset::Swat,
            PresetArg::Wadi => Preset::Wadi,
            PresetArg::Small => Preset::Small,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormFitArg {
    Train,
    All,
}

impl From<NormFitArg> for NormFit {
    fn from(n: NormFitArg) -> Self {
        match n {
            NormFitArg::Train => NormFit::Train,
            NormFitArg::All => NormFit::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for SplitName {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitName::Train,
            SplitArg::Val => SplitName::Val,
            SplitArg::Test => SplitName::Test,
            SplitArg::All => SplitName::All,
        }
    }
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
#[error("{msg}")]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }
}

impl From<graphflow::Error> for CliError {
    fn from(e: graphflow::Error) -> Self {
        use graphflow::Error as E;
        let code = match &e {
            E::Usage(_) | E::Config(_) => EXIT_USAGE,
            E::Parse { .. }
            | E::Io(_)
            | E::Checkpoint(_)
            | E::Shape { .. }
            | E::UndefinedMetric(_) => EXIT_DATA,
            E::NonFinite { .. } | E::Diverged(_) => EXIT_NUMERIC,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, cli.seed),
        Command::Train(a) => commands::train(&a, cli.seed),
        Command::Score(a) => commands::score(&a, false),
        Command::Eval(a) => commands::score(&a, true),
        Command::InspectGraph(a) => commands::inspect_graph(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
