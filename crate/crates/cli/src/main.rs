//! `invicl`: train, evaluate and verify in-context learning schemes on
//! synthetic regression.

mod config;
mod eval;
mod misc;
mod output;
mod train;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use invicl_core::layout::PeScheme;
use invicl_core::masks::SchemeId;
use invicl_core::tasks::{OodShift, TaskKind};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{} already exists (pass --force to overwrite)", .0.display())]
    Exists(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] invicl_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use invicl_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Exists(_) | CliError::Io { .. } => 2,
            CliError::Core(E::Io(_) | E::Checkpoint(_) | E::Json(_)) => 2,
            CliError::Core(_) => 1,
            CliError::Verification(_) => 3,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "invicl", version, about = "Permutation-invariant in-context learning on synthetic regression")]
struct Cli {
    /// Worker threads for episode-parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint, loss trace and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint: error curve, order sensitivity, probes.
    Eval(EvalArgs),
    /// Check mask enumeration results or the linear-attention construction.
    Verify {
        #[command(subcommand)]
        what: VerifyCommand,
    },
    /// Measure invariance, label leakage and interdependence for a scheme.
    Defcheck(DefcheckArgs),
    /// Write sampled episodes as JSON lines.
    Dump(DumpArgs),
}

#[derive(Subcommand)]
enum VerifyCommand {
    Masks(verify::MasksArgs),
    Gd(verify::GdArgs),
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub scheme: Option<SchemeId>,
    #[arg(long)]
    pub pe: Option<PeScheme>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub ood: Option<OodShift>,
    #[arg(long)]
    pub d: Option<usize>,
    /// Context examples per training episode.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    /// Absolute position table capacity in examples (default 2n).
    #[arg(long)]
    pub max_examples: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Episodes for the final query-error report.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    /// Train on the query position only.
    #[arg(long)]
    pub query_only: bool,
    /// Checkpoint path; the loss trace and manifest are written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

impl_merge!(TrainArgs;
    options: scheme, pe, task, ood, d, n, layers, heads, embed, max_examples, steps, batch, lr, clip, seed,
        eval_every, eval_episodes, out;
    flags: query_only);

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Inclusive range `a..b`, a comma list, or a single length.
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long)]
    pub ood: Option<OodShift>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Comma list of reference learners added to the curve:
    /// least_squares, lasso, zero.
    #[arg(long)]
    pub reference: Option<String>,
    /// Random permutations for the order-sensitivity report.
    #[arg(long)]
    pub sensitivity: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Context length for sensitivity and probes (default: training length).
    #[arg(long)]
    pub at_n: Option<usize>,
    /// Comma list of layers to probe (0 = embedding).
    #[arg(long)]
    pub probe: Option<String>,
    #[arg(long)]
    pub probe_lambda: Option<f64>,
    #[arg(long)]
    pub probe_train: Option<usize>,
    #[arg(long)]
    pub probe_test: Option<usize>,
    /// Second checkpoint for the length-extrapolation comparison.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

impl_merge!(EvalArgs;
    options: ckpt, lengths, ood, episodes, seed, csv, reference, sensitivity, tau, at_n, probe, probe_lambda,
        probe_train, probe_test, compare, factor;
    flags: );

#[derive(Args, Debug, Clone)]
pub struct DefcheckArgs {
    #[arg(long)]
    pub scheme: SchemeId,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Default: absolute for ar, symmetric otherwise.
    #[arg(long)]
    pub pe: Option<PeScheme>,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub embed: usize,
}

#[derive(Args, Debug, Clone)]
pub struct DumpArgs {
    #[arg(long, default_value = "linreg")]
    pub task: TaskKind,
    #[arg(long, default_value_t = 5)]
    pub d: usize,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value = "none")]
    pub ood: OodShift,
    #[arg(long, default_value_t = 10)]
    pub episodes: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn run(cli: Cli) -> CliResult {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Train(args) => train::run(args),
        Command::Eval(args) => eval::run(args),
        Command::Verify { what } => match what {
            VerifyCommand::Masks(a) => verify::masks(a),
            VerifyCommand::Gd(a) => verify::gd(a),
        },
        Command::Defcheck(args) => misc::defcheck(args),
        Command::Dump(args) => misc::dump(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
