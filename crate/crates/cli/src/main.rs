//! `weaver`: generate data, pretrain, weave, continue pretraining, evaluate
//! and inspect dense-to-MoE conversions.

mod commands;
mod manifest;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use weaver_core::Mode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] weaver_core::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }
}

#[derive(Parser)]
#[command(name = "weaver", version, about = "Convert dense GLU language models into mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-task calibration set and training corpus.
    GenData(GenDataArgs),
    /// Pretrain a dense model on a corpus.
    Train(TrainArgs),
    /// Convert a dense checkpoint into an MoE checkpoint.
    Weave(WeaveArgs),
    /// Continue pretraining a downcycling-mode MoE checkpoint.
    Cpt(CptArgs),
    /// Held-out loss of a checkpoint, or of every method at several sparsities.
    Eval(EvalArgs),
    /// Routing and allocation statistics of an MoE checkpoint.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Directory receiving calibration.jsonl and corpus.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON settings file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Task clusters; tasks in different clusters use disjoint byte alphabets.
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Calibration samples per task.
    #[arg(long)]
    pub per_task: Option<usize>,
    /// Corpus documents per task.
    #[arg(long)]
    pub corpus_per_task: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Seeds initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct RunFlags {
    /// Training corpus (.jsonl records or one document per line).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss CSV path; defaults to `<out>.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Continue from a training-state file; its settings replace all others.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (requires --state-out).
    #[arg(long)]
    pub stop_at: Option<usize>,
    /// Write parameters, optimizer moments and step here when done.
    #[arg(long)]
    pub state_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Args)]
pub struct CptArgs {
    /// Downcycling-mode MoE checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Load-balance loss coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args)]
pub struct WeaveFlags {
    #[arg(long)]
    pub n_experts: Option<usize>,
    /// Experts active per token, shared ones included.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha_min: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    /// CV threshold above which a neuron counts as specialized.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Downcycling: shared experts per layer.
    #[arg(long)]
    pub uniform_shared: Option<usize>,
    /// Downcycling: keep raw softmax gate values instead of renormalizing.
    #[arg(long)]
    pub no_renorm: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: weaver_core::Error| e.to_string())
}

#[derive(Args)]
pub struct WeaveArgs {
    /// Dense checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration JSON-lines file.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub weave: WeaveFlags,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Dense or MoE checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Calibration file; required when comparing methods on a dense model.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Report JSON; a CSV copy goes to `<out>.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON settings file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated fractions of FFN computation to remove.
    #[arg(long, value_delimiter = ',')]
    pub sparsity: Option<Vec<f64>>,
    /// Evaluate on every document instead of the held-out tenth.
    #[arg(long)]
    pub whole_corpus: bool,
    #[command(flatten)]
    pub weave: WeaveFlags,
}

#[derive(Args)]
pub struct ReportArgs {
    /// MoE checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub calib: PathBuf,
    /// Task x expert selection frequencies as JSON lines.
    #[arg(long)]
    pub routing: Option<PathBuf>,
    /// Per-layer shared/routed allocation as JSON.
    #[arg(long)]
    pub allocation: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("EW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("EW_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Weave(a) => commands::weave(a),
        Command::Cpt(a) => commands::cpt(a),
        Command::Eval(a) => commands::eval(a),
        Command::Report(a) => commands::report(a),
    }
}

fn fail(kind: &str, msg: &str) -> ExitCode {
    let msg = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error: kind={kind} msg={msg:?}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail("usage", first);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
