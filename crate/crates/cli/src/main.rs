//! `tsfm`: split an archive, pre-train encoders, fine-tune them on
//! downstream tasks, run nearest-neighbor baselines and build rank reports.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsfm_core::backbones::Arch;
use tsfm_core::baselines::Metric;
use tsfm_core::pretrain::Method;

#[derive(Parser)]
#[command(name = "tsfm", version, about = "Time-series foundation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic three-domain archive.
    Synth(SynthArgs),
    /// Split an archive into a pre-training pool and per-task splits.
    Split(SplitArgs),
    /// Pre-train one (method, backbone) pair on the pre-training pool.
    Pretrain(PretrainArgs),
    /// Fine-tune on one task and select the best epoch and initialization.
    Finetune(FinetuneArgs),
    /// One-nearest-neighbor baseline on one task.
    Baseline(BaselineArgs),
    /// Average ranks, win/tie/loss summary and convergence plots.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub series: usize,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub archive: PathBuf,
    /// Output directory for `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct DataArgs {
    #[arg(long)]
    pub archive: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// TOML or JSON run config; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    #[arg(long, value_parser = parse_arch)]
    pub backbone: Arch,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for the checkpoint, loss log and provenance.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long, conflicts_with = "scratch", required_unless_present = "scratch")]
    pub checkpoint: Option<PathBuf>,
    /// Random initialization only.
    #[arg(long, requires = "backbone")]
    pub scratch: bool,
    /// Backbone for `--scratch`.
    #[arg(long, value_parser = parse_arch)]
    pub backbone: Option<Arch>,
    #[arg(long)]
    pub task: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[arg(long, value_parser = parse_metric)]
    pub metric: Metric,
    /// Sakoe-Chiba radius for DTW.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub task: String,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory searched recursively for `results.csv` files.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Method row (e.g. `timeclr`) or full id (e.g. `timeclr+gru`).
    #[arg(long, default_value = "timeclr")]
    pub designated: String,
    /// Accuracies within this distance tie; 0 means exact equality.
    #[arg(long, default_value_t = 0.0)]
    pub tie_tolerance: f64,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| {
        let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method `{s}`; valid values: {}", valid.join(", "))
    })
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    s.parse().map_err(|_| {
        let valid: Vec<&str> = Arch::ALL.iter().map(|a| a.name()).collect();
        format!("unknown backbone `{s}`; valid values: {}", valid.join(", "))
    })
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    match s.to_ascii_lowercase().as_str() {
        "ed" => Ok(Metric::Ed),
        "dtw" => Ok(Metric::Dtw),
        _ => Err(format!("unknown metric `{s}`; valid values: ed, dtw")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Split(a) => commands::split(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Finetune(a) => commands::finetune(&a),
        Command::Baseline(a) => commands::baseline(&a),
        Command::Report(a) => report::run(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
