//! `fip`: dataset generation, pretraining, fine-tuning and inspection.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fip_core::exec::{init_threads, Execution};
use fip_core::fip_train::Mode;
use fip_core::FipError;

/// A problem with the invocation itself: flags, paths or config values.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "fip", version, about = "Finetune-informed multimodal masked autoencoder for modulation classification")]
struct Cli {
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset directory.
    Gen(GenArgs),
    /// Pretrain the masked autoencoder.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier on labeled constellations.
    Finetune(FinetuneArgs),
    /// Accuracy per SNR.
    Eval(EvalArgs),
    /// Export mean-pooled encoder features as CSV.
    Features(FeaturesArgs),
    /// Write input, reference and reconstruction PNGs for one sample.
    Recon(ReconArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Keep class labels in the manifest.
    #[arg(long, conflicts_with = "unlabeled")]
    pub labeled: bool,
    /// Drop class labels (the default).
    #[arg(long)]
    pub unlabeled: bool,
    #[arg(long, default_value_t = -10.0)]
    pub snr_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub snr_max: f64,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated modulation names, e.g. BPSK,QPSK,16QAM. Defaults to all ten.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the checkpoint already in --out.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this global step (the checkpoint can be resumed later).
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON run config; only its `finetune` section and `seed` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train only the classification head.
    #[arg(long)]
    pub head_only: bool,
}

#[derive(Args)]
#[command(allow_negative_numbers = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Per-SNR accuracy CSV.
    #[arg(long)]
    pub csv: PathBuf,
    /// Confusion matrix CSV. Defaults to `<csv stem>_confusion.csv`.
    #[arg(long)]
    pub confusion: Option<PathBuf>,
    /// Evaluate a fixed labeled dataset instead of fresh samples.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub n_per_point: usize,
    /// Comma-separated SNR values in dB. Defaults to -10,-8,...,10.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_grid: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the mask.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: FipError| e.to_string())
}

/// 1 for bad invocations and invalid configs, 2 for everything that fails at run time.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<FipError>() {
        Some(FipError::InvalidArgument(_) | FipError::Config(_)) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        return Err(Usage("--threads must be at least 1".into()).into());
    }
    let exec = if cli.threads > 1 {
        init_threads(cli.threads).map_err(anyhow::Error::msg)?;
        Execution::Parallel
    } else {
        Execution::Sequential
    };
    match cli.command {
        Command::Gen(a) => commands::gen(a, exec),
        Command::Pretrain(a) => commands::pretrain(a, exec),
        Command::Finetune(a) => commands::finetune(a, exec),
        Command::Eval(a) => commands::eval(a, exec),
        Command::Features(a) => commands::features(a, exec),
        Command::Recon(a) => commands::recon(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
