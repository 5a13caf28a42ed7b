//! `dida`: generate scenes, train, export attention maps, evaluate grounding
//! and audit gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;
mod config;
mod values;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use values::{Mode, Range, Widths};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<dida_core::Error> for CliError {
    fn from(e: dida_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dida", version, about = "Visual difference attention and the DiDA loss on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: PPM images, PGM masks and a manifest.
    Gen(GenArgs),
    /// Train an encoder with the DiDA and contrastive losses.
    Train(TrainArgs),
    /// Export attention maps and GrabCut seeds for one image.
    Attend(AttendArgs),
    /// Per-scene IoU of binarized attention maps against masks.
    Eval(EvalArgs),
    /// Run every finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// key=value file with defaults for any flag below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    /// Image side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Object count range, e.g. 1..3.
    #[arg(long)]
    objects: Option<Range<usize>>,
    /// Object size range in pixels, e.g. 7..13.
    #[arg(long)]
    sizes: Option<Range<f64>>,
    /// noise or gradient.
    #[arg(long)]
    background: Option<values::Background>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "lambda-dida")]
    lambda_dida: Option<f64>,
    #[arg(long = "lambda-con")]
    lambda_con: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path, rewritten at every evaluation.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<dida_core::train::OptimizerKind>,
    #[arg(long = "eval-interval")]
    eval_interval: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Map scored by the held-out IoU: dot (training map) or threshold.
    #[arg(long = "eval-mode")]
    eval_mode: Option<Mode>,
    /// Conv widths of a fresh encoder, e.g. 8,16,32,32.
    #[arg(long)]
    widths: Option<Widths>,
    #[arg(long = "feature-dim")]
    feature_dim: Option<usize>,
    /// Start from this checkpoint instead of a fresh encoder.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttendArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// 3-channel PPM.
    #[arg(long)]
    image: Option<PathBuf>,
    /// 1-channel PGM saliency mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// threshold or dot.
    #[arg(long)]
    mode: Option<Mode>,
    /// Output prefix; writes PREFIX_raw.pgm, PREFIX_soft.pgm, PREFIX_seeds.pgm.
    #[arg(long)]
    out: Option<String>,
    /// Directory of reference outputs to compare against byte for byte.
    #[arg(long)]
    golden: Option<PathBuf>,
    /// Overwrite the reference outputs in --golden instead of comparing.
    #[arg(long)]
    bless: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Per-scene CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// threshold or dot.
    #[arg(long)]
    mode: Option<Mode>,
    /// Use the ground-truth mask as the map (harness self-test).
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// tiny or small.
    #[arg(long)]
    size: Option<dida_core::gradcheck::CheckSize>,
    /// Tolerance for every finite-difference suite.
    #[arg(long)]
    tol: Option<f64>,
}

fn configure_threads() -> Result<(), CliError> {
    match std::env::var("DIDA_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                dida_core::par::init_threads(n);
                Ok(())
            }
            _ => Err(CliError::Usage(format!("DIDA_THREADS must be a positive integer, got {raw:?}"))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Attend(a) => commands::attend(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
