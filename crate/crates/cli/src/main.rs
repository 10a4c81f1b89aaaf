//! `hmer`: render ink, synthesize data, train, decode and score.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::parse_pair;

#[derive(Parser, Debug)]
#[command(name = "hmer", version, about = "Handwritten math recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize a directory of InkML files into PGM images and an index.
    Render(RenderArgs),
    /// Generate a synthetic rendered dataset with its vocabulary.
    Synth(SynthArgs),
    /// Train a model on an indexed dataset.
    Train(TrainArgs),
    /// Decode indexed images with one or more checkpoints.
    Infer(InferArgs),
    /// Score a prediction file against an index.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every op and a tiny model.
    Gradcheck(GradcheckArgs),
    /// Run every invariant suite.
    Selftest(SelftestArgs),
}

/// Flags shared by commands that take run configuration.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `prefix.key=value` override, repeatable.
    #[arg(long = "set", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    /// Reduced architecture and training preset.
    #[arg(long)]
    toy: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Directory of `.inkml` files (not searched recursively).
    inkml_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Record unreadable files in the failure manifest and continue.
    #[arg(long)]
    skip_bad: bool,
    /// Ink height in pixels.
    #[arg(long, default_value_t = 128)]
    height: usize,
    /// Reject truths that do not tokenize under this vocabulary.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grammar nesting depth.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Ink height in pixels.
    #[arg(long, default_value_t = 32)]
    height: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset index (`path<TAB>truth` lines).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output directory for checkpoints and the log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Wall-clock limit in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Held-out index; when given, the checkpoint with the best exact
    /// match on it is kept instead of the lowest training loss.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct SearchFlags {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// `joint`, `l2r` or `r2l`.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Checkpoint file; repeat to decode with an ensemble.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Index of images to decode; truths are ignored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Prediction file (`id<TAB>markup` lines).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    search: SearchFlags,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Prediction file written by `infer`.
    #[arg(long)]
    pred: PathBuf,
    /// Index holding the truths.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Also write the `key=value` metrics here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of random seeds per check.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Fewer seeds and cases.
    #[arg(long)]
    quick: bool,
}

/// An error that carries its own exit status.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

/// 1 for configuration mistakes, 3 for numeric failures, 2 for data, I/O
/// and checkpoint problems.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<hmer_core::Error>() {
            return match e {
                hmer_core::Error::Config(_) => 1,
                hmer_core::Error::NonFinite(_) | hmer_core::Error::Numerics(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("BTTR_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Exit { code: 1, message: format!("BTTR_THREADS={v:?} is not a count") })?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Render(a) => commands::render(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Selftest(a) => commands::selftest(&a),
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
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
