//! Command-line front end: ingest corpora, fit scaling models, quantify
//! uncertainty, and run synthetic recovery experiments, each as a
//! reproducible run that records a manifest.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit codes: 0 success, 2 input error, 3 non-convergence,
/// 4 unreliable inference.
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NONCONVERGENCE: u8 = 3;
pub const EXIT_UNRELIABLE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "wordkrill",
    version,
    about = "Poisson text scaling in one or more latent dimensions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a document-feature matrix from raw text or count files.
    Ingest(IngestArgs),
    /// Estimate document positions and feature weights.
    Fit(FitArgs),
    /// Standard errors and intervals for fitted positions.
    Uncertainty(UncertaintyArgs),
    /// Generate a synthetic corpus with known ground truth.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Auto,
    Raw,
    Triplet,
    Mtx,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CountFormat {
    Auto,
    Triplet,
    Mtx,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Joint,
    Conditional,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UncMethod {
    Fisher,
    Bootstrap,
}

#[derive(Args)]
pub struct IngestArgs {
    /// Directory of .txt files, or an existing count file.
    #[arg(long)]
    input: PathBuf,
    /// How to read --input; `auto` infers from the path.
    #[arg(long = "format", value_enum, default_value = "auto")]
    input_format: InputFormat,
    #[arg(long)]
    lowercase: bool,
    /// Replace punctuation with spaces before tokenizing.
    #[arg(long = "strip-punct")]
    strip_punct: bool,
    /// Drop tokens consisting entirely of digits.
    #[arg(long = "strip-numbers")]
    strip_numbers: bool,
    /// File with one stop word per line.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Drop features appearing in fewer documents than this.
    #[arg(long, default_value_t = 0)]
    min_doc_count: usize,
    /// Drop features with a smaller corpus-wide count.
    #[arg(long, default_value_t = 0)]
    min_total_count: u64,
    /// Output count file; `.mtx` selects MatrixMarket, else triplet CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    out_format: CountFormat,
}

#[derive(Args)]
pub struct FitArgs {
    #[arg(long)]
    dfm: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: CountFormat,
    /// Number of latent dimensions.
    #[arg(short, long, default_value_t = 1)]
    k: usize,
    /// `conditional` is the alternating-regressions estimator (K = 1 only).
    #[arg(long, value_enum, default_value = "joint")]
    method: Method,
    #[arg(long, default_value_t = 0.05)]
    sig_level: f64,
    /// Override the derived constraint band.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Relative log-likelihood change defining convergence.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sign anchor `DIM:DOC_LOW:DOC_HIGH`, repeatable, one per dimension.
    #[arg(long)]
    anchor: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct UncertaintyArgs {
    #[arg(long)]
    dfm: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    format: CountFormat,
    /// fit.json from a previous `fit` run.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long, value_enum)]
    method: UncMethod,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = wordkrill::DEFAULT_BOOTSTRAP_REPS)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    sig_level: f64,
    /// Iteration cap for bootstrap refits.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 50)]
    docs: usize,
    #[arg(long, default_value_t = 500)]
    features: usize,
    #[arg(short, long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha_sd: f64,
    #[arg(long, default_value_t = 0.0)]
    psi_mean: f64,
    #[arg(long, default_value_t = 1.0)]
    psi_sd: f64,
    #[arg(long, default_value_t = 0.3)]
    beta_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chain a fit on the generated corpus and report recovery.
    #[arg(long)]
    fit: bool,
    /// Feature guard applied before the chained fit.
    #[arg(long, default_value_t = 2)]
    min_doc_count: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Errors carrying their process exit code. Output files named in the
/// contract are written before a nonzero exit wherever possible.
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl From<wordkrill::Error> for CliError {
    fn from(e: wordkrill::Error) -> Self {
        CliError::input(e.to_string())
    }
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(args) => commands::ingest::run(args),
        Command::Fit(args) => commands::fit::run(args),
        Command::Uncertainty(args) => commands::uncertainty::run(args),
        Command::Simulate(args) => commands::simulate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// WORDKRILL_THREADS caps internal parallelism; results do not depend on
/// the thread count.
fn init_thread_pool() {
    if let Ok(raw) = std::env::var("WORDKRILL_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
