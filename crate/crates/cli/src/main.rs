mod cmd;
mod docs;
mod exit;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use haan_core::calibrate::AnchorPolicy;
use haan_core::datapath::NormKind;
use haan_core::numerics::NumericFormat;

/// Seed used when neither `--seed` nor `HAAN_SEED` is given.
pub const DEFAULT_SEED: u64 = 0x4841_414e;

#[derive(Parser, Debug)]
#[command(name = "haan", version, about = "Approximate normalization toolkit and accelerator simulator")]
struct Cli {
    /// Seed for generated data (overrides HAAN_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an ISD-skip predictor from activation traces.
    Calibrate(CalibrateArgs),
    /// Run approximate normalization and report error against the FP64 reference.
    Norm(NormArgs),
    /// Simulate the accelerator on a trace.
    Sim(SimArgs),
    /// Simulate a grid of accelerator configurations.
    Sweep(SweepArgs),
    /// Run the built-in invariant checks.
    Verify(VerifyArgs),
    /// Write a synthetic activation trace.
    GenTrace(GenTraceArgs),
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// HAANTRC1 trace files.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    /// Window gap M.
    #[arg(long, default_value_t = 10)]
    pub min_gap: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Reject the predictor if the best correlation is above this.
    #[arg(long, default_value_t = haan_core::calibrate::DEFAULT_THRESHOLD, allow_hyphen_values = true)]
    pub threshold: f64,
    #[arg(long, default_value = "layernorm")]
    pub kind: NormKind,
    /// Also scan windows wider than the gap.
    #[arg(long)]
    pub wide: bool,
    #[arg(long, value_enum, default_value_t = Anchor::Live)]
    pub anchor: Anchor,
    /// Also write the log-ISD table as CSV.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    Live,
    CalibrationMean,
}

impl From<Anchor> for AnchorPolicy {
    fn from(a: Anchor) -> Self {
        match a {
            Anchor::Live => AnchorPolicy::Live,
            Anchor::CalibrationMean => AnchorPolicy::CalibrationMean,
        }
    }
}

#[derive(Args, Debug)]
pub struct NormArgs {
    pub trace: PathBuf,
    #[arg(long, default_value = "fp32")]
    pub format: NumericFormat,
    /// Subsampling length (defaults to the full width).
    #[arg(long)]
    pub nsub: Option<usize>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    /// Defaults to the predictor's kind, else layernorm.
    #[arg(long)]
    pub kind: Option<NormKind>,
    /// Take the LayerNorm mean over all elements even when subsampling.
    #[arg(long)]
    pub full_mean: bool,
    #[arg(long)]
    pub newton_iters: Option<u32>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    pub trace: PathBuf,
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration: llama-7b, opt-2.7b or gpt2-1.5b.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-cycle event log (CSV).
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    pub trace: PathBuf,
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub predictor: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenTraceArgs {
    /// Generator spec (TOML); overrides the shape flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Log-linear tail as `start,end,slope`.
    #[arg(long, default_value = "40,60,-0.1", allow_hyphen_values = true)]
    pub tail: String,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Plant exact per-vector deviations (no sampling noise).
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value = "synthetic")]
    pub model_id: String,
}

fn seed(flag: Option<u64>) -> anyhow::Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var("HAAN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| exit::usage(format!("HAAN_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = seed(cli.seed)?;
    match cli.command {
        Command::Calibrate(a) => cmd::calibrate::run(&a),
        Command::Norm(a) => cmd::norm::run(&a),
        Command::Sim(a) => cmd::sim::run(&a),
        Command::Sweep(a) => cmd::sweep::run(&a),
        Command::Verify(a) => cmd::verify::run(&a, seed),
        Command::GenTrace(a) => cmd::gen_trace::run(&a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::ExitKind::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::classify(&e) as u8)
        }
    }
}
