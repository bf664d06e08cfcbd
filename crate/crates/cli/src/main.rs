//! `satool`: trace generation, stability analysis, calibration, online
//! mask-reuse simulation and the spectral perturbation study.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use satool_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "satool", version, about = "Head-wise control of block-sparse top-p attention on synthetic traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a synthetic denoising trace.
    GenTrace(GenTraceArgs),
    /// Adjacent-step mask similarity and drift statistics.
    Analyze(AnalyzeArgs),
    /// Per-head threshold calibration under a sparsity budget.
    Calibrate(CalibrateArgs),
    /// Simulate temporal mask reuse over a full trajectory.
    Run(RunArgs),
    /// Band-confined velocity perturbation study.
    Perturb(PerturbArgs),
    /// Query/key cache size for drift checks.
    Footprint(FootprintArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GenTraceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    block_size: usize,
    /// Velocity field shape as T,H,W.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [4, 8, 8])]
    velocity_shape: Vec<usize>,
    /// Fix every head's smoothness (overrides the range).
    #[arg(long)]
    kappa: Option<f32>,
    #[arg(long, default_value_t = 0.5)]
    kappa_lo: f32,
    #[arg(long, default_value_t = 0.999)]
    kappa_hi: f32,
    #[arg(long, default_value_t = 1.0)]
    gain_lo: f32,
    #[arg(long, default_value_t = 3.0)]
    gain_hi: f32,
}

#[derive(Args, Debug, Clone, Serialize)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    /// Trace file; repeat for a prompt pool.
    #[arg(long, required = true)]
    trace: Vec<PathBuf>,
    /// Block-level top-p threshold.
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
struct SpectralArgs {
    #[arg(long, default_value_t = 0.5)]
    temporal_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    spatial_frac: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ErrorKind {
    /// Weighted band-energy ratios.
    Fft,
    /// Raw velocity mean squared error.
    Mse,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SolverKind {
    Exact,
    BruteForce,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Trace file; repeat for a prompt pool (head i uses trace i mod P).
    #[arg(long, required = true)]
    trace: Vec<PathBuf>,
    /// Minimum average sparsity, or `shared:TAU` for the sparsity realized
    /// by a shared threshold.
    #[arg(long, default_value = "shared:0.9")]
    budget: String,
    #[arg(long, value_delimiter = ',', default_values_t = [0.85, 0.9, 0.95])]
    taus: Vec<f64>,
    #[arg(long, default_value_t = 4)]
    intervals: usize,
    /// Band weights LL,LH,HL,HH.
    #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = [1.0, 0.5, 0.01, 0.01])]
    weights: Vec<f64>,
    #[arg(long, value_enum, default_value_t = ErrorKind::Fft)]
    error: ErrorKind,
    #[arg(long, value_enum, default_value_t = SolverKind::Exact)]
    solver: SolverKind,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trace: PathBuf,
    /// Calibration table; without it every head uses `--tau`.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    /// Reuse threshold on the pooled L1 drift; `inf` always reuses.
    #[arg(long, default_value_t = 30.0)]
    delta: f64,
    /// Interpret `--delta` per feature dimension (multiplied by head_dim).
    #[arg(long)]
    delta_normalized: bool,
    #[arg(long, default_value_t = 0.1)]
    gate_lo: f64,
    #[arg(long, default_value_t = 0.9)]
    gate_hi: f64,
    #[arg(long)]
    no_gate: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
struct PerturbArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    trace: PathBuf,
    /// Perturbation norm relative to the dense velocity.
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Number of noise seeds derived from `--seed`.
    #[arg(long, default_value_t = 5)]
    num_seeds: usize,
    #[command(flatten)]
    spectral: SpectralArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    FullToken,
    MeanPooled,
    Both,
}

#[derive(Args, Debug, Clone, Serialize)]
struct FootprintArgs {
    /// Optional output directory for a JSON copy.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    layers: u64,
    #[arg(long, default_value_t = 12)]
    heads: u64,
    #[arg(long, default_value_t = 32760)]
    tokens: u64,
    #[arg(long, default_value_t = 128)]
    head_dim: u64,
    /// Bytes per cached scalar (2 for FP16).
    #[arg(long, default_value_t = 2)]
    bytes: u64,
    /// Guidance branches.
    #[arg(long, default_value_t = 2)]
    branches: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
}

#[derive(Args, Debug, Clone, Serialize)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the re-run.
    #[arg(long)]
    out: PathBuf,
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("SATOOL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SATOOL_THREADS={value:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Internal(e.to_string()))
}

fn single_line(text: &str) -> String {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = single_line(&e.to_string());
            eprintln!("error[E_USAGE]: {}", msg.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|_| commands::dispatch(cli.command, &argv[1..])) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), single_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
