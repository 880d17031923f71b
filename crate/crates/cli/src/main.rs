use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod failure;

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "ordlat", version, about = "Lattice ordered response models: simulate, fit, study, diagnose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a dataset from a builtin design or a JSON specification.
    Simulate(SimulateArgs),
    /// Fit one estimator to a CSV dataset.
    Fit(FitArgs),
    /// Replicated simulation study with per-replication and aggregate tables.
    Montecarlo(MonteCarloArgs),
    /// Identification report for a design or a dataset.
    Diagnose(DiagnoseArgs),
    /// Compare an estimated CDF grid with a reference CDF.
    Metrics(MetricsArgs),
    /// Check a run directory against its manifest and recompute its aggregates.
    Verify(VerifyArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Estimator {
    Parametric,
    GridInversion,
    Kernel,
    Sieve,
}

#[derive(Args, Debug)]
pub struct Source {
    /// Builtin design: semiparam-1..4, twostep-5.1, param-design-1..3.
    #[arg(long, conflicts_with = "config")]
    pub dgp: Option<String>,
    /// JSON design specification.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Defaults to the seed in the specification (0 for builtin designs).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Column mapping; without it covariate columns must be named `x<d>_<name>`.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Estimator::Parametric)]
    pub estimator: Estimator,
    /// Estimator options as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Index coefficients and thresholds (a fit.json or {thresholds, beta}).
    #[arg(long)]
    pub first_stage: Option<PathBuf>,
    /// Overrides the simulation seed of the kernel estimator.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score the estimated CDF against a bivariate normal with this correlation.
    #[arg(long, conflicts_with = "dgp")]
    pub reference_rho: Option<f64>,
    /// Score the estimated CDF against the error law of this builtin design.
    #[arg(long)]
    pub dgp: Option<String>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Parametric designs default to `parametric`, the rest to both
    /// second-step estimators. Repeat to select several.
    #[arg(long, value_enum)]
    pub estimator: Vec<Estimator>,
    /// Estimator options as JSON (fit options, or the two-step configuration).
    #[arg(long = "estimator-config")]
    pub estimator_config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub source: Source,
    /// Dataset CSV for a sample-based report.
    #[arg(long, conflicts_with_all = ["dgp", "config"], requires = "first_stage")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub first_stage: Option<PathBuf>,
    /// Also write report.json and report.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Estimated CDF grid CSV (`e1,e2,value`).
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long, conflicts_with = "dgp", required_unless_present = "dgp")]
    pub reference_rho: Option<f64>,
    #[arg(long)]
    pub dgp: Option<String>,
    /// Write metrics.json here instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Run directory containing manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(failure::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Montecarlo(a) => commands::montecarlo(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::classify(e)
    }
}
