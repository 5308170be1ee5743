use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use propfit_core::equivalent_dose::FitMode;
use propfit_core::estimators::Method;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "propfit",
    version,
    about = "Proportional-error regression: fits, bias reports and Monte Carlo studies"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Worker threads for simulations.
    #[arg(long, global = true, env = "PROPFIT_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    /// Write output here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a CSV data set and report estimates, biases and standard errors.
    Fit(FitArgs),
    /// Run a Monte Carlo bias study.
    Simulate(SimulateArgs),
    /// Run the built-in invariant checks.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with columns curve (optional), x, y.
    #[arg(long, value_name = "PATH")]
    pub data: PathBuf,

    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,

    /// How σ is shared between two curves.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,

    /// Registry model for single-curve data.
    #[arg(long, value_name = "NAME")]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,

    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,

    #[arg(long, value_name = "R")]
    pub replicates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Add a fixture whose analytic gradient is wrong.
    #[arg(long, hide = true)]
    pub inject_wrong_gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Ml,
    Ql,
    Wls,
    Dwls,
    All,
}

impl MethodArg {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Ml => vec![Method::Ml],
            MethodArg::Ql => vec![Method::Ql],
            MethodArg::Wls => vec![Method::Wls],
            MethodArg::Dwls => vec![Method::Dwls],
            MethodArg::All => Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Separate,
    CommonSigma,
}

impl From<ModeArg> for FitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Separate => FitMode::Separate,
            ModeArg::CommonSigma => FitMode::CommonSigma,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Text,
    Json,
    Both,
}
