use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use propfit_core::equivalent_dose::FitMode;
use propfit_core::estimators::{FitOptions, Method};
use propfit_core::model::ModelSpec;
use propfit_core::simulation::SimDesign;
use serde::{Deserialize, Serialize};

use crate::args::OutputFormat;
use crate::error::{CliError, Result};

/// JSON run configuration. Every field is optional; unknown keys are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model for single-curve data (default `saturating_exponential`).
    pub model: Option<ModelSpec>,
    /// Methods to fit (default all four).
    pub methods: Option<Vec<Method>>,
    pub fit: FitOptions,
    /// Study run by `simulate` (default: the partial-bleach design).
    pub simulation: Option<SimDesign>,
    /// Search interval for the curve intersection.
    pub gamma_bracket: Option<(f64, f64)>,
    /// σ sharing for two-curve fits (default: common σ for ML, separate otherwise).
    pub fit_mode: Option<FitMode>,
    pub format: Option<OutputFormat>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
