//! `propfit fit`: estimates with Table-style bias and standard-error rows.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use propfit_core::asymptotics::{
    bias_from_bundle, cov_ml_exact_from_bundle, cov_order2_from_bundle,
};
use propfit_core::equivalent_dose::{
    fit_two_curves, gamma_bias_se_at, joint_bias_cov, solve_gamma, FitMode, PartialBleachModel,
};
use propfit_core::estimators::{fit, FitOptions, Method};
use propfit_core::model::{JacobianBundle, ModelFunction, ModelRegistry, ModelSpec};
use serde::Serialize;

use crate::args::FitArgs;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::input::InputTable;

pub const DEFAULT_MODEL: &str = "saturating_exponential";

/// One parameter's four report rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub name: String,
    pub estimate: f64,
    pub bias: f64,
    pub std_error: f64,
    /// `100 · bias / sqrt(bias² + se²)`
    pub bias_over_rmse_pct: f64,
}

impl ParamRow {
    fn new(name: impl Into<String>, estimate: f64, bias: f64, std_error: f64) -> Self {
        let rmse = bias.hypot(std_error);
        Self {
            name: name.into(),
            estimate,
            bias,
            std_error,
            bias_over_rmse_pct: if rmse > 0.0 { 100.0 * bias / rmse } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<FitMode>,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    /// ML σ̂ for ML, the unbiased σ̂ otherwise; one per curve.
    pub sigma_hat: Vec<f64>,
    pub params: Vec<ParamRow>,
    /// Equivalent dose `|γ̂|` for two-curve data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalent_dose: Option<ParamRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_hat: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailedMethod {
    pub method: Method,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub model: String,
    pub curves: Vec<String>,
    pub n_obs: Vec<usize>,
    pub results: Vec<MethodReport>,
    pub failures: Vec<FailedMethod>,
}

impl FitReport {
    /// True when no requested method produced a converged fit.
    pub fn all_failed(&self) -> bool {
        !self.results.iter().any(|r| r.converged)
    }
}

pub fn run_fit(args: &FitArgs, config: &RunConfig) -> Result<FitReport> {
    let table = InputTable::from_path(&args.data)?;
    let methods = match args.method {
        Some(m) => m.methods(),
        None => config
            .methods
            .clone()
            .unwrap_or_else(|| Method::ALL.to_vec()),
    };
    if methods.is_empty() {
        return Err(CliError::Input("no methods requested".into()));
    }
    let mode = args.mode.map(FitMode::from).or(config.fit_mode);
    let labels = table.labels();
    match labels.len() {
        1 => {
            let spec = match (&args.model, &config.model) {
                (Some(name), _) => ModelSpec::named(name.clone()),
                (None, Some(spec)) => spec.clone(),
                (None, None) => ModelSpec::named(DEFAULT_MODEL),
            };
            if mode.is_some() {
                log::warn!("--mode only applies to two-curve data; ignored");
            }
            let model = ModelRegistry::builtin().create(&spec)?;
            fit_single(model.as_ref(), &table, &labels[0], &methods, &config.fit)
        }
        2 => {
            if args.model.is_some() || config.model.is_some() {
                log::warn!("two-curve data always use the partial-bleach model; `model` ignored");
            }
            fit_pair(&table, &labels, &methods, mode, config)
        }
        n => Err(CliError::Input(format!(
            "expected one or two curves in the data, found {n}: {labels:?}"
        ))),
    }
}

fn fit_single(
    model: &dyn ModelFunction,
    table: &InputTable,
    label: &str,
    methods: &[Method],
    opts: &FitOptions,
) -> Result<FitReport> {
    let data = table.dataset(label)?;
    let names = model.param_names();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &method in methods {
        let outcome = fit(method, model, &data, opts).and_then(|r| {
            let bundle = JacobianBundle::build(model, &data, r.theta_hat.as_slice())?;
            let bias = bias_from_bundle(method, &bundle, r.sigma_hat);
            let cov = match method {
                Method::Ml => cov_ml_exact_from_bundle(&bundle, r.sigma_hat)?,
                _ => cov_order2_from_bundle(&bundle, r.sigma_hat),
            };
            Ok(MethodReport {
                method,
                mode: None,
                converged: r.converged,
                iterations: r.iterations,
                residual_norm: r.residual_norm,
                sigma_hat: vec![r.sigma_hat],
                params: param_rows(&names, r.theta_hat.as_slice(), &bias, &cov),
                equivalent_dose: None,
                gamma_hat: None,
                notes: Vec::new(),
            })
        });
        match outcome {
            Ok(rep) => results.push(rep),
            Err(e) => failures.push(FailedMethod {
                method,
                error: e.to_string(),
            }),
        }
    }
    Ok(FitReport {
        model: model.name().to_string(),
        curves: vec![label.to_string()],
        n_obs: vec![data.len()],
        results,
        failures,
    })
}

fn param_rows(
    names: &[String],
    theta: &[f64],
    bias: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Vec<ParamRow> {
    names
        .iter()
        .enumerate()
        .map(|(k, n)| ParamRow::new(n.clone(), theta[k], bias[k], cov[(k, k)].max(0.0).sqrt()))
        .collect()
}

fn fit_pair(
    table: &InputTable,
    labels: &[String],
    methods: &[Method],
    mode: Option<FitMode>,
    config: &RunConfig,
) -> Result<FitReport> {
    let model = PartialBleachModel;
    let d1 = table.dataset(&labels[0])?;
    let d2 = table.dataset(&labels[1])?;
    let (x1, x2) = (d1.xs(), d2.xs());
    let names: Vec<String> = model.param_names().iter().map(|s| s.to_string()).collect();
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &method in methods {
        let mode = mode.unwrap_or(FitMode::default_for(method));
        let outcome = fit_two_curves(&model, &d1, &d2, method, mode, &config.fit).and_then(|r| {
            let (bias, cov) =
                joint_bias_cov(&model, &x1, &x2, &r.theta_hat, r.sigma_hat, method, mode)?;
            let mut notes = Vec::new();
            let (dose, gamma_hat) = match solve_gamma(&model, &r.theta_hat, config.gamma_bracket) {
                Ok(root) => {
                    let d = gamma_bias_se_at(
                        &model,
                        &x1,
                        &x2,
                        &r.theta_hat,
                        r.sigma_hat,
                        method,
                        mode,
                        root,
                    )?;
                    // the dose is |γ|; its bias flips sign with γ
                    let sign = d.gamma_hat.signum();
                    (
                        Some(ParamRow::new(
                            "equivalent_dose",
                            d.gamma_hat.abs(),
                            sign * d.bias,
                            d.se,
                        )),
                        Some(d.gamma_hat),
                    )
                }
                Err(e) => {
                    notes.push(format!("equivalent dose unavailable: {e}"));
                    (None, None)
                }
            };
            Ok(MethodReport {
                method,
                mode: Some(mode),
                converged: r.converged,
                iterations: r.iterations,
                residual_norm: r.residual_norm,
                sigma_hat: r.sigma_hat.to_vec(),
                params: param_rows(&names, &r.theta_hat, &bias, &cov),
                equivalent_dose: dose,
                gamma_hat,
                notes,
            })
        });
        match outcome {
            Ok(rep) => results.push(rep),
            Err(e) => failures.push(FailedMethod {
                method,
                error: e.to_string(),
            }),
        }
    }
    Ok(FitReport {
        model: "partial_bleach".into(),
        curves: labels.to_vec(),
        n_obs: vec![d1.len(), d2.len()],
        results,
        failures,
    })
}

/// Table-style text: one block per method, parameters as columns.
pub fn render_fit(report: &FitReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "Model: {}  curves: {}  n = {:?}",
        report.model,
        report.curves.join(", "),
        report.n_obs
    );
    for r in &report.results {
        let mode = r.mode.map(|m| format!(" ({m})")).unwrap_or_default();
        let status = if r.converged {
            format!("converged in {} iterations", r.iterations)
        } else {
            format!("NOT converged after {} iterations", r.iterations)
        };
        let _ = writeln!(out, "\n{}{mode}: {status}", r.method.label());
        let cols: Vec<&ParamRow> = r.params.iter().chain(r.equivalent_dose.as_ref()).collect();
        let _ = write!(out, "{:<16}", "");
        for c in &cols {
            let _ = write!(out, "{:>16}", c.name);
        }
        out.push('\n');
        let rows: [(&str, fn(&ParamRow) -> String); 4] = [
            ("Estimate", |p| format!("{:.3}", p.estimate)),
            ("bias", |p| format!("{:.3}", p.bias)),
            ("std.error", |p| format!("{:.3}", p.std_error)),
            ("bias/√MSE×100%", |p| {
                format!("{:.2}", p.bias_over_rmse_pct)
            }),
        ];
        for (label, cell) in rows {
            let _ = write!(out, "{label:<16}");
            for c in &cols {
                let _ = write!(out, "{:>16}", cell(c));
            }
            out.push('\n');
        }
        let sigmas: Vec<String> = r.sigma_hat.iter().map(|s| format!("{s:.3}")).collect();
        let _ = writeln!(out, "{:<16}{:>16}", "σ Estimate", sigmas.join(" / "));
        for n in &r.notes {
            let _ = writeln!(out, "note: {n}");
        }
    }
    for f in &report.failures {
        let _ = writeln!(out, "\n{}: FAILED: {}", f.method.label(), f.error);
    }
    out
}
