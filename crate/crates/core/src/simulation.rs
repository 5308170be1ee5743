//! Seeded Monte Carlo studies of estimator bias.
//!
//! Data are generated as `y = f(x, θ₀)(1 + σε)` with standard normal ε.
//! Each (σ, sampling unit) pair owns an independent ChaCha stream keyed by
//! `(master_seed, σ-index)` with the unit index as stream id, and results are
//! reduced in unit order, so a study is bit-reproducible regardless of how
//! many threads run it.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{bias_from_bundle, cov_ml_exact_from_bundle, cov_order2_from_bundle};
use crate::equivalent_dose::{
    beta1_from_gamma, fit_two_curves, gamma_bias_se, joint_bias_cov, solve_gamma, FitMode,
    PartialBleachModel,
};
use crate::error::{Error, Result};
use crate::estimators::{fit, FitOptions, Method, StartPoint};
use crate::model::{eval_f, Dataset, JacobianBundle, ModelFunction, ModelRegistry, ModelSpec};

/// Unbleached dose grid used when none is configured. The original study's
/// dose levels were not published; this grid is a stand-in.
pub const DEFAULT_X1: [f64; 16] = [
    0.0, 0.0, 50.0, 50.0, 100.0, 100.0, 200.0, 200.0, 400.0, 400.0, 600.0, 600.0, 800.0, 800.0,
    1000.0, 1000.0,
];
/// Bleached dose grid used when none is configured (stand-in, see [`DEFAULT_X1`]).
pub const DEFAULT_X2: [f64; 13] = [
    0.0, 0.0, 50.0, 100.0, 100.0, 200.0, 200.0, 400.0, 400.0, 600.0, 600.0, 800.0, 1000.0,
];
pub const BLEACH_ALPHA: [f64; 3] = [142853.0, 123.182, 393.065];
pub const BLEACH_BETA2: f64 = 192.547;
pub const BLEACH_BETA3: f64 = 756.620;
pub const BLEACH_GAMMA: f64 = -87.45;

pub const MAX_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimModel {
    /// Two saturating-exponential curves; `x1` and `x2` are the unbleached and
    /// bleached grids and θ₀ has six entries.
    PartialBleach,
    /// One curve from the model registry, observed on `x1`.
    SingleCurve(ModelSpec),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStart {
    /// Start every fit at θ₀.
    #[default]
    Truth,
    Auto,
}

fn yes() -> bool {
    true
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimDesign {
    pub model: SimModel,
    pub x1: Vec<f64>,
    #[serde(default)]
    pub x2: Vec<f64>,
    pub theta0: Vec<f64>,
    pub sigma_grid: Vec<f64>,
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default = "yes")]
    pub reject_nonpositive: bool,
    /// Draw replicates in pairs `(ε, −ε)`. R must then be even, and a pair
    /// with a rejected or failed member is dropped whole.
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default)]
    pub start: SimStart,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    /// Solver settings; the starting point comes from `start`.
    #[serde(default)]
    pub fit: FitOptions,
}

impl SimDesign {
    /// The partial-bleach study with the published curve parameters on the
    /// default dose grids, σ ∈ {0.01, …, 0.06}.
    pub fn bleach_default(replicates: usize, master_seed: u64) -> Result<Self> {
        let beta1 = beta1_from_gamma(&BLEACH_ALPHA, BLEACH_BETA2, BLEACH_BETA3, BLEACH_GAMMA)?;
        Ok(Self {
            model: SimModel::PartialBleach,
            x1: DEFAULT_X1.to_vec(),
            x2: DEFAULT_X2.to_vec(),
            theta0: vec![
                BLEACH_ALPHA[0],
                BLEACH_ALPHA[1],
                BLEACH_ALPHA[2],
                beta1,
                BLEACH_BETA2,
                BLEACH_BETA3,
            ],
            sigma_grid: vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06],
            replicates,
            master_seed,
            reject_nonpositive: true,
            antithetic: true,
            start: SimStart::Truth,
            methods: all_methods(),
            fit: FitOptions::default(),
        })
    }

    pub fn single_curve(
        spec: ModelSpec,
        x: Vec<f64>,
        theta0: Vec<f64>,
        sigma_grid: Vec<f64>,
        replicates: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            model: SimModel::SingleCurve(spec),
            x1: x,
            x2: Vec::new(),
            theta0,
            sigma_grid,
            replicates,
            master_seed,
            reject_nonpositive: true,
            antithetic: false,
            start: SimStart::Truth,
            methods: all_methods(),
            fit: FitOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Invalid("replicates must be at least 1".into()));
        }
        if self.antithetic && !self.replicates.is_multiple_of(2) {
            return Err(Error::Invalid(
                "antithetic sampling needs an even number of replicates".into(),
            ));
        }
        if let Some(s) = self
            .sigma_grid
            .iter()
            .find(|s| !(0.0..=MAX_SIGMA).contains(*s))
        {
            return Err(Error::Invalid(format!(
                "sigma {s} outside [0, {MAX_SIGMA}]"
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Invalid("no methods requested".into()));
        }
        if self.x1.is_empty() || self.x1.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid(
                "x1 must be a non-empty list of finite doses".into(),
            ));
        }
        if self.theta0.iter().any(|t| !t.is_finite()) {
            return Err(Error::Invalid("theta0 must be finite".into()));
        }
        match &self.model {
            SimModel::PartialBleach => {
                if self.x2.is_empty() || self.x2.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Invalid(
                        "x2 must be a non-empty list of finite doses".into(),
                    ));
                }
                if self.theta0.len() != PartialBleachModel::N_PARAMS {
                    return Err(Error::Dimension {
                        expected: PartialBleachModel::N_PARAMS,
                        got: self.theta0.len(),
                    });
                }
            }
            SimModel::SingleCurve(_) => {
                if !self.x2.is_empty() {
                    return Err(Error::Invalid(
                        "x2 is only used by partial-bleach designs".into(),
                    ));
                }
            }
        }
        let mut fit = self.fit.clone();
        fit.start = StartPoint::Auto;
        fit.validate()
    }

    fn units(&self) -> usize {
        if self.antithetic {
            self.replicates / 2
        } else {
            self.replicates
        }
    }
}

/// Random stream for one sampling unit.
pub fn unit_stream(master_seed: u64, sigma_index: usize, unit: usize) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(sigma_index as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(unit as u64);
    rng
}

pub fn draw_errors(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A generated dataset, or the reason it was discarded.
#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Accepted(Dataset),
    /// Some response was ≤ 0 and the design rejects such replicates.
    Rejected {
        index: usize,
        y: f64,
    },
}

/// `y_i = f(x_i, θ₀)(1 + σ ε_i)` for the supplied errors.
pub fn generate_dataset(
    model: &dyn ModelFunction,
    xs: &[f64],
    theta0: &[f64],
    sigma: f64,
    eps: &[f64],
    reject_nonpositive: bool,
) -> Result<Draw> {
    if eps.len() != xs.len() {
        return Err(Error::Dimension {
            expected: xs.len(),
            got: eps.len(),
        });
    }
    let mut ys = Vec::with_capacity(xs.len());
    for (i, (&x, e)) in xs.iter().zip(eps).enumerate() {
        let y = eval_f(model, x, theta0)? * (1.0 + sigma * e);
        if reject_nonpositive && y <= 0.0 {
            return Ok(Draw::Rejected { index: i, y });
        }
        ys.push(y);
    }
    Ok(Draw::Accepted(Dataset::from_xy(xs, &ys)?))
}

/// Per-(method, σ, quantity) Monte Carlo result next to its formula values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryEntry {
    pub method: Method,
    pub sigma: f64,
    pub quantity: String,
    pub truth: f64,
    /// Mean of estimate − truth over usable replicates.
    pub b_s: Option<f64>,
    /// Monte Carlo standard error of `b_s` (from pair means when antithetic).
    pub mc_se: Option<f64>,
    /// Sample standard deviation of the estimates.
    pub sd: Option<f64>,
    /// Order-σ² formula bias at θ₀.
    pub b_t: f64,
    /// Formula standard error at θ₀.
    pub se_t: f64,
    pub r_effective: usize,
    pub failure_count: usize,
    pub rejected_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub replicates: usize,
    pub master_seed: u64,
    pub antithetic: bool,
    pub sigma_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub quantities: Vec<String>,
    pub truth: Vec<f64>,
    pub entries: Vec<SummaryEntry>,
}

impl SimSummary {
    pub fn entry(&self, method: Method, sigma: f64, quantity: &str) -> Option<&SummaryEntry> {
        self.entries
            .iter()
            .find(|e| e.method == method && e.sigma == sigma && e.quantity == quantity)
    }
}

enum Study {
    Single(Arc<dyn ModelFunction>),
    Bleach,
}

/// Outcome of one simulated dataset (or dataset pair, for two curves).
enum Member {
    Rejected,
    /// Per requested method: the estimated quantities, or `None` on failure.
    Fitted(Vec<Option<Vec<f64>>>),
}

/// Runs a study whose single-curve model comes from the built-in registry.
pub fn run_study(design: &SimDesign) -> Result<SimSummary> {
    let study = match &design.model {
        SimModel::PartialBleach => Study::Bleach,
        SimModel::SingleCurve(spec) => Study::Single(ModelRegistry::builtin().create(spec)?),
    };
    run(design, study)
}

/// Runs a single-curve study with a caller-supplied model; the design's model
/// spec is ignored.
pub fn run_study_with_model(
    design: &SimDesign,
    model: Arc<dyn ModelFunction>,
) -> Result<SimSummary> {
    run(design, Study::Single(model))
}

fn run(design: &SimDesign, study: Study) -> Result<SimSummary> {
    design.validate()?;
    let (quantities, truth) = match &study {
        Study::Single(model) => {
            if design.theta0.len() != model.n_params() {
                return Err(Error::Dimension {
                    expected: model.n_params(),
                    got: design.theta0.len(),
                });
            }
            (model.param_names(), design.theta0.clone())
        }
        Study::Bleach => {
            let gamma0 = solve_gamma(&PartialBleachModel, &design.theta0, None)?.gamma;
            let mut names: Vec<String> = PartialBleachModel
                .param_names()
                .iter()
                .map(|s| s.to_string())
                .collect();
            names.push("gamma".into());
            let mut truth = design.theta0.clone();
            truth.push(gamma0);
            (names, truth)
        }
    };

    let mut entries = Vec::new();
    for (si, &sigma) in design.sigma_grid.iter().enumerate() {
        log::info!("sigma = {sigma}: {} replicates", design.replicates);
        let formulas = design
            .methods
            .iter()
            .map(|&m| formula_values(design, &study, m, sigma))
            .collect::<Result<Vec<_>>>()?;
        let units: Vec<Vec<Member>> = (0..design.units())
            .into_par_iter()
            .map(|u| simulate_unit(design, &study, si, sigma, u))
            .collect::<Result<Vec<_>>>()?;
        for (mi, &method) in design.methods.iter().enumerate() {
            entries.extend(aggregate(
                design,
                &units,
                mi,
                method,
                sigma,
                &quantities,
                &truth,
                &formulas[mi],
            ));
        }
    }
    Ok(SimSummary {
        replicates: design.replicates,
        master_seed: design.master_seed,
        antithetic: design.antithetic,
        sigma_grid: design.sigma_grid.clone(),
        methods: design.methods.clone(),
        quantities,
        truth,
        entries,
    })
}

/// `(B_T, se_T)` per quantity at θ₀.
fn formula_values(
    design: &SimDesign,
    study: &Study,
    method: Method,
    sigma: f64,
) -> Result<Vec<(f64, f64)>> {
    let theta = &design.theta0;
    match study {
        Study::Single(model) => {
            let ys = design
                .x1
                .iter()
                .map(|&x| eval_f(model.as_ref(), x, theta))
                .collect::<Result<Vec<_>>>()?;
            let bundle =
                JacobianBundle::build(model.as_ref(), &Dataset::from_xy(&design.x1, &ys)?, theta)?;
            let bias = bias_from_bundle(method, &bundle, sigma);
            let cov = match method {
                Method::Ml => cov_ml_exact_from_bundle(&bundle, sigma)?,
                _ => cov_order2_from_bundle(&bundle, sigma),
            };
            Ok((0..theta.len())
                .map(|k| (bias[k], cov[(k, k)].sqrt()))
                .collect())
        }
        Study::Bleach => {
            let mode = FitMode::default_for(method);
            let model = PartialBleachModel;
            let (bias, cov) = joint_bias_cov(
                &model,
                &design.x1,
                &design.x2,
                theta,
                [sigma, sigma],
                method,
                mode,
            )?;
            let dose = gamma_bias_se(&model, &design.x1, &design.x2, theta, sigma, method, mode)?;
            let mut out: Vec<(f64, f64)> = (0..theta.len())
                .map(|k| (bias[k], cov[(k, k)].sqrt()))
                .collect();
            out.push((dose.bias, dose.se));
            Ok(out)
        }
    }
}

fn fit_options(design: &SimDesign) -> FitOptions {
    let start = match design.start {
        SimStart::Truth => StartPoint::Given(design.theta0.clone()),
        SimStart::Auto => StartPoint::Auto,
    };
    FitOptions {
        start,
        ..design.fit.clone()
    }
}

fn simulate_unit(
    design: &SimDesign,
    study: &Study,
    sigma_index: usize,
    sigma: f64,
    unit: usize,
) -> Result<Vec<Member>> {
    let mut rng = unit_stream(design.master_seed, sigma_index, unit);
    let n_total = design.x1.len() + design.x2.len();
    let eps = draw_errors(&mut rng, n_total);
    let signs: &[f64] = if design.antithetic {
        &[1.0, -1.0]
    } else {
        &[1.0]
    };

    let mut draws = Vec::with_capacity(signs.len());
    for &s in signs {
        let e: Vec<f64> = eps.iter().map(|v| s * v).collect();
        draws.push(generate(design, study, sigma, &e)?);
    }
    if draws.iter().any(|d| d.is_none()) {
        return Ok(signs.iter().map(|_| Member::Rejected).collect());
    }
    let opts = fit_options(design);
    Ok(draws
        .into_iter()
        .flatten()
        .map(|data| {
            Member::Fitted(
                design
                    .methods
                    .iter()
                    .map(|&m| estimate(study, &data, m, &opts))
                    .collect(),
            )
        })
        .collect())
}

/// One or two datasets, or `None` when rejected.
fn generate(
    design: &SimDesign,
    study: &Study,
    sigma: f64,
    eps: &[f64],
) -> Result<Option<Vec<Dataset>>> {
    let parts: Vec<(&dyn ModelFunction, &[f64], &[f64], &[f64])> = match study {
        Study::Single(model) => vec![(model.as_ref(), &design.x1, &design.theta0, eps)],
        Study::Bleach => {
            let curve = PartialBleachModel.curve();
            let (a, b) = design.theta0.split_at(3);
            let (e1, e2) = eps.split_at(design.x1.len());
            vec![(curve, &design.x1, a, e1), (curve, &design.x2, b, e2)]
        }
    };
    let mut out = Vec::with_capacity(parts.len());
    for (model, xs, theta, e) in parts {
        match generate_dataset(model, xs, theta, sigma, e, design.reject_nonpositive)? {
            Draw::Accepted(d) => out.push(d),
            Draw::Rejected { .. } => return Ok(None),
        }
    }
    Ok(Some(out))
}

fn estimate(
    study: &Study,
    data: &[Dataset],
    method: Method,
    opts: &FitOptions,
) -> Option<Vec<f64>> {
    match study {
        Study::Single(model) => match fit(method, model.as_ref(), &data[0], opts) {
            Ok(r) if r.converged => Some(r.theta_hat.into_vec()),
            Ok(_) => None,
            Err(e) => {
                log::debug!("{method} fit failed: {e}");
                None
            }
        },
        Study::Bleach => {
            let mode = FitMode::default_for(method);
            let r =
                match fit_two_curves(&PartialBleachModel, &data[0], &data[1], method, mode, opts) {
                    Ok(r) if r.converged => r,
                    Ok(_) => return None,
                    Err(e) => {
                        log::debug!("{method} fit failed: {e}");
                        return None;
                    }
                };
            let gamma = solve_gamma(&PartialBleachModel, &r.theta_hat, None)
                .ok()?
                .gamma;
            let mut q = r.theta_hat;
            q.push(gamma);
            Some(q)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn aggregate(
    design: &SimDesign,
    units: &[Vec<Member>],
    method_index: usize,
    method: Method,
    sigma: f64,
    quantities: &[String],
    truth: &[f64],
    formulas: &[(f64, f64)],
) -> Vec<SummaryEntry> {
    let mut rejected = 0;
    let mut failed = 0;
    // deviations from truth, one inner vector per usable unit
    let mut usable: Vec<Vec<DVector<f64>>> = Vec::new();
    let truth_v = DVector::from_column_slice(truth);
    for unit in units {
        if unit.iter().any(|m| matches!(m, Member::Rejected)) {
            rejected += unit.len();
            continue;
        }
        let fits: Vec<Option<&Vec<f64>>> = unit
            .iter()
            .map(|m| match m {
                Member::Fitted(per_method) => per_method[method_index].as_ref(),
                Member::Rejected => unreachable!(),
            })
            .collect();
        if fits.iter().any(|f| f.is_none()) {
            failed += unit.len();
            continue;
        }
        usable.push(
            fits.into_iter()
                .flatten()
                .map(|q| DVector::from_column_slice(q) - &truth_v)
                .collect(),
        );
    }
    let r_effective = usable.iter().map(|u| u.len()).sum::<usize>();
    debug_assert_eq!(r_effective + failed + rejected, design.replicates);

    quantities
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let devs: Vec<f64> = usable.iter().flatten().map(|d| d[k]).collect();
            let unit_means: Vec<f64> = usable
                .iter()
                .map(|u| u.iter().map(|d| d[k]).sum::<f64>() / u.len() as f64)
                .collect();
            let b_s = mean(&devs);
            let sd = sample_sd(&devs);
            let mc_se = sample_sd(&unit_means).map(|s| s / (unit_means.len() as f64).sqrt());
            SummaryEntry {
                method,
                sigma,
                quantity: name.clone(),
                truth: truth[k],
                b_s,
                mc_se,
                sd,
                b_t: formulas[k].0,
                se_t: formulas[k].1,
                r_effective,
                failure_count: failed,
                rejected_count: rejected,
            }
        })
        .collect()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return (v.len() == 1).then_some(0.0);
    }
    let m = mean(v)?;
    let ss: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (v.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasCell {
    pub b_t: f64,
    pub b_s: Option<f64>,
    pub mc_se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub sigma: f64,
    pub cells: Vec<BiasCell>,
}

/// Formula versus simulated bias of one quantity: one row per σ, one
/// `(B_T, B_s)` pair per method.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasTable {
    pub quantity: String,
    pub methods: Vec<Method>,
    pub rows: Vec<BiasRow>,
}

pub fn compare_bias_table(summary: &SimSummary, quantity: &str) -> Result<BiasTable> {
    if !summary.quantities.iter().any(|q| q == quantity) {
        return Err(Error::Invalid(format!(
            "unknown quantity `{quantity}`; expected one of {:?}",
            summary.quantities
        )));
    }
    let rows = summary
        .sigma_grid
        .iter()
        .map(|&sigma| BiasRow {
            sigma,
            cells: summary
                .methods
                .iter()
                .map(|&m| {
                    let e = summary
                        .entry(m, sigma, quantity)
                        .expect("entry for every cell");
                    BiasCell {
                        b_t: e.b_t,
                        b_s: e.b_s,
                        mc_se: e.mc_se,
                    }
                })
                .collect(),
        })
        .collect();
    Ok(BiasTable {
        quantity: quantity.to_string(),
        methods: summary.methods.clone(),
        rows,
    })
}

impl BiasTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Bias of {}: formula (B_T) vs simulation (B_s)",
            self.quantity
        );
        let _ = write!(out, "{:>8}", "sigma");
        for m in &self.methods {
            let _ = write!(
                out,
                "{:>12}{:>12}",
                format!("{} B_T", m.label()),
                format!("{} B_s", m.label())
            );
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:>8.3}", row.sigma);
            for c in &row.cells {
                let b_s = c
                    .b_s
                    .map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
                let _ = write!(out, "{:>12.4}{:>12}", c.b_t, b_s);
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_only_on_their_key() {
        let a = draw_errors(&mut unit_stream(1, 2, 3), 5);
        let b = draw_errors(&mut unit_stream(1, 2, 3), 5);
        assert_eq!(a, b);
        assert_ne!(a, draw_errors(&mut unit_stream(1, 2, 4), 5));
        assert_ne!(a, draw_errors(&mut unit_stream(1, 3, 3), 5));
        assert_ne!(a, draw_errors(&mut unit_stream(2, 2, 3), 5));
    }

    #[test]
    fn sd_edge_cases() {
        assert_eq!(sample_sd(&[]), None);
        assert_eq!(sample_sd(&[4.0]), Some(0.0));
        assert_eq!(sample_sd(&[1.0, 3.0]), Some(2f64.sqrt()));
    }

    #[test]
    fn design_validation() {
        let mut d = SimDesign::bleach_default(10, 1).unwrap();
        assert!(d.validate().is_ok());
        d.replicates = 9;
        assert!(d.validate().is_err());
        d.replicates = 10;
        d.sigma_grid.push(0.7);
        assert!(d.validate().is_err());
    }
}
