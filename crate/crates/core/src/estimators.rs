//! The four estimating equations and their solvers.
//!
//! With `r_i = (y_i − f_i)/f_i` and `J_i = ∇f_i / f_i` the equations are
//!
//! * ML:   `σ̂²(θ) Σ J_i − Σ (r_i + r_i²) J_i = 0`, `σ̂²(θ) = n⁻¹ Σ r_i²`
//! * QL:   `Σ r_i J_i = 0`
//! * WLS:  `Σ (r_i + r_i²) J_i = 0`
//! * DWLS: `Σ (y_i − f_i)/y_i² ∇f_i = 0`

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eval_f, eval_grad, Dataset, ModelFunction, ParamVector};
use crate::solver::{fd_jacobian, parameter_scales, solve, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ml,
    Ql,
    Wls,
    Dwls,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ml, Method::Ql, Method::Wls, Method::Dwls];

    pub fn label(self) -> &'static str {
        match self {
            Method::Ml => "ML",
            Method::Ql => "QL",
            Method::Wls => "WLS",
            Method::Dwls => "DWLS",
        }
    }

    /// Whether θ̂ depends on how σ is handled during the fit.
    pub fn equation_involves_sigma(self) -> bool {
        matches!(self, Method::Ml)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Method::Ml),
            "ql" => Ok(Method::Ql),
            "wls" => Ok(Method::Wls),
            "dwls" => Ok(Method::Dwls),
            other => Err(Error::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// Where the iteration starts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartPoint {
    #[default]
    #[serde(with = "auto_literal")]
    Auto,
    Given(Vec<f64>),
}

mod auto_literal {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(de::Error::custom("expected \"auto\" or a parameter array"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Convergence threshold relative to the starting residual ∞-norm.
    pub tol_rel: f64,
    /// Absolute floor on the convergence threshold.
    pub tol_abs: f64,
    pub max_iter: usize,
    /// Initial Levenberg damping.
    pub damping: f64,
    pub start: StartPoint,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol_rel: 1e-8,
            tol_abs: 1e-10,
            max_iter: 100,
            damping: 1e-3,
            start: StartPoint::Auto,
        }
    }
}

impl FitOptions {
    pub fn starting_at(theta: &[f64]) -> Self {
        Self {
            start: StartPoint::Given(theta.to_vec()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_abs > 0.0) {
            return Err(Error::Invalid("tolerances must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0) {
            return Err(Error::Invalid("damping must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn settings(&self) -> SolverSettings {
        SolverSettings {
            tol_rel: self.tol_rel,
            tol_abs: self.tol_abs,
            max_iter: self.max_iter,
            damping: self.damping,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub method: Method,
    pub theta_hat: ParamVector,
    pub sigma_hat: f64,
    pub iterations: usize,
    pub converged: bool,
    /// ∞-norm of the scaled estimating equation `diag(equation_scale)·G(θ̂)`.
    pub residual_norm: f64,
    /// Threshold the residual norm was held to.
    pub tolerance: f64,
    /// Per-component multipliers `|θ_start,k|` applied to the equation.
    pub equation_scale: Vec<f64>,
}

impl FitResult {
    /// Scaled ∞-norm of an equation residual, in the units of `residual_norm`.
    pub fn scaled_norm(&self, g: &DVector<f64>) -> f64 {
        g.iter()
            .zip(&self.equation_scale)
            .fold(0.0_f64, |m, (v, s)| m.max((v * s).abs()))
    }
}

/// Per-observation pieces of every estimating equation.
pub(crate) struct Terms {
    pub y: Vec<f64>,
    pub f: Vec<f64>,
    pub grad: Vec<DVector<f64>>,
}

impl Terms {
    pub fn evaluate(model: &dyn ModelFunction, data: &Dataset, theta: &[f64]) -> Result<Self> {
        let n = data.len();
        let mut out = Self {
            y: Vec::with_capacity(n),
            f: Vec::with_capacity(n),
            grad: Vec::with_capacity(n),
        };
        for (i, obs) in data.iter().enumerate() {
            let f = eval_f(model, obs.x, theta)?;
            if f == 0.0 {
                return Err(Error::ZeroMean { index: i, x: obs.x });
            }
            out.y.push(obs.y);
            out.f.push(f);
            out.grad.push(eval_grad(model, obs.x, theta)?);
        }
        Ok(out)
    }

    fn p(&self) -> usize {
        self.grad.first().map_or(0, |g| g.len())
    }

    pub fn rel_residual(&self, i: usize) -> f64 {
        (self.y[i] - self.f[i]) / self.f[i]
    }

    pub fn sum_sq_rel(&self) -> f64 {
        (0..self.y.len())
            .map(|i| self.rel_residual(i).powi(2))
            .sum()
    }

    /// `Σ c(r_i) J_i`
    fn sum_weighted<F: Fn(f64) -> f64>(&self, c: F) -> DVector<f64> {
        (0..self.y.len()).fold(DVector::zeros(self.p()), |acc, i| {
            acc + &self.grad[i] * (c(self.rel_residual(i)) / self.f[i])
        })
    }

    /// Left side of the method's equation; `sigma_sq` is the ML variance term.
    pub fn equation(&self, method: Method, sigma_sq: f64) -> Result<DVector<f64>> {
        Ok(match method {
            Method::Ml => self.sum_weighted(|_| sigma_sq) - self.sum_weighted(|r| r + r * r),
            Method::Ql => self.sum_weighted(|r| r),
            Method::Wls => self.sum_weighted(|r| r + r * r),
            Method::Dwls => {
                let mut acc = DVector::zeros(self.p());
                for i in 0..self.y.len() {
                    if self.y[i] <= 0.0 {
                        return Err(Error::NonPositiveResponse {
                            index: i,
                            y: self.y[i],
                        });
                    }
                    acc += &self.grad[i] * ((self.y[i] - self.f[i]) / (self.y[i] * self.y[i]));
                }
                acc
            }
        })
    }
}

fn check_sizes(model: &dyn ModelFunction, data: &Dataset) -> Result<()> {
    let p = model.n_params();
    if data.len() <= p {
        return Err(Error::TooFewObservations { n: data.len(), p });
    }
    Ok(())
}

fn check_positive(data: &Dataset) -> Result<()> {
    match data.iter().position(|o| o.y <= 0.0) {
        Some(index) => Err(Error::NonPositiveResponse {
            index,
            y: data.observations()[index].y,
        }),
        None => Ok(()),
    }
}

/// Evaluates the left side of the method's estimating equation at `theta`.
///
/// For ML, `sigma = None` substitutes the profiled `σ̂²(θ) = n⁻¹ Σ r_i²`; the
/// other equations do not involve σ and ignore it.
pub fn equation_residual(
    method: Method,
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    sigma: Option<f64>,
) -> Result<DVector<f64>> {
    let terms = Terms::evaluate(model, data, theta)?;
    let sigma_sq = match sigma {
        Some(s) => s * s,
        None => terms.sum_sq_rel() / data.len() as f64,
    };
    terms.equation(method, sigma_sq)
}

/// `sqrt(n⁻¹ Σ {(y_i − f_i)/f_i}²)`
pub fn estimate_sigma_ml(model: &dyn ModelFunction, data: &Dataset, theta: &[f64]) -> Result<f64> {
    let terms = Terms::evaluate(model, data, theta)?;
    Ok((terms.sum_sq_rel() / data.len() as f64).sqrt())
}

/// `sqrt((n − p)⁻¹ Σ {(y_i − f_i)/f_i}²)`
pub fn estimate_sigma_unbiased(
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    p: usize,
) -> Result<f64> {
    if data.len() <= p {
        return Err(Error::TooFewObservations { n: data.len(), p });
    }
    let terms = Terms::evaluate(model, data, theta)?;
    Ok((terms.sum_sq_rel() / (data.len() - p) as f64).sqrt())
}

/// Starting point for `StartPoint::Auto`: the model's crude guess refined by
/// unweighted least squares, `Σ (y_i − f_i) ∇f_i = 0`.
pub fn auto_start(
    model: &dyn ModelFunction,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    let guess = model.initial_guess(data).ok_or_else(|| {
        Error::Invalid(format!(
            "model `{}` has no automatic starting point",
            model.name()
        ))
    })?;
    let ols = |theta: &[f64]| -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(theta.len());
        for obs in data.iter() {
            let f = eval_f(model, obs.x, theta)?;
            acc += eval_grad(model, obs.x, theta)? * (obs.y - f);
        }
        Ok(acc)
    };
    let scales = parameter_scales(&guess);
    let out = solve(
        &guess,
        ols,
        |t, g| fd_jacobian(&ols, t, g),
        &scales,
        &opts.settings(),
    )?;
    if !out.converged {
        log::debug!(
            "unweighted least-squares start for `{}` stopped at residual {:.3e}",
            model.name(),
            out.residual_norm
        );
    }
    Ok(out.theta)
}

pub(crate) fn resolve_start(
    model: &dyn ModelFunction,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<Vec<f64>> {
    match &opts.start {
        StartPoint::Given(t) => {
            if t.len() != model.n_params() {
                return Err(Error::Dimension {
                    expected: model.n_params(),
                    got: t.len(),
                });
            }
            Ok(t.clone())
        }
        StartPoint::Auto => auto_start(model, data, opts),
    }
}

/// Fits `method` by damped Newton on its estimating equation.
pub fn fit(
    method: Method,
    model: &dyn ModelFunction,
    data: &Dataset,
    opts: &FitOptions,
) -> Result<FitResult> {
    opts.validate()?;
    check_sizes(model, data)?;
    if method == Method::Dwls {
        check_positive(data)?;
    }
    let start = resolve_start(model, data, opts)?;
    let scales = parameter_scales(&start);
    let n = data.len() as f64;

    let residual = |theta: &[f64]| equation_residual(method, model, data, theta, None);
    let outcome = if method == Method::Ml {
        // two-part iteration: σ̂ from the current θ, then a Newton step on the
        // equation with that σ̂ held fixed
        let linearize = |theta: &[f64], _g: &DVector<f64>| {
            let sigma_sq = Terms::evaluate(model, data, theta)?.sum_sq_rel() / n;
            let fixed = |t: &[f64]| Terms::evaluate(model, data, t)?.equation(Method::Ml, sigma_sq);
            let at = fixed(theta)?;
            fd_jacobian(&fixed, theta, &at)
        };
        solve(&start, residual, linearize, &scales, &opts.settings())?
    } else {
        let linearize = |t: &[f64], g: &DVector<f64>| fd_jacobian(&residual, t, g);
        solve(&start, residual, linearize, &scales, &opts.settings())?
    };

    let theta = outcome.theta;
    let sigma_hat = match method {
        Method::Ml => estimate_sigma_ml(model, data, &theta)?,
        _ => estimate_sigma_unbiased(model, data, &theta, model.n_params())?,
    };
    Ok(FitResult {
        method,
        theta_hat: ParamVector::for_model(model, theta)?,
        sigma_hat,
        iterations: outcome.iterations,
        converged: outcome.converged,
        residual_norm: outcome.residual_norm,
        tolerance: outcome.tolerance,
        equation_scale: scales.iter().copied().collect(),
    })
}

pub fn fit_ml(model: &dyn ModelFunction, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    fit(Method::Ml, model, data, opts)
}

pub fn fit_ql(model: &dyn ModelFunction, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    fit(Method::Ql, model, data, opts)
}

pub fn fit_wls(model: &dyn ModelFunction, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    fit(Method::Wls, model, data, opts)
}

pub fn fit_dwls(model: &dyn ModelFunction, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    fit(Method::Dwls, model, data, opts)
}
