//! Mean functions, datasets and the derivative machinery shared by the
//! estimators and the asymptotic formulae.
//!
//! A [`ModelFunction`] supplies `f(x, θ)` and, optionally, analytic first and
//! second derivatives in θ. Anything not supplied analytically is filled in by
//! central finite differences through [`eval_grad`] and [`eval_hess`].

mod builtin;
mod bundle;
mod fd;
mod registry;

use std::fmt;
use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builtin::{Constant, ExpDecay, Linear, SaturatingExponential, ScaledShape, Shape};
pub use bundle::JacobianBundle;
pub use fd::{fd_check, fd_gradient, fd_hessian, FdCheckReport, FD_CHECK_TOLERANCE};
pub use registry::{ModelRegistry, ModelSpec};

/// Parameter vector θ with optional component labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("parameter vector must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self {
            values,
            names: None,
        })
    }

    /// Builds a parameter vector checked against the model's parameter count,
    /// labelled with the model's parameter names.
    pub fn for_model(model: &dyn ModelFunction, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.n_params() {
            return Err(Error::Dimension {
                expected: model.n_params(),
                got: values.len(),
            });
        }
        let mut out = Self::new(values)?;
        out.names = Some(model.param_names());
        Ok(out)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.values.len() {
            return Err(Error::Dimension {
                expected: self.values.len(),
                got: names.len(),
            });
        }
        self.names = Some(names);
        Ok(self)
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
}

/// Paired observations for a single curve.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    observations: Vec<Observation>,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::Invalid(
                "dataset must contain at least one observation".into(),
            ));
        }
        if let Some(i) = observations
            .iter()
            .position(|o| !o.x.is_finite() || !o.y.is_finite())
        {
            return Err(Error::NonFinite(format!("observation {i}")));
        }
        Ok(Self { observations })
    }

    pub fn from_xy(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Dimension {
                expected: xs.len(),
                got: ys.len(),
            });
        }
        Self::new(
            xs.iter()
                .zip(ys)
                .map(|(&x, &y)| Observation { x, y })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter()
    }

    pub fn xs(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.x).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.y).collect()
    }

    /// Same covariates, responses multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            observations: self
                .observations
                .iter()
                .map(|o| Observation { x: o.x, y: c * o.y })
                .collect(),
        }
    }
}

/// A mean function `f(x, θ)` with scalar covariate.
///
/// Only `value` is required. Returning `None` from a derivative hook makes the
/// evaluation helpers fall back to central finite differences.
pub trait ModelFunction: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn n_params(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (1..=self.n_params()).map(|j| format!("theta{j}")).collect()
    }

    fn value(&self, x: f64, theta: &[f64]) -> f64;

    fn gradient(&self, _x: f64, _theta: &[f64]) -> Option<DVector<f64>> {
        None
    }

    fn hessian(&self, _x: f64, _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Derivative of `f` with respect to the covariate.
    fn dfdx(&self, _x: f64, _theta: &[f64]) -> Option<f64> {
        None
    }

    /// Returns a reason when `(x, θ)` is outside the model's domain.
    fn domain_violation(&self, _x: f64, _theta: &[f64]) -> Option<String> {
        None
    }

    /// Crude data-driven starting point used by the "auto" start.
    fn initial_guess(&self, _data: &Dataset) -> Option<Vec<f64>> {
        None
    }

    /// Index `k` when `f = θ_k · f*(other parameters)`.
    fn scale_parameter(&self) -> Option<usize> {
        None
    }
}

fn check_args(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> Result<()> {
    if theta.len() != model.n_params() {
        return Err(Error::Dimension {
            expected: model.n_params(),
            got: theta.len(),
        });
    }
    if let Some(reason) = model.domain_violation(x, theta) {
        return Err(Error::Domain {
            model: model.name().to_string(),
            x,
            reason,
        });
    }
    Ok(())
}

pub fn eval_f(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> Result<f64> {
    check_args(model, x, theta)?;
    let f = model.value(x, theta);
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("{} at x = {x}", model.name())));
    }
    Ok(f)
}

/// Gradient in θ; analytic when the model supplies one.
pub fn eval_grad(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> Result<DVector<f64>> {
    check_args(model, x, theta)?;
    let g = match model.gradient(x, theta) {
        Some(g) => g,
        None => fd_gradient(model, x, theta),
    };
    if g.len() != model.n_params() {
        return Err(Error::Dimension {
            expected: model.n_params(),
            got: g.len(),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {} at x = {x}",
            model.name()
        )));
    }
    Ok(g)
}

/// Hessian in θ, always returned symmetric.
pub fn eval_hess(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> Result<DMatrix<f64>> {
    check_args(model, x, theta)?;
    let h = match model.hessian(x, theta) {
        Some(h) => h,
        None => fd_hessian(model, x, theta),
    };
    let p = model.n_params();
    if h.nrows() != p || h.ncols() != p {
        return Err(Error::Dimension {
            expected: p,
            got: h.nrows(),
        });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "Hessian of {} at x = {x}",
            model.name()
        )));
    }
    Ok(h)
}

/// `∂f/∂x`, falling back to a central difference in x.
pub fn eval_dfdx(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> Result<f64> {
    check_args(model, x, theta)?;
    let d = match model.dfdx(x, theta) {
        Some(d) => d,
        None => {
            let h = f64::EPSILON.cbrt() * x.abs().max(1.0);
            (model.value(x + h, theta) - model.value(x - h, theta)) / (2.0 * h)
        }
    };
    if !d.is_finite() {
        return Err(Error::NonFinite(format!(
            "df/dx of {} at x = {x}",
            model.name()
        )));
    }
    Ok(d)
}
