//! Two-curve partial-bleach designs and the equivalent dose γ.
//!
//! The joint parameter vector is `θ = (α₁, α₂, α₃, β₁, β₂, β₃)`: the first
//! three belong to the unbleached curve, the last three to the bleached one.
//! γ is the (negative) dose at which the two curves intersect.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use roots::{find_root_brent, Convergency};
use serde::{Deserialize, Serialize};

use crate::asymptotics::{bias_from_bundle, cov_ml_exact_from_bundle, cov_order2_from_bundle};
use crate::error::{Error, Result};
use crate::estimators::{fit, resolve_start, FitOptions, FitResult, Method, StartPoint, Terms};
use crate::linalg::symmetrize;
use crate::model::{
    eval_dfdx, eval_f, eval_grad, eval_hess, Dataset, JacobianBundle, ModelFunction,
    SaturatingExponential,
};
use crate::solver::{fd_jacobian, parameter_scales, solve};

/// Points in the sign-change scan of the default bracket.
pub const SCAN_POINTS: usize = 256;

const CURVE_PARAMS: usize = 3;

/// Unbleached and bleached saturating-exponential curves sharing one joint
/// parameter vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PartialBleachModel;

impl PartialBleachModel {
    pub const N_PARAMS: usize = 2 * CURVE_PARAMS;

    pub fn curve(&self) -> &dyn ModelFunction {
        &SaturatingExponential
    }

    pub fn param_names(&self) -> [&'static str; 6] {
        ["alpha1", "alpha2", "alpha3", "beta1", "beta2", "beta3"]
    }

    /// `(α, β)` halves of the joint vector.
    pub fn split<'a>(&self, theta: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        if theta.len() != Self::N_PARAMS {
            return Err(Error::Dimension {
                expected: Self::N_PARAMS,
                got: theta.len(),
            });
        }
        Ok(theta.split_at(CURVE_PARAMS))
    }

    /// `g(x, θ) = f₁(x, α) − f₂(x, β)`
    pub fn g(&self, x: f64, theta: &[f64]) -> Result<f64> {
        let (a, b) = self.split(theta)?;
        Ok(eval_f(self.curve(), x, a)? - eval_f(self.curve(), x, b)?)
    }
}

/// `β₁` that makes the bleached curve with shape `(β₂, β₃)` cross the
/// unbleached curve `α` at `x = γ`.
pub fn beta1_from_gamma(alpha: &[f64], beta2: f64, beta3: f64, gamma: f64) -> Result<f64> {
    if alpha.len() != CURVE_PARAMS {
        return Err(Error::Dimension {
            expected: CURVE_PARAMS,
            got: alpha.len(),
        });
    }
    let numer = eval_f(&SaturatingExponential, gamma, alpha)?;
    let denom = eval_f(&SaturatingExponential, gamma, &[1.0, beta2, beta3])?;
    if denom == 0.0 {
        return Err(Error::Domain {
            model: "saturating_exponential".into(),
            x: gamma,
            reason: "bleached shape vanishes at gamma (gamma = -beta2)".into(),
        });
    }
    Ok(numer / denom)
}

/// Root of `g` with the bracket it was found in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRoot {
    pub gamma: f64,
    pub bracket: (f64, f64),
    /// Number of sign changes the scan found; more than one means the root
    /// closest to zero was taken.
    pub sign_changes: usize,
}

/// `[−min(α₂, β₂) + ε, 0]`
pub fn default_bracket(theta: &[f64]) -> Result<(f64, f64)> {
    let (a, b) = PartialBleachModel.split(theta)?;
    let shift = a[1].min(b[1]);
    if !(shift > 0.0) {
        return Err(Error::NoBracket {
            lo: -shift,
            hi: 0.0,
        });
    }
    Ok((-shift * (1.0 - 1e-9), 0.0))
}

struct RootTolerance {
    x_tol: f64,
}

impl Convergency<f64> for RootTolerance {
    fn is_root_found(&mut self, y: f64) -> bool {
        y == 0.0
    }

    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        (x1 - x2).abs() <= self.x_tol
    }

    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter >= 500
    }
}

/// Finds the intersection of the two curves inside `bracket` (default
/// [`default_bracket`]) to absolute tolerance `1e-8·(hi − lo)`.
pub fn solve_gamma(
    model: &PartialBleachModel,
    theta: &[f64],
    bracket: Option<(f64, f64)>,
) -> Result<GammaRoot> {
    let (lo, hi) = match bracket {
        Some(b) => b,
        None => default_bracket(theta)?,
    };
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid(format!(
            "invalid gamma bracket [{lo}, {hi}]"
        )));
    }

    let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..SCAN_POINTS).map(|k| lo + step * k as f64).collect();
    let values = grid
        .iter()
        .map(|&x| model.g(x, theta))
        .collect::<Result<Vec<_>>>()?;

    let scale = grid
        .iter()
        .map(|&x| {
            let (a, b) = model.split(theta).expect("length checked by g");
            model.curve().value(x, a).abs() + model.curve().value(x, b).abs()
        })
        .fold(0.0, f64::max);
    if values.iter().all(|v| v.abs() <= 1e-14 * scale) {
        return Err(Error::Degenerate(
            "the two curves coincide over the bracket".into(),
        ));
    }

    // sub-intervals with a sign change, or an exact zero at their left end
    let mut changes: Vec<(f64, f64)> = Vec::new();
    for k in 0..SCAN_POINTS - 1 {
        if values[k] == 0.0 {
            changes.push((grid[k], grid[k]));
        } else if values[k] * values[k + 1] < 0.0 {
            changes.push((grid[k], grid[k + 1]));
        }
    }
    if values[SCAN_POINTS - 1] == 0.0 {
        changes.push((hi, hi));
    }
    let Some(&(a, b)) = changes
        .iter()
        .min_by(|p, q| p.1.abs().total_cmp(&q.1.abs()))
    else {
        return Err(Error::NoBracket { lo, hi });
    };
    if changes.len() > 1 {
        log::warn!(
            "{} sign changes of g on [{lo}, {hi}]; taking the root closest to zero",
            changes.len()
        );
    }

    let gamma = if a == b {
        a
    } else {
        let mut conv = RootTolerance {
            x_tol: 1e-8 * (hi - lo),
        };
        let g = |x: f64| model.g(x, theta).unwrap_or(f64::NAN);
        find_root_brent(a, b, g, &mut conv)
            .map_err(|e| Error::Invalid(format!("root search failed: {e}")))?
    };
    Ok(GammaRoot {
        gamma,
        bracket: (lo, hi),
        sign_changes: changes.len(),
    })
}

/// `∂γ/∂θ = −∇_θ g / (∂g/∂x)` at the root `gamma`.
pub fn gamma_gradient(
    model: &PartialBleachModel,
    theta: &[f64],
    gamma: f64,
) -> Result<DVector<f64>> {
    let (a, b) = model.split(theta)?;
    let s1 = eval_dfdx(model.curve(), gamma, a)?;
    let s2 = eval_dfdx(model.curve(), gamma, b)?;
    let slope = s1 - s2;
    let scale = s1.abs() + s2.abs();
    if !(slope.abs() >= 1e-12 * scale) || scale == 0.0 {
        return Err(Error::Tangency { x: gamma, slope });
    }
    let ga = eval_grad(model.curve(), gamma, a)?;
    let gb = eval_grad(model.curve(), gamma, b)?;
    let mut grad = DVector::zeros(PartialBleachModel::N_PARAMS);
    grad.rows_mut(0, CURVE_PARAMS).copy_from(&(-ga / slope));
    grad.rows_mut(CURVE_PARAMS, CURVE_PARAMS)
        .copy_from(&(gb / slope));
    Ok(grad)
}

/// Second derivatives `∂²γ/∂θ∂θᵀ` by differentiating `g(γ(θ), θ) = 0` twice:
///
/// `γ_θθ = −(g_θθ + g_θx γ_θᵀ + γ_θ g_xθᵀ + g_xx γ_θ γ_θᵀ) / g_x`
pub fn gamma_hessian(
    model: &PartialBleachModel,
    theta: &[f64],
    gamma: f64,
) -> Result<DMatrix<f64>> {
    let (a, b) = model.split(theta)?;
    let grad = gamma_gradient(model, theta, gamma)?;
    let p = PartialBleachModel::N_PARAMS;
    let ha = eval_hess(model.curve(), gamma, a)?;
    let hb = eval_hess(model.curve(), gamma, b)?;

    // x enters the saturating exponential only through x + α₂, so x-derivatives
    // are the α₂ column of the parameter Hessian
    let shift = 1;
    let mut g_tt = DMatrix::zeros(p, p);
    g_tt.view_mut((0, 0), (CURVE_PARAMS, CURVE_PARAMS))
        .copy_from(&ha);
    g_tt.view_mut((CURVE_PARAMS, CURVE_PARAMS), (CURVE_PARAMS, CURVE_PARAMS))
        .copy_from(&(-&hb));
    let mut g_tx = DVector::zeros(p);
    g_tx.rows_mut(0, CURVE_PARAMS).copy_from(&ha.column(shift));
    g_tx.rows_mut(CURVE_PARAMS, CURVE_PARAMS)
        .copy_from(&(-hb.column(shift)));
    let g_xx = ha[(shift, shift)] - hb[(shift, shift)];
    let g_x = eval_dfdx(model.curve(), gamma, a)? - eval_dfdx(model.curve(), gamma, b)?;

    let cross = &g_tx * grad.transpose();
    let total = g_tt + &cross + cross.transpose() + &grad * grad.transpose() * g_xx;
    Ok(symmetrize(&(total / -g_x)))
}

/// How σ is shared between the two curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Two independent fits, one σ per curve.
    Separate,
    /// One σ for both curves, estimated from the pooled relative residuals.
    CommonSigma,
    /// Both curves fitted simultaneously with the given σ's held fixed.
    FixedSigmas(f64, f64),
}

impl FitMode {
    /// Mode used for each method in simulations: ML pools σ, the rest fit
    /// separately.
    pub fn default_for(method: Method) -> FitMode {
        match method {
            Method::Ml => FitMode::CommonSigma,
            _ => FitMode::Separate,
        }
    }
}

impl fmt::Display for FitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitMode::Separate => f.write_str("separate"),
            FitMode::CommonSigma => f.write_str("common-sigma"),
            FitMode::FixedSigmas(a, b) => write!(f, "fixed-sigmas({a}, {b})"),
        }
    }
}

impl FromStr for FitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "separate" => Ok(FitMode::Separate),
            "common-sigma" | "common" => Ok(FitMode::CommonSigma),
            other => Err(Error::Mode(format!("unknown fit mode `{other}`"))),
        }
    }
}

/// Joint estimate for both curves.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFitResult {
    pub method: Method,
    pub mode: FitMode,
    /// `(α̂, β̂)`
    pub theta_hat: Vec<f64>,
    /// σ̂ per curve; both entries are equal in common-σ mode.
    pub sigma_hat: [f64; 2],
    pub iterations: usize,
    pub converged: bool,
    pub residual_norm: f64,
    pub tolerance: f64,
}

impl JointFitResult {
    fn from_separate(method: Method, r1: FitResult, r2: FitResult) -> Self {
        let mut theta_hat = r1.theta_hat.into_vec();
        theta_hat.extend(r2.theta_hat.into_vec());
        Self {
            method,
            mode: FitMode::Separate,
            theta_hat,
            sigma_hat: [r1.sigma_hat, r2.sigma_hat],
            iterations: r1.iterations.max(r2.iterations),
            converged: r1.converged && r2.converged,
            residual_norm: r1.residual_norm.max(r2.residual_norm),
            tolerance: r1.tolerance.max(r2.tolerance),
        }
    }
}

fn curve_options(opts: &FitOptions, k: usize) -> FitOptions {
    let start = match &opts.start {
        StartPoint::Given(t) if t.len() == PartialBleachModel::N_PARAMS => {
            StartPoint::Given(t[k * CURVE_PARAMS..(k + 1) * CURVE_PARAMS].to_vec())
        }
        other => other.clone(),
    };
    FitOptions {
        start,
        ..opts.clone()
    }
}

/// Fits both curves by `method` under the given σ-sharing `mode`.
///
/// DWLS equations do not involve σ, so its simultaneous fit solves the same
/// system whatever the mode.
pub fn fit_two_curves(
    model: &PartialBleachModel,
    data1: &Dataset,
    data2: &Dataset,
    method: Method,
    mode: FitMode,
    opts: &FitOptions,
) -> Result<JointFitResult> {
    opts.validate()?;
    if let StartPoint::Given(t) = &opts.start {
        if t.len() != PartialBleachModel::N_PARAMS {
            return Err(Error::Dimension {
                expected: PartialBleachModel::N_PARAMS,
                got: t.len(),
            });
        }
    }
    let curve = model.curve();
    if mode == FitMode::Separate {
        let r1 = fit(method, curve, data1, &curve_options(opts, 0))?;
        let r2 = fit(method, curve, data2, &curve_options(opts, 1))?;
        return Ok(JointFitResult::from_separate(method, r1, r2));
    }
    if let FitMode::FixedSigmas(s1, s2) = mode {
        if !(s1 > 0.0 && s2 > 0.0 && s1.is_finite() && s2.is_finite()) {
            return Err(Error::Invalid(
                "fixed sigmas must be positive and finite".into(),
            ));
        }
    }
    for d in [data1, data2] {
        if d.len() <= CURVE_PARAMS {
            return Err(Error::TooFewObservations {
                n: d.len(),
                p: CURVE_PARAMS,
            });
        }
    }

    let mut start = resolve_start(curve, data1, &curve_options(opts, 0))?;
    start.extend(resolve_start(curve, data2, &curve_options(opts, 1))?);
    let n_total = (data1.len() + data2.len()) as f64;
    let datasets = [data1, data2];

    let terms = |theta: &[f64]| -> Result<[Terms; 2]> {
        let (a, b) = theta.split_at(CURVE_PARAMS);
        Ok([
            Terms::evaluate(curve, data1, a)?,
            Terms::evaluate(curve, data2, b)?,
        ])
    };
    let pooled = |t: &[Terms; 2]| (t[0].sum_sq_rel() + t[1].sum_sq_rel()) / n_total;
    // equation blocks with the ML variance term (if any) supplied
    let stack = |t: &[Terms; 2], ml_sigma_sq: [f64; 2]| -> Result<DVector<f64>> {
        let mut out = DVector::zeros(PartialBleachModel::N_PARAMS);
        for k in 0..2 {
            let weight = match (method, mode) {
                (Method::Ml | Method::Dwls, _) | (_, FitMode::CommonSigma) => 1.0,
                (_, FitMode::FixedSigmas(s1, s2)) => [s1, s2][k].powi(-2),
                (_, FitMode::Separate) => unreachable!(),
            };
            let eq = t[k].equation(method, ml_sigma_sq[k])? * weight;
            out.rows_mut(k * CURVE_PARAMS, CURVE_PARAMS).copy_from(&eq);
        }
        Ok(out)
    };
    let ml_variance = |t: &[Terms; 2]| match mode {
        FitMode::FixedSigmas(s1, s2) => [s1 * s1, s2 * s2],
        _ => {
            let s = pooled(t);
            [s, s]
        }
    };

    let residual = |theta: &[f64]| {
        let t = terms(theta)?;
        stack(&t, ml_variance(&t))
    };
    let linearize = |theta: &[f64], g: &DVector<f64>| {
        if method == Method::Ml {
            let sigma_sq = ml_variance(&terms(theta)?);
            let fixed = |th: &[f64]| stack(&terms(th)?, sigma_sq);
            let at = fixed(theta)?;
            fd_jacobian(&fixed, theta, &at)
        } else {
            fd_jacobian(&residual, theta, g)
        }
    };
    let scales = parameter_scales(&start);
    let outcome = solve(&start, residual, linearize, &scales, &opts.settings())?;

    let t = terms(&outcome.theta)?;
    let sigma_hat = match (method, mode) {
        (Method::Ml, FitMode::CommonSigma) => {
            let s = pooled(&t).sqrt();
            [s, s]
        }
        (_, FitMode::CommonSigma) => {
            let s = ((t[0].sum_sq_rel() + t[1].sum_sq_rel())
                / (n_total - PartialBleachModel::N_PARAMS as f64))
                .sqrt();
            [s, s]
        }
        (Method::Ml, _) => [0, 1].map(|k| (t[k].sum_sq_rel() / datasets[k].len() as f64).sqrt()),
        _ => [0, 1].map(|k| (t[k].sum_sq_rel() / (datasets[k].len() - CURVE_PARAMS) as f64).sqrt()),
    };
    Ok(JointFitResult {
        method,
        mode,
        theta_hat: outcome.theta,
        sigma_hat,
        iterations: outcome.iterations,
        converged: outcome.converged,
        residual_norm: outcome.residual_norm,
        tolerance: outcome.tolerance,
    })
}

fn design_dataset(curve: &dyn ModelFunction, xs: &[f64], theta: &[f64]) -> Result<Dataset> {
    let ys = xs
        .iter()
        .map(|&x| eval_f(curve, x, theta))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_xy(xs, &ys)
}

/// Bundle of the stacked design in which every row lives in the 6-dimensional
/// joint parameter space.
pub fn joint_bundle(
    model: &PartialBleachModel,
    x1: &[f64],
    x2: &[f64],
    theta: &[f64],
) -> Result<JacobianBundle> {
    let (a, b) = model.split(theta)?;
    let p = PartialBleachModel::N_PARAMS;
    let (mut f, mut grads, mut hessians) = (Vec::new(), Vec::new(), Vec::new());
    for (k, (xs, params)) in [(x1, a), (x2, b)].into_iter().enumerate() {
        let off = k * CURVE_PARAMS;
        for &x in xs {
            f.push(eval_f(model.curve(), x, params)?);
            let mut g = DVector::zeros(p);
            g.rows_mut(off, CURVE_PARAMS)
                .copy_from(&eval_grad(model.curve(), x, params)?);
            grads.push(g);
            let mut h = DMatrix::zeros(p, p);
            h.view_mut((off, off), (CURVE_PARAMS, CURVE_PARAMS))
                .copy_from(&eval_hess(model.curve(), x, params)?);
            hessians.push(h);
        }
    }
    JacobianBundle::from_rows(&f, &grads, &hessians)
}

/// Order-σ² bias and covariance of the joint estimate `(α̂, β̂)`.
///
/// Separate fits give block-diagonal covariances; common-σ ML treats the
/// stacked data as one design with `p = 6`. ML covariances use the
/// large-sample ML form, the other methods `σ²(JᵀJ)⁻¹`.
pub fn joint_bias_cov(
    model: &PartialBleachModel,
    x1: &[f64],
    x2: &[f64],
    theta: &[f64],
    sigmas: [f64; 2],
    method: Method,
    mode: FitMode,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (a, b) = model.split(theta)?;
    let cov_of = |bundle: &JacobianBundle, s: f64| match method {
        Method::Ml => cov_ml_exact_from_bundle(bundle, s),
        _ => Ok(cov_order2_from_bundle(bundle, s)),
    };
    let separate = |sigmas: [f64; 2]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = PartialBleachModel::N_PARAMS;
        let mut bias = DVector::zeros(p);
        let mut cov = DMatrix::zeros(p, p);
        for (k, (xs, params)) in [(x1, a), (x2, b)].into_iter().enumerate() {
            let off = k * CURVE_PARAMS;
            let bundle = JacobianBundle::build(
                model.curve(),
                &design_dataset(model.curve(), xs, params)?,
                params,
            )?;
            bias.rows_mut(off, CURVE_PARAMS)
                .copy_from(&bias_from_bundle(method, &bundle, sigmas[k]));
            cov.view_mut((off, off), (CURVE_PARAMS, CURVE_PARAMS))
                .copy_from(&cov_of(&bundle, sigmas[k])?);
        }
        Ok((bias, cov))
    };
    match (method, mode) {
        (_, FitMode::Separate) => separate(sigmas),
        (Method::Ml, FitMode::CommonSigma) => {
            if sigmas[0] != sigmas[1] {
                return Err(Error::Mode(format!(
                    "common-sigma mode needs equal sigmas, got {} and {}",
                    sigmas[0], sigmas[1]
                )));
            }
            let bundle = joint_bundle(model, x1, x2, theta)?;
            Ok((
                bias_from_bundle(Method::Ml, &bundle, sigmas[0]),
                cov_ml_exact_from_bundle(&bundle, sigmas[0])?,
            ))
        }
        (Method::Ml, FitMode::FixedSigmas(..)) => Err(Error::Mode(
            "no closed-form ML bias with sigmas held fixed".into(),
        )),
        // QL, WLS and DWLS roots do not depend on how σ is shared
        (_, FitMode::CommonSigma) => separate(sigmas),
        (_, FitMode::FixedSigmas(..)) => separate(sigmas),
    }
}

/// Equivalent-dose estimate with its delta-method bias and standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoseEstimate {
    pub method: Method,
    pub mode: FitMode,
    /// Signed root; the equivalent dose is `|gamma_hat|`.
    pub gamma_hat: f64,
    /// `bias_linear + bias_curvature`
    pub bias: f64,
    /// `∇γᵀ bias(θ̂)`
    pub bias_linear: f64,
    /// `½ tr{∇²γ Cov(θ̂)}`
    pub bias_curvature: f64,
    pub se: f64,
    pub bracket: (f64, f64),
    pub gradient: Vec<f64>,
}

/// Order-σ² bias and delta-method standard error of `γ̂ = γ(θ̂)`:
/// `bias(γ̂) = ∇γᵀ bias(θ̂) + ½ tr{∇²γ Cov(θ̂)}` and
/// `se(γ̂) = sqrt(∇γᵀ Cov(θ̂) ∇γ)`, everything evaluated at `theta`.
pub fn gamma_bias_se(
    model: &PartialBleachModel,
    x1: &[f64],
    x2: &[f64],
    theta: &[f64],
    sigma: f64,
    method: Method,
    mode: FitMode,
) -> Result<DoseEstimate> {
    let root = solve_gamma(model, theta, None)?;
    gamma_bias_se_at(model, x1, x2, theta, [sigma, sigma], method, mode, root)
}

/// As [`gamma_bias_se`] for an already located root and per-curve σ's.
#[allow(clippy::too_many_arguments)]
pub fn gamma_bias_se_at(
    model: &PartialBleachModel,
    x1: &[f64],
    x2: &[f64],
    theta: &[f64],
    sigmas: [f64; 2],
    method: Method,
    mode: FitMode,
    root: GammaRoot,
) -> Result<DoseEstimate> {
    let grad = gamma_gradient(model, theta, root.gamma)?;
    let hess = gamma_hessian(model, theta, root.gamma)?;
    let (bias_theta, cov) = joint_bias_cov(model, x1, x2, theta, sigmas, method, mode)?;
    let bias_linear = grad.dot(&bias_theta);
    let bias_curvature = 0.5 * (hess * &cov).trace();
    let var = (grad.transpose() * cov * &grad)[(0, 0)];
    Ok(DoseEstimate {
        method,
        mode,
        gamma_hat: root.gamma,
        bias: bias_linear + bias_curvature,
        bias_linear,
        bias_curvature,
        se: var.max(0.0).sqrt(),
        bracket: root.bracket,
        gradient: grad.iter().copied().collect(),
    })
}
