//! Closed-form small-σ biases and covariances.
//!
//! Every formula is a function of the [`JacobianBundle`] at the evaluation
//! point; the `*_from_bundle` variants exist so that joint (two-curve)
//! designs can assemble their own bundle.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::linalg::{outer, rel_diff, spd_inverse, symmetrize};
use crate::model::{Dataset, JacobianBundle, ModelFunction};

/// Order-σ² bias of one estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub method: Method,
    pub bias: DVector<f64>,
    pub sigma_used: f64,
    pub bundle: JacobianBundle,
}

/// The bracketed vector `v` with `bias = σ² (JᵀJ)⁻¹ v`.
pub fn bias_direction(method: Method, bundle: &JacobianBundle) -> DVector<f64> {
    let n = bundle.n() as f64;
    let p = bundle.p() as f64;
    let sum_j = bundle.sum_j();
    let sum_w1 = bundle.weighted_sum(&bundle.w1);
    let half_w2 = bundle.weighted_sum(&bundle.w2) * 0.5;
    match method {
        Method::Ml => {
            let centered = bundle.w1.map(|w| w - p / n);
            -bundle.weighted_sum(&centered) - half_w2
        }
        Method::Ql => -half_w2,
        Method::Wls => sum_j - sum_w1 - half_w2,
        Method::Dwls => sum_j * -2.0 + sum_w1 * 2.0 - half_w2,
    }
}

pub fn bias_from_bundle(method: Method, bundle: &JacobianBundle, sigma: f64) -> DVector<f64> {
    &bundle.jtj_inv * bias_direction(method, bundle) * (sigma * sigma)
}

pub fn bias_order2(
    method: Method,
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    sigma: f64,
) -> Result<BiasReport> {
    check_sigma(sigma)?;
    let bundle = JacobianBundle::build(model, data, theta)?;
    Ok(BiasReport {
        method,
        bias: bias_from_bundle(method, &bundle, sigma),
        sigma_used: sigma,
        bundle,
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "sigma must be finite and non-negative, got {sigma}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceOrder {
    /// `σ²(JᵀJ)⁻¹`, shared by all four estimators.
    Order2,
    /// Large-sample ML covariance with the centred-J correction.
    MlExact,
    Sandwich,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceReport {
    pub method: Option<Method>,
    pub cov: DMatrix<f64>,
    pub order: CovarianceOrder,
}

pub fn cov_order2_from_bundle(bundle: &JacobianBundle, sigma: f64) -> DMatrix<f64> {
    &bundle.jtj_inv * (sigma * sigma)
}

pub fn cov_order2(
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    sigma: f64,
) -> Result<CovarianceReport> {
    check_sigma(sigma)?;
    let bundle = JacobianBundle::build(model, data, theta)?;
    Ok(CovarianceReport {
        method: None,
        cov: cov_order2_from_bundle(&bundle, sigma),
        order: CovarianceOrder::Order2,
    })
}

/// `σ² [JᵀJ + 2σ² Σ (J_i − J̄)(J_i − J̄)ᵀ]⁻¹`
pub fn cov_ml_exact_from_bundle(bundle: &JacobianBundle, sigma: f64) -> Result<DMatrix<f64>> {
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Ok(DMatrix::zeros(bundle.p(), bundle.p()));
    }
    let s2 = sigma * sigma;
    let m = &bundle.jtj + bundle.centered_scatter() * (2.0 * s2);
    Ok(spd_inverse(&m)? * s2)
}

/// `[(2 + σ⁻²) Σ J_i J_iᵀ − 2n⁻¹ (Σ J_i)(Σ J_i)ᵀ]⁻¹`, algebraically equal to
/// [`cov_ml_exact_from_bundle`].
pub fn cov_ml_unreduced(bundle: &JacobianBundle, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(
            "the unreduced ML covariance needs sigma > 0".into(),
        ));
    }
    let n = bundle.n() as f64;
    let sum_j = bundle.sum_j();
    let m = &bundle.jtj * (2.0 + sigma.powi(-2)) - outer(&sum_j) * (2.0 / n);
    spd_inverse(&m)
}

pub fn cov_ml_exact(
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    sigma: f64,
) -> Result<CovarianceReport> {
    let bundle = JacobianBundle::build(model, data, theta)?;
    Ok(CovarianceReport {
        method: Some(Method::Ml),
        cov: cov_ml_exact_from_bundle(&bundle, sigma)?,
        order: CovarianceOrder::MlExact,
    })
}

/// Expected information of `(θ, σ)` under normal errors:
///
/// ```text
/// [ (2 + σ⁻²) Σ J_i J_iᵀ    (2/σ) Σ J_i ]
/// [ (2/σ) Σ J_iᵀ            2n/σ²       ]
/// ```
///
/// The θθ block is assembled as `DᵀMD` with `D_ij = ∂f_i/∂θ_j` and
/// `M = diag(2/f_i² + 1/(σ² f_i²))`.
pub fn expected_information(bundle: &JacobianBundle, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(
            "expected information needs sigma > 0".into(),
        ));
    }
    let (n, p) = (bundle.n(), bundle.p());
    let d = DMatrix::from_fn(n, p, |i, k| bundle.j[(i, k)] * bundle.f[i]);
    let m = DMatrix::from_diagonal(&bundle.f.map(|f| (2.0 + sigma.powi(-2)) / (f * f)));
    let theta_block = d.transpose() * m * &d;
    let cross = bundle.sum_j() * (2.0 / sigma);

    let mut info = DMatrix::zeros(p + 1, p + 1);
    info.view_mut((0, 0), (p, p)).copy_from(&theta_block);
    info.view_mut((0, p), (p, 1)).copy_from(&cross);
    info.view_mut((p, 0), (1, p)).copy_from(&cross.transpose());
    info[(p, p)] = 2.0 * n as f64 / (sigma * sigma);
    Ok(symmetrize(&info))
}

/// Third and fourth moments of the standardized error ε.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorMoments {
    pub third: f64,
    pub fourth: f64,
}

impl ErrorMoments {
    pub const NORMAL: ErrorMoments = ErrorMoments {
        third: 0.0,
        fourth: 3.0,
    };
}

/// Covariance of the score `(∂l/∂θ, ∂l/∂σ)` for errors with the given
/// moments, from `E r³ = σ³ m₃`, `E r⁴ = σ⁴ m₄` and `Var r² = σ⁴(m₄ − 1)`.
pub fn score_covariance(
    bundle: &JacobianBundle,
    sigma: f64,
    moments: ErrorMoments,
) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid("score covariance needs sigma > 0".into()));
    }
    let (n, p) = (bundle.n(), bundle.p());
    let er3 = sigma.powi(3) * moments.third;
    let er4 = sigma.powi(4) * moments.fourth;
    let var_r2 = er4 - sigma.powi(4);

    let mut theta_block = DMatrix::zeros(p, p);
    let mut cross = DVector::zeros(p);
    let mut sigma_var = 0.0;
    for i in 0..n {
        let ji = bundle.row(i);
        let jjt = outer(&ji);
        theta_block += &jjt * sigma.powi(-2)
            + &jjt * (sigma.powi(-4) * var_r2)
            + &jjt * (2.0 * sigma.powi(-4) * er3);
        cross += &ji * (sigma.powi(-5) * er3 + sigma.powi(-5) * er4 - sigma.recip());
        sigma_var += sigma.powi(-6) * var_r2;
    }

    let mut out = DMatrix::zeros(p + 1, p + 1);
    out.view_mut((0, 0), (p, p)).copy_from(&theta_block);
    out.view_mut((0, p), (p, 1)).copy_from(&cross);
    out.view_mut((p, 0), (1, p)).copy_from(&cross.transpose());
    out[(p, p)] = sigma_var;
    Ok(symmetrize(&out))
}

/// Inverse of the `(p+1)×(p+1)` expected information of `(θ̂, σ̂)`.
pub fn cov_ml_full_from_bundle(bundle: &JacobianBundle, sigma: f64) -> Result<DMatrix<f64>> {
    spd_inverse(&expected_information(bundle, sigma)?)
}

pub fn cov_ml_full(
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    sigma: f64,
) -> Result<DMatrix<f64>> {
    let bundle = JacobianBundle::build(model, data, theta)?;
    cov_ml_full_from_bundle(&bundle, sigma)
}

/// `(JᵀJ)⁻¹ [Σ Var(Y_i)/f_i² J_i J_iᵀ] (JᵀJ)⁻¹`
pub fn sandwich_from_bundle(bundle: &JacobianBundle, var_y: &[f64]) -> Result<DMatrix<f64>> {
    if var_y.len() != bundle.n() {
        return Err(Error::Dimension {
            expected: bundle.n(),
            got: var_y.len(),
        });
    }
    if var_y.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Invalid(
            "response variances must be finite and non-negative".into(),
        ));
    }
    let meat = (0..bundle.n()).fold(DMatrix::zeros(bundle.p(), bundle.p()), |acc, i| {
        acc + outer(&bundle.row(i)) * (var_y[i] / (bundle.f[i] * bundle.f[i]))
    });
    Ok(symmetrize(&(&bundle.jtj_inv * meat * &bundle.jtj_inv)))
}

pub fn cov_ql_sandwich(
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    var_y: &[f64],
) -> Result<CovarianceReport> {
    let bundle = JacobianBundle::build(model, data, theta)?;
    Ok(CovarianceReport {
        method: Some(Method::Ql),
        cov: sandwich_from_bundle(&bundle, var_y)?,
        order: CovarianceOrder::Sandwich,
    })
}

/// Normal limit of `√n (θ̂ − θ)/σ` for WLS and DWLS as σ → 0, n → ∞ with
/// `√n σ → δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitDistribution {
    pub method: Method,
    pub delta: f64,
    /// `(JᵀJ/n)⁻¹`, also the limiting covariance.
    pub sigma_matrix: DMatrix<f64>,
    /// `n⁻¹ Σ J_i`
    pub gamma1: DVector<f64>,
    /// `n⁻¹ Σ w₁,ᵢ J_i` (zero when simplified)
    pub gamma2: DVector<f64>,
    /// `n⁻¹ Σ w₂,ᵢ J_i` (zero when simplified)
    pub gamma3: DVector<f64>,
    pub mean_shift: DVector<f64>,
    pub simplified: bool,
}

pub fn limit_from_bundle(
    method: Method,
    bundle: &JacobianBundle,
    sigma: f64,
    simplified: bool,
) -> Result<LimitDistribution> {
    check_sigma(sigma)?;
    let n = bundle.n() as f64;
    let p = bundle.p();
    let sigma_matrix = &bundle.jtj_inv * n;
    let gamma1 = bundle.sum_j() / n;
    let (gamma2, gamma3) = if simplified {
        (DVector::zeros(p), DVector::zeros(p))
    } else {
        (
            bundle.weighted_sum(&bundle.w1) / n,
            bundle.weighted_sum(&bundle.w2) / n,
        )
    };
    let delta = n.sqrt() * sigma;
    let combo = match method {
        Method::Wls => &gamma1 - &gamma2 - &gamma3 * 0.5,
        Method::Dwls => &gamma1 * -2.0 + &gamma2 * 2.0 - &gamma3 * 0.5,
        other => {
            return Err(Error::Invalid(format!(
                "limit distribution is defined for WLS and DWLS, not {other}"
            )))
        }
    };
    let mean_shift = &sigma_matrix * combo * delta;
    Ok(LimitDistribution {
        method,
        delta,
        sigma_matrix,
        gamma1,
        gamma2,
        gamma3,
        mean_shift,
        simplified,
    })
}

pub fn limit_distribution(
    method: Method,
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
    sigma: f64,
    simplified: bool,
) -> Result<LimitDistribution> {
    let bundle = JacobianBundle::build(model, data, theta)?;
    limit_from_bundle(method, &bundle, sigma, simplified)
}

/// Outcome of testing whether `(JᵀJ)⁻¹ Σ J_i = [θ₁, 0, …, 0]ᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorizationCheck {
    pub factorized: bool,
    /// `(JᵀJ)⁻¹ Σ J_i`
    pub v: Vec<f64>,
    /// Largest relative ML/WLS bias difference over components 2..p, computed
    /// when the factorization holds.
    pub ml_wls_bias_rel_diff: Option<f64>,
}

const FACTORIZATION_TOL: f64 = 1e-8;

pub fn check_theta1_factorization(
    model: &dyn ModelFunction,
    data: &Dataset,
    theta: &[f64],
) -> Result<FactorizationCheck> {
    let bundle = JacobianBundle::build(model, data, theta)?;
    let v = &bundle.jtj_inv * bundle.sum_j();
    let scale = theta[0].abs();
    let factorized = (v[0] - theta[0]).abs() <= FACTORIZATION_TOL * scale
        && v.iter()
            .skip(1)
            .all(|c| c.abs() <= FACTORIZATION_TOL * scale);

    let ml_wls_bias_rel_diff = factorized.then(|| {
        // σ cancels in the comparison
        let ml = bias_from_bundle(Method::Ml, &bundle, 1.0);
        let wls = bias_from_bundle(Method::Wls, &bundle, 1.0);
        (1..bundle.p())
            .map(|k| {
                let s = ml[k].abs().max(wls[k].abs());
                if s == 0.0 {
                    0.0
                } else {
                    (ml[k] - wls[k]).abs() / s
                }
            })
            .fold(0.0, f64::max)
    });
    Ok(FactorizationCheck {
        factorized,
        v: v.iter().copied().collect(),
        ml_wls_bias_rel_diff,
    })
}

/// Relative discrepancy between the two algebraic forms of the ML covariance.
pub fn ml_covariance_identity_error(bundle: &JacobianBundle, sigma: f64) -> Result<f64> {
    Ok(rel_diff(
        &cov_ml_exact_from_bundle(bundle, sigma)?,
        &cov_ml_unreduced(bundle, sigma)?,
    ))
}
