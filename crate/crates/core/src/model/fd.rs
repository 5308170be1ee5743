use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::ModelFunction;

/// Relative discrepancy above which [`fd_check`] flags a derivative.
pub const FD_CHECK_TOLERANCE: f64 = 1e-5;

fn step(theta_j: f64, base: f64) -> f64 {
    base * theta_j.abs().max(1.0)
}

/// Central-difference gradient with step `cbrt(eps) * max(1, |θ_j|)`.
pub fn fd_gradient(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> DVector<f64> {
    let base = f64::EPSILON.cbrt();
    let mut work = theta.to_vec();
    DVector::from_iterator(
        theta.len(),
        (0..theta.len()).map(|j| {
            let h = step(theta[j], base);
            work[j] = theta[j] + h;
            let up = model.value(x, &work);
            work[j] = theta[j] - h;
            let down = model.value(x, &work);
            work[j] = theta[j];
            (up - down) / (2.0 * h)
        }),
    )
}

/// Central-difference Hessian, symmetrized.
///
/// Differences the analytic gradient when the model has one; otherwise uses
/// nested central differences of `f` with step `eps^(1/4) * max(1, |θ_j|)`.
pub fn fd_hessian(model: &dyn ModelFunction, x: f64, theta: &[f64]) -> DMatrix<f64> {
    fd_hessian_with_factor(model, x, theta, 1.0)
}

/// [`fd_hessian`] with every step multiplied by `factor`.
pub(crate) fn fd_hessian_with_factor(
    model: &dyn ModelFunction,
    x: f64,
    theta: &[f64],
    factor: f64,
) -> DMatrix<f64> {
    let p = theta.len();
    let mut work = theta.to_vec();
    let mut h = DMatrix::zeros(p, p);

    if model.gradient(x, theta).is_some() {
        let base = factor * f64::EPSILON.cbrt();
        for j in 0..p {
            let hj = step(theta[j], base);
            work[j] = theta[j] + hj;
            let up = model
                .gradient(x, &work)
                .expect("gradient availability is fixed");
            work[j] = theta[j] - hj;
            let down = model
                .gradient(x, &work)
                .expect("gradient availability is fixed");
            work[j] = theta[j];
            h.set_column(j, &((up - down) / (2.0 * hj)));
        }
    } else {
        let base = factor * f64::EPSILON.powf(0.25);
        for j in 0..p {
            let hj = step(theta[j], base);
            for k in j..p {
                let hk = step(theta[k], base);
                let mut eval = |dj: f64, dk: f64| {
                    work[j] += dj;
                    work[k] += dk;
                    let v = model.value(x, &work);
                    work[j] = theta[j];
                    work[k] = theta[k];
                    v
                };
                let v = (eval(hj, hk) - eval(hj, -hk) - eval(-hj, hk) + eval(-hj, -hk))
                    / (4.0 * hj * hk);
                h[(j, k)] = v;
                h[(k, j)] = v;
            }
        }
    }
    (&h + h.transpose()) * 0.5
}

fn rel_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .chain(b)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (u, v)| m.max((u - v).abs()))
        / scale
}

/// Outcome of comparing analytic derivatives with finite differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdCheckReport {
    pub model: String,
    /// Max over the covariates of `‖g_analytic − g_fd‖∞ / ‖g‖∞`; `None` when
    /// the model has no analytic gradient.
    pub gradient_rel_error: Option<f64>,
    pub hessian_rel_error: Option<f64>,
    /// Worst asymmetry `‖H − Hᵀ‖∞` of the analytic Hessian.
    pub hessian_asymmetry: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradient and Hessian against central differences over
/// `xs`. Points outside the model domain are skipped.
pub fn fd_check(model: &dyn ModelFunction, theta: &[f64], xs: &[f64]) -> FdCheckReport {
    let mut grad_err: Option<f64> = None;
    let mut hess_err: Option<f64> = None;
    let mut asym: Option<f64> = None;
    let mut bad_value = false;

    for &x in xs {
        if model.domain_violation(x, theta).is_some() {
            continue;
        }
        if let Some(g) = model.gradient(x, theta) {
            let fd = fd_gradient(model, x, theta);
            let e = rel_discrepancy(g.as_slice(), fd.as_slice());
            bad_value |= !e.is_finite();
            grad_err = Some(grad_err.unwrap_or(0.0).max(e));
        }
        if let Some(h) = model.hessian(x, theta) {
            let fd = fd_hessian(model, x, theta);
            let e = rel_discrepancy(h.as_slice(), fd.as_slice());
            bad_value |= !e.is_finite();
            hess_err = Some(hess_err.unwrap_or(0.0).max(e));
            let a = (&h - h.transpose()).amax();
            asym = Some(asym.unwrap_or(0.0).max(a));
        }
    }

    let within = |e: Option<f64>| e.is_none_or(|v| v <= FD_CHECK_TOLERANCE);
    FdCheckReport {
        model: model.name().to_string(),
        gradient_rel_error: grad_err,
        hessian_rel_error: hess_err,
        hessian_asymmetry: asym,
        tolerance: FD_CHECK_TOLERANCE,
        passed: !bad_value && within(grad_err) && within(hess_err) && asym.is_none_or(|a| a == 0.0),
    }
}
