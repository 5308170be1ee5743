//! Damped Newton iteration for square estimating-equation systems `G(θ) = 0`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SolverSettings {
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_iter: usize,
    pub damping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SolverOutcome {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub residual_norm: f64,
    pub tolerance: f64,
}

const MAX_DAMPING: f64 = 1e16;
const MIN_DAMPING: f64 = 1e-14;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Row scales `|θ_k|` (or 1 for parameters starting near zero), making each
/// equation component dimensionless.
pub(crate) fn parameter_scales(start: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        start.len(),
        start
            .iter()
            .map(|t| if t.abs() > 1e-8 { t.abs() } else { 1.0 }),
    )
}

/// Central-difference Jacobian of a vector equation.
pub(crate) fn fd_jacobian<F>(eq: &F, theta: &[f64], at: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    let p = theta.len();
    let mut jac = DMatrix::zeros(at.len(), p);
    let mut work = theta.to_vec();
    let base = f64::EPSILON.cbrt();
    for k in 0..p {
        let h = base * theta[k].abs().max(1.0);
        work[k] = theta[k] + h;
        let up = eq(&work);
        work[k] = theta[k] - h;
        let down = eq(&work);
        work[k] = theta[k];
        let col = match (up, down) {
            (Ok(u), Ok(d)) => (u - d) / (2.0 * h),
            // one-sided fallback at the edge of the domain
            (Ok(u), Err(_)) => (u - at) / h,
            (Err(_), Ok(d)) => (at - d) / h,
            (Err(e), Err(_)) => return Err(e),
        };
        jac.set_column(k, &col);
    }
    Ok(jac)
}

/// Levenberg-damped Newton on `residual`, with `linearize` supplying the
/// Newton matrix at the current iterate.
///
/// Component `k` of the equation is multiplied by `row_scale[k]` before any
/// norm is taken, so convergence and step acceptance are judged on
/// `diag(row_scale)·G`. A trial step is accepted when the 2-norm of the residual decreases; the
/// damping is multiplied by 10 on rejection and divided by 10 on acceptance.
/// Non-convergence returns the best iterate with `converged = false`.
pub(crate) fn solve<R, L>(
    start: &[f64],
    residual: R,
    linearize: L,
    row_scale: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<SolverOutcome>
where
    R: Fn(&[f64]) -> Result<DVector<f64>>,
    L: Fn(&[f64], &DVector<f64>) -> Result<DMatrix<f64>>,
{
    let scaled = |t: &[f64]| residual(t).map(|g| g.component_mul(row_scale));
    let mut theta = start.to_vec();
    let mut g = scaled(&theta)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "estimating equation at the starting point".into(),
        ));
    }
    let tolerance = settings.tol_abs.max(settings.tol_rel * inf_norm(&g));
    let mut lambda = settings.damping;
    let mut iterations = 0;

    while iterations < settings.max_iter {
        if inf_norm(&g) <= tolerance {
            return Ok(SolverOutcome {
                residual_norm: inf_norm(&g),
                theta,
                iterations,
                converged: true,
                tolerance,
            });
        }
        iterations += 1;
        let unscaled = g.component_div(row_scale);
        let mut a = linearize(&theta, &unscaled)?;
        for (mut row, s) in a.row_iter_mut().zip(row_scale.iter()) {
            row *= *s;
        }
        let ata = a.transpose() * &a;
        let atg = a.transpose() * &g;
        let diag = ata.diagonal().map(|d| if d > 0.0 { d } else { 1.0 });
        let current = g.norm();

        let mut accepted = false;
        while lambda <= MAX_DAMPING {
            let mut m = ata.clone();
            for k in 0..m.nrows() {
                m[(k, k)] += lambda * diag[k];
            }
            let step = match m.cholesky() {
                Some(ch) => -ch.solve(&atg),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            match scaled(&trial) {
                Ok(gt) if gt.iter().all(|v| v.is_finite()) && gt.norm() < current => {
                    theta = trial;
                    g = gt;
                    lambda = (lambda / 10.0).max(MIN_DAMPING);
                    accepted = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !accepted {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular { rcond: 0.0 });
            }
            break;
        }
    }

    let residual_norm = inf_norm(&g);
    Ok(SolverOutcome {
        converged: residual_norm <= tolerance,
        residual_norm,
        theta,
        iterations,
        tolerance,
    })
}
