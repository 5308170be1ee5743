//! `propfit check`: algebraic invariants on bundled fixtures.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use propfit_core::asymptotics::{
    bias_from_bundle, check_theta1_factorization, cov_ml_exact_from_bundle,
    cov_ml_full_from_bundle, cov_order2_from_bundle, expected_information, limit_from_bundle,
    ml_covariance_identity_error, score_covariance, ErrorMoments,
};
use propfit_core::equivalent_dose::{beta1_from_gamma, solve_gamma, PartialBleachModel};
use propfit_core::estimators::Method;
use propfit_core::linalg::{min_eigenvalue, rel_diff};
use propfit_core::model::{
    eval_f, fd_check, Constant, Dataset, ExpDecay, JacobianBundle, Linear, ModelFunction,
    SaturatingExponential, ScaledShape, Shape,
};
use propfit_core::simulation::{
    BLEACH_ALPHA, BLEACH_BETA2, BLEACH_BETA3, BLEACH_GAMMA, DEFAULT_X1,
};
use serde::Serialize;

use crate::args::CheckArgs;
use crate::error::Result;

const IDENTITY_TOL: f64 = 1e-10;
const HAT_TRACE_TOL: f64 = 1e-10;
const CHECK_SIGMA: f64 = 0.05;

/// A model and the point its invariants are evaluated at; `y = f` exactly.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub model: Arc<dyn ModelFunction>,
    pub theta: Vec<f64>,
    pub xs: Vec<f64>,
}

impl Fixture {
    fn new(name: &str, model: Arc<dyn ModelFunction>, theta: Vec<f64>, xs: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            model,
            theta,
            xs,
        }
    }

    pub fn dataset(&self) -> propfit_core::Result<Dataset> {
        let ys = self
            .xs
            .iter()
            .map(|&x| eval_f(self.model.as_ref(), x, &self.theta))
            .collect::<propfit_core::Result<Vec<_>>>()?;
        Dataset::from_xy(&self.xs, &ys)
    }

    pub fn bundle(&self) -> propfit_core::Result<JacobianBundle> {
        JacobianBundle::build(self.model.as_ref(), &self.dataset()?, &self.theta)
    }
}

pub fn fixtures() -> Vec<Fixture> {
    let grid = |n: usize, step: f64| (0..n).map(|i| step * i as f64).collect::<Vec<_>>();
    vec![
        Fixture::new("constant", Arc::new(Constant), vec![100.0], grid(20, 1.0)),
        Fixture::new(
            "exp_decay",
            Arc::new(ExpDecay),
            vec![2.0, 3.0],
            grid(25, 0.5),
        ),
        Fixture::new(
            "saturating_exponential",
            Arc::new(SaturatingExponential),
            BLEACH_ALPHA.to_vec(),
            DEFAULT_X1.to_vec(),
        ),
        Fixture::new(
            "linear",
            Arc::new(Linear),
            vec![1.0, 0.5],
            (1..=10).map(f64::from).collect(),
        ),
        Fixture::new(
            "scaled_shape",
            Arc::new(ScaledShape::new(Shape::Exp { rate: 0.1 })),
            vec![5.0],
            grid(10, 1.0),
        ),
    ]
}

/// Exponential decay whose analytic gradient is off by 1% in θ₁.
#[derive(Debug)]
struct WrongGradient;

impl ModelFunction for WrongGradient {
    fn name(&self) -> &str {
        "wrong_gradient"
    }

    fn n_params(&self) -> usize {
        2
    }

    fn value(&self, x: f64, theta: &[f64]) -> f64 {
        ExpDecay.value(x, theta)
    }

    fn gradient(&self, x: f64, theta: &[f64]) -> Option<DVector<f64>> {
        ExpDecay.gradient(x, theta).map(|mut g| {
            g[0] *= 1.01;
            g
        })
    }

    fn hessian(&self, x: f64, theta: &[f64]) -> Option<DMatrix<f64>> {
        ExpDecay.hessian(x, theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub check: String,
    pub fixture: String,
    pub passed: bool,
    /// Measured discrepancy (signed for the hat trace).
    pub measured: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckRow>,
}

struct Rows(Vec<CheckRow>);

impl Rows {
    fn push(&mut self, check: &str, fixture: &str, measured: f64, tolerance: f64, passed: bool) {
        self.0.push(CheckRow {
            check: check.to_string(),
            fixture: fixture.to_string(),
            passed: passed && measured.is_finite(),
            measured,
            tolerance,
            detail: None,
        });
    }

    fn within(&mut self, check: &str, fixture: &str, measured: f64, tolerance: f64) {
        self.push(
            check,
            fixture,
            measured,
            tolerance,
            measured.abs() <= tolerance,
        );
    }

    fn failed(&mut self, check: &str, fixture: &str, err: impl ToString) {
        self.0.push(CheckRow {
            check: check.to_string(),
            fixture: fixture.to_string(),
            passed: false,
            measured: f64::NAN,
            tolerance: 0.0,
            detail: Some(err.to_string()),
        });
    }
}

pub fn run_check(args: &CheckArgs) -> Result<CheckReport> {
    let mut fx = fixtures();
    if args.inject_wrong_gradient {
        fx.push(Fixture::new(
            "wrong_gradient",
            Arc::new(WrongGradient),
            vec![2.0, 3.0],
            (0..25).map(|i| 0.5 * i as f64).collect(),
        ));
    }
    let mut rows = Rows(Vec::new());
    for f in &fx {
        fixture_checks(f, &mut rows);
    }
    structure_checks(&mut rows);
    let checks = rows.0;
    Ok(CheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

fn fixture_checks(f: &Fixture, rows: &mut Rows) {
    let name = f.name.as_str();
    let fd = fd_check(f.model.as_ref(), &f.theta, &f.xs);
    let fd_err = fd
        .gradient_rel_error
        .unwrap_or(0.0)
        .max(fd.hessian_rel_error.unwrap_or(0.0));
    rows.push("fd_derivatives", name, fd_err, fd.tolerance, fd.passed);

    let bundle = match f.bundle() {
        Ok(b) => b,
        Err(e) => return rows.failed("bundle", name, e),
    };
    rows.within("hat_trace", name, bundle.hat_trace_error(), HAT_TRACE_TOL);
    let outside = bundle
        .w1
        .iter()
        .map(|&w| (-w).max(w - 1.0).max(0.0))
        .fold(0.0, f64::max);
    rows.within("leverage_range", name, outside, 1e-12);

    let s = CHECK_SIGMA;
    match ml_covariance_identity_error(&bundle, s) {
        Ok(e) => rows.within("ml_covariance_forms", name, e, IDENTITY_TOL),
        Err(e) => rows.failed("ml_covariance_forms", name, e),
    }
    let p = bundle.p();
    match (
        cov_ml_full_from_bundle(&bundle, s),
        cov_ml_exact_from_bundle(&bundle, s),
    ) {
        (Ok(full), Ok(exact)) => {
            let block = full.view((0, 0), (p, p)).into_owned();
            rows.within(
                "ml_full_block",
                name,
                rel_diff(&block, &exact),
                IDENTITY_TOL,
            );
            let gap = cov_order2_from_bundle(&bundle, s) - &exact;
            let scale = cov_order2_from_bundle(&bundle, s).amax();
            let min = min_eigenvalue(&gap) / scale;
            rows.push("order2_minus_ml_psd", name, min, 1e-10, min >= -1e-10);
        }
        (Err(e), _) | (_, Err(e)) => rows.failed("ml_full_block", name, e),
    }
    match (
        score_covariance(&bundle, s, ErrorMoments::NORMAL),
        expected_information(&bundle, s),
    ) {
        (Ok(score), Ok(info)) => rows.within(
            "bartlett_identity",
            name,
            rel_diff(&score, &info),
            IDENTITY_TOL,
        ),
        (Err(e), _) | (_, Err(e)) => rows.failed("bartlett_identity", name, e),
    }
    for method in [Method::Wls, Method::Dwls] {
        let check = format!("limit_mean_shift_{}", method.label().to_lowercase());
        match limit_from_bundle(method, &bundle, s, false) {
            Ok(lim) => {
                let expected =
                    bias_from_bundle(method, &bundle, s) * ((bundle.n() as f64).sqrt() / s);
                let err = vec_rel_diff(&lim.mean_shift, &expected);
                rows.within(&check, name, err, IDENTITY_TOL);
            }
            Err(e) => rows.failed(&check, name, e),
        }
    }
}

fn vec_rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).amax() / scale
    }
}

fn structure_checks(rows: &mut Rows) {
    let fx = fixtures();
    for f in &fx {
        let expect = match f.name.as_str() {
            "saturating_exponential" | "constant" | "scaled_shape" | "exp_decay" => true,
            "linear" => false,
            _ => continue,
        };
        let check = "theta1_factorization";
        match f
            .dataset()
            .and_then(|d| check_theta1_factorization(f.model.as_ref(), &d, &f.theta))
        {
            Ok(fc) => {
                let off =
                    fc.v.iter().skip(1).fold(0.0_f64, |m, v| m.max(v.abs())) / f.theta[0].abs();
                rows.push(check, &f.name, off, 1e-8, fc.factorized == expect);
                if let Some(d) = fc.ml_wls_bias_rel_diff {
                    rows.within("ml_wls_shape_bias", &f.name, d, IDENTITY_TOL);
                }
            }
            Err(e) => rows.failed(check, &f.name, e),
        }
    }

    let check = "gamma_round_trip";
    let result = beta1_from_gamma(&BLEACH_ALPHA, BLEACH_BETA2, BLEACH_BETA3, BLEACH_GAMMA)
        .and_then(|b1| {
            let theta = [
                BLEACH_ALPHA[0],
                BLEACH_ALPHA[1],
                BLEACH_ALPHA[2],
                b1,
                BLEACH_BETA2,
                BLEACH_BETA3,
            ];
            solve_gamma(&PartialBleachModel, &theta, None)
        });
    match result {
        Ok(root) => rows.within(check, "partial_bleach", root.gamma - BLEACH_GAMMA, 1e-8),
        Err(e) => rows.failed(check, "partial_bleach", e),
    }
}

pub fn render_check(report: &CheckReport) -> String {
    let mut out = String::new();
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let _ = write!(
            out,
            "{status}  {:<22} {:<24} measured = {:>10.3e}  tol = {:.0e}",
            c.check, c.fixture, c.measured, c.tolerance
        );
        if let Some(d) = &c.detail {
            let _ = write!(out, "  ({d})");
        }
        out.push('\n');
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(out, "{} checks, {} failed", report.checks.len(), failed);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_pass() {
        let report = run_check(&CheckArgs {
            inject_wrong_gradient: false,
        })
        .unwrap();
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let report = run_check(&CheckArgs {
            inject_wrong_gradient: true,
        })
        .unwrap();
        assert!(!report.passed);
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].check, "fd_derivatives");
        assert_eq!(failed[0].fixture, "wrong_gradient");
    }
}
