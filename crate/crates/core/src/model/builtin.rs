use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Dataset, ModelFunction};

/// `f = θ₁`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Constant;

impl ModelFunction for Constant {
    fn name(&self) -> &str {
        "constant"
    }

    fn n_params(&self) -> usize {
        1
    }

    fn value(&self, _x: f64, theta: &[f64]) -> f64 {
        theta[0]
    }

    fn gradient(&self, _x: f64, _theta: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::from_element(1, 1.0))
    }

    fn hessian(&self, _x: f64, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 1))
    }

    fn dfdx(&self, _x: f64, _theta: &[f64]) -> Option<f64> {
        Some(0.0)
    }

    fn initial_guess(&self, data: &Dataset) -> Option<Vec<f64>> {
        Some(vec![
            data.iter().map(|o| o.y).sum::<f64>() / data.len() as f64,
        ])
    }

    fn scale_parameter(&self) -> Option<usize> {
        Some(0)
    }
}

/// Fixed covariate shapes `g(x)` for [`ScaledShape`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `g(x) = exp(-rate · x)`
    Exp { rate: f64 },
    /// `g(x) = intercept + slope · x`
    Affine { intercept: f64, slope: f64 },
}

impl Shape {
    fn eval(&self, x: f64) -> f64 {
        match *self {
            Shape::Exp { rate } => (-rate * x).exp(),
            Shape::Affine { intercept, slope } => intercept + slope * x,
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match *self {
            Shape::Exp { rate } => -rate * (-rate * x).exp(),
            Shape::Affine { slope, .. } => slope,
        }
    }
}

type ShapeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `f = θ₁ · g(x)` for a fixed shape `g`.
#[derive(Clone)]
pub struct ScaledShape {
    label: String,
    g: ShapeFn,
    dg: Option<ShapeFn>,
}

impl ScaledShape {
    pub fn new(shape: Shape) -> Self {
        Self {
            label: "scaled_shape".to_string(),
            g: Arc::new(move |x| shape.eval(x)),
            dg: Some(Arc::new(move |x| shape.derivative(x))),
        }
    }

    /// Wraps an arbitrary shape function; `dg/dx` is then differenced.
    pub fn custom(
        label: impl Into<String>,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            g: Arc::new(g),
            dg: None,
        }
    }

    pub fn shape_at(&self, x: f64) -> f64 {
        (self.g)(x)
    }
}

impl fmt::Debug for ScaledShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScaledShape")
            .field("label", &self.label)
            .finish()
    }
}

impl ModelFunction for ScaledShape {
    fn name(&self) -> &str {
        &self.label
    }

    fn n_params(&self) -> usize {
        1
    }

    fn value(&self, x: f64, theta: &[f64]) -> f64 {
        theta[0] * (self.g)(x)
    }

    fn gradient(&self, x: f64, _theta: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::from_element(1, (self.g)(x)))
    }

    fn hessian(&self, _x: f64, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(1, 1))
    }

    fn dfdx(&self, x: f64, theta: &[f64]) -> Option<f64> {
        self.dg.as_ref().map(|dg| theta[0] * dg(x))
    }

    fn initial_guess(&self, data: &Dataset) -> Option<Vec<f64>> {
        let (num, den) = data.iter().fold((0.0, 0.0), |(n, d), o| {
            let g = (self.g)(o.x);
            (n + o.y * g, d + g * g)
        });
        (den > 0.0).then(|| vec![num / den])
    }

    fn scale_parameter(&self) -> Option<usize> {
        Some(0)
    }
}

/// `f = θ₁ · exp(−x / θ₂)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpDecay;

impl ModelFunction for ExpDecay {
    fn name(&self) -> &str {
        "exp_decay"
    }

    fn n_params(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["amplitude".into(), "scale".into()]
    }

    fn value(&self, x: f64, theta: &[f64]) -> f64 {
        theta[0] * (-x / theta[1]).exp()
    }

    fn gradient(&self, x: f64, theta: &[f64]) -> Option<DVector<f64>> {
        let (a, s) = (theta[0], theta[1]);
        let e = (-x / s).exp();
        Some(DVector::from_vec(vec![e, a * x / (s * s) * e]))
    }

    fn hessian(&self, x: f64, theta: &[f64]) -> Option<DMatrix<f64>> {
        let (a, s) = (theta[0], theta[1]);
        let e = (-x / s).exp();
        let cross = x / (s * s) * e;
        let ss = a * e * (x * x / s.powi(4) - 2.0 * x / s.powi(3));
        Some(DMatrix::from_row_slice(2, 2, &[0.0, cross, cross, ss]))
    }

    fn dfdx(&self, x: f64, theta: &[f64]) -> Option<f64> {
        Some(-theta[0] / theta[1] * (-x / theta[1]).exp())
    }

    fn domain_violation(&self, _x: f64, theta: &[f64]) -> Option<String> {
        (theta[1] == 0.0).then(|| "scale parameter must be non-zero".to_string())
    }

    fn initial_guess(&self, data: &Dataset) -> Option<Vec<f64>> {
        let xs = data.xs();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ymax = data.iter().map(|o| o.y).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        (range > 0.0).then(|| vec![ymax, range])
    }

    fn scale_parameter(&self) -> Option<usize> {
        Some(0)
    }
}

/// `f = θ₁ + θ₂ x`. Not of the scale-factor form.
#[derive(Debug, Clone, Copy, Default)]
pub struct Linear;

impl ModelFunction for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn n_params(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["intercept".into(), "slope".into()]
    }

    fn value(&self, x: f64, theta: &[f64]) -> f64 {
        theta[0] + theta[1] * x
    }

    fn gradient(&self, x: f64, _theta: &[f64]) -> Option<DVector<f64>> {
        Some(DVector::from_vec(vec![1.0, x]))
    }

    fn hessian(&self, _x: f64, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(2, 2))
    }

    fn dfdx(&self, _x: f64, theta: &[f64]) -> Option<f64> {
        Some(theta[1])
    }

    fn initial_guess(&self, data: &Dataset) -> Option<Vec<f64>> {
        let n = data.len() as f64;
        let mx = data.iter().map(|o| o.x).sum::<f64>() / n;
        let my = data.iter().map(|o| o.y).sum::<f64>() / n;
        let sxx: f64 = data.iter().map(|o| (o.x - mx).powi(2)).sum();
        let sxy: f64 = data.iter().map(|o| (o.x - mx) * (o.y - my)).sum();
        (sxx > 0.0).then(|| {
            let b = sxy / sxx;
            vec![my - b * mx, b]
        })
    }
}

/// Saturating exponential dose response `f = α₁ (1 − exp(−(x + α₂)/α₃))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SaturatingExponential;

impl SaturatingExponential {
    fn decay(x: f64, theta: &[f64]) -> f64 {
        (-(x + theta[1]) / theta[2]).exp()
    }
}

impl ModelFunction for SaturatingExponential {
    fn name(&self) -> &str {
        "saturating_exponential"
    }

    fn n_params(&self) -> usize {
        3
    }

    fn param_names(&self) -> Vec<String> {
        vec!["alpha1".into(), "alpha2".into(), "alpha3".into()]
    }

    fn value(&self, x: f64, theta: &[f64]) -> f64 {
        theta[0] * (1.0 - Self::decay(x, theta))
    }

    fn gradient(&self, x: f64, theta: &[f64]) -> Option<DVector<f64>> {
        let (a1, a2, a3) = (theta[0], theta[1], theta[2]);
        let e = Self::decay(x, theta);
        Some(DVector::from_vec(vec![
            1.0 - e,
            a1 * e / a3,
            -a1 * (x + a2) / (a3 * a3) * e,
        ]))
    }

    fn hessian(&self, x: f64, theta: &[f64]) -> Option<DMatrix<f64>> {
        let (a1, a2, a3) = (theta[0], theta[1], theta[2]);
        let e = Self::decay(x, theta);
        let u = x + a2;
        let h12 = e / a3;
        let h13 = -u / (a3 * a3) * e;
        let h22 = -a1 * e / (a3 * a3);
        let h23 = a1 * e * (u / a3.powi(3) - 1.0 / (a3 * a3));
        let h33 = a1 * u * e * (2.0 / a3.powi(3) - u / a3.powi(4));
        Some(DMatrix::from_row_slice(
            3,
            3,
            &[0.0, h12, h13, h12, h22, h23, h13, h23, h33],
        ))
    }

    fn dfdx(&self, x: f64, theta: &[f64]) -> Option<f64> {
        Some(theta[0] * Self::decay(x, theta) / theta[2])
    }

    fn domain_violation(&self, _x: f64, theta: &[f64]) -> Option<String> {
        (theta[2] == 0.0).then(|| "alpha3 must be non-zero".to_string())
    }

    /// Profile search: for fixed α₃ the mean is `A + B·exp(−x/α₃)` with
    /// `A = α₁`, `B = −α₁ exp(−α₂/α₃)`, linear in `(A, B)`. Scans α₃ over a
    /// geometric grid around the dose range and keeps the best fit.
    fn initial_guess(&self, data: &Dataset) -> Option<Vec<f64>> {
        let xs = data.xs();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if !(range > 0.0) {
            return None;
        }
        let mut best: Option<(f64, [f64; 3])> = None;
        let steps = 240;
        for k in 0..=steps {
            let a3 = range * 10f64.powf(-2.0 + 3.5 * k as f64 / steps as f64);
            // weighted by 1/y² to match the proportional error structure
            let (mut s00, mut s01, mut s11, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for o in data.iter() {
                let w = if o.y != 0.0 { 1.0 / (o.y * o.y) } else { 0.0 };
                let e = (-(o.x - lo) / a3).exp();
                s00 += w;
                s01 += w * e;
                s11 += w * e * e;
                t0 += w * o.y;
                t1 += w * o.y * e;
            }
            let det = s00 * s11 - s01 * s01;
            if !(det.abs() > 0.0) {
                continue;
            }
            let a = (s11 * t0 - s01 * t1) / det;
            let b = (s00 * t1 - s01 * t0) / det;
            if !(a > 0.0 && b < 0.0) {
                continue;
            }
            let sse: f64 = data
                .iter()
                .filter(|o| o.y != 0.0)
                .map(|o| ((o.y - a - b * (-(o.x - lo) / a3).exp()) / o.y).powi(2))
                .sum();
            // B = −α₁ exp(−(lo + α₂)/α₃) after shifting x by lo
            let a2 = -a3 * (-b / a).ln() - lo;
            if sse.is_finite() && best.is_none_or(|(s, _)| sse < s) {
                best = Some((sse, [a, a2, a3]));
            }
        }
        best.map(|(_, t)| t.to_vec())
    }

    fn scale_parameter(&self) -> Option<usize> {
        Some(0)
    }
}
