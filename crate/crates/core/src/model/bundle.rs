use nalgebra::{DMatrix, DVector};

use super::fd::fd_hessian_with_factor;
use super::{eval_f, eval_grad, eval_hess, Dataset, ModelFunction};
use crate::error::{Error, Result};
use crate::linalg::{outer, spd_inverse};

/// Relative FD-Hessian noise above which a warning is emitted.
const HESSIAN_NOISE_WARN: f64 = 1e-6;

/// The J-matrix summaries evaluated at one parameter point.
///
/// Row `i` of `j` is `J_iᵀ = ∇f(x_i, θ)ᵀ / f(x_i, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBundle {
    pub f: DVector<f64>,
    pub j: DMatrix<f64>,
    pub jtj: DMatrix<f64>,
    pub jtj_inv: DMatrix<f64>,
    /// `n⁻¹ Σ J_i`
    pub jbar: DVector<f64>,
    /// Leverages `J_iᵀ (JᵀJ)⁻¹ J_i`.
    pub w1: DVector<f64>,
    /// Curvature weights `tr{K_i (JᵀJ)⁻¹}`, `K_i = H_i / f_i`.
    pub w2: DVector<f64>,
    /// Estimated relative noise of finite-difference Hessians, when any were used.
    pub hessian_noise: Option<f64>,
}

impl JacobianBundle {
    pub fn build(model: &dyn ModelFunction, data: &Dataset, theta: &[f64]) -> Result<Self> {
        let p = model.n_params();
        if data.len() <= p {
            return Err(Error::TooFewObservations { n: data.len(), p });
        }
        let fd_hessians = model.hessian(data.observations()[0].x, theta).is_none();
        let mut f = Vec::with_capacity(data.len());
        let mut grads = Vec::with_capacity(data.len());
        let mut hessians = Vec::with_capacity(data.len());
        let mut noise: f64 = 0.0;
        for (i, obs) in data.iter().enumerate() {
            let fi = eval_f(model, obs.x, theta)?;
            if fi == 0.0 {
                return Err(Error::ZeroMean { index: i, x: obs.x });
            }
            f.push(fi);
            grads.push(eval_grad(model, obs.x, theta)?);
            let h = eval_hess(model, obs.x, theta)?;
            if fd_hessians {
                noise = noise.max(hessian_noise(model, obs.x, theta, &h));
            }
            hessians.push(h);
        }
        let mut bundle = Self::from_rows(&f, &grads, &hessians)?;
        if fd_hessians {
            if noise > HESSIAN_NOISE_WARN {
                log::warn!(
                    "finite-difference Hessian noise {noise:.2e} for `{}` may swamp the curvature bias term",
                    model.name()
                );
            }
            bundle.hessian_noise = Some(noise);
        }
        Ok(bundle)
    }

    /// Assembles the bundle from per-observation mean values, gradients and
    /// Hessians.
    pub fn from_rows(f: &[f64], grads: &[DVector<f64>], hessians: &[DMatrix<f64>]) -> Result<Self> {
        let n = f.len();
        if grads.len() != n || hessians.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: grads.len().min(hessians.len()),
            });
        }
        let p = grads.first().map_or(0, |g| g.len());
        if p == 0 {
            return Err(Error::Invalid("empty Jacobian".into()));
        }
        if n <= p {
            return Err(Error::TooFewObservations { n, p });
        }
        if let Some(i) = f.iter().position(|&v| v == 0.0) {
            return Err(Error::ZeroMean {
                index: i,
                x: f64::NAN,
            });
        }

        let j = DMatrix::from_fn(n, p, |i, k| grads[i][k] / f[i]);
        let jtj = j.transpose() * &j;
        let jtj_inv = spd_inverse(&jtj)?;
        let jbar = j.row_sum().transpose() / n as f64;
        let w1 = DVector::from_fn(n, |i, _| {
            let ji = j.row(i).transpose();
            (ji.transpose() * &jtj_inv * &ji)[(0, 0)]
        });
        let w2 = DVector::from_fn(n, |i, _| (&hessians[i] / f[i] * &jtj_inv).trace());

        Ok(Self {
            f: DVector::from_column_slice(f),
            j,
            jtj,
            jtj_inv,
            jbar,
            w1,
            w2,
            hessian_noise: None,
        })
    }

    pub fn n(&self) -> usize {
        self.j.nrows()
    }

    pub fn p(&self) -> usize {
        self.j.ncols()
    }

    /// `J_i` as a column vector.
    pub fn row(&self, i: usize) -> DVector<f64> {
        self.j.row(i).transpose()
    }

    /// `Σ_i c_i J_i`.
    pub fn weighted_sum(&self, c: &DVector<f64>) -> DVector<f64> {
        self.j.transpose() * c
    }

    pub fn sum_j(&self) -> DVector<f64> {
        self.j.row_sum().transpose()
    }

    /// `Σ (J_i − J̄)(J_i − J̄)ᵀ`
    pub fn centered_scatter(&self) -> DMatrix<f64> {
        (0..self.n()).fold(DMatrix::zeros(self.p(), self.p()), |acc, i| {
            acc + outer(&(self.row(i) - &self.jbar))
        })
    }

    /// `Σ w₁,ᵢ − p`, zero up to rounding.
    pub fn hat_trace_error(&self) -> f64 {
        self.w1.sum() - self.p() as f64
    }
}

/// Relative change of an FD Hessian when the step is doubled.
fn hessian_noise(model: &dyn ModelFunction, x: f64, theta: &[f64], h: &DMatrix<f64>) -> f64 {
    let coarse = fd_hessian_with_factor(model, x, theta, 2.0);
    (h - coarse).amax() / h.amax().max(f64::MIN_POSITIVE)
}
