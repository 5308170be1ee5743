//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Reciprocal condition below which a symmetric positive definite matrix is
/// treated as singular.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// Reciprocal 2-norm condition number of the unit-diagonal rescaling
/// `D^{-1/2} A D^{-1/2}` of a symmetric matrix.
pub fn scaled_rcond(a: &DMatrix<f64>) -> f64 {
    let d = a.diagonal();
    if d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return 0.0;
    }
    let s = d.map(|v| v.sqrt().recip());
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * s[i] * s[j]);
    let eig = SymmetricEigen::new(scaled).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if max <= 0.0 || !min.is_finite() {
        return 0.0;
    }
    (min / max).max(0.0)
}

/// Inverse of a symmetric positive definite matrix, refusing ill-conditioned
/// input.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rcond = scaled_rcond(a);
    if rcond < RCOND_THRESHOLD {
        return Err(Error::Singular { rcond });
    }
    let d = a.diagonal().map(|v| v.sqrt().recip());
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * d[i] * d[j]);
    let chol = scaled.cholesky().ok_or(Error::Singular { rcond })?;
    let inv = chol.inverse();
    Ok(symmetrize(&DMatrix::from_fn(
        a.nrows(),
        a.ncols(),
        |i, j| inv[(i, j)] * d[i] * d[j],
    )))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

/// PSD up to a floor of `-1e-10 · trace`.
pub fn is_psd(a: &DMatrix<f64>) -> bool {
    let floor = -1e-10 * a.trace().abs();
    min_eigenvalue(a) >= floor
}

/// Max-entry relative difference `‖a − b‖_max / max(‖a‖_max, ‖b‖_max)`.
pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        return 0.0;
    }
    (a - b).amax() / scale
}

pub fn outer(v: &DVector<f64>) -> DMatrix<f64> {
    v * v.transpose()
}
