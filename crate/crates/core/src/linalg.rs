//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("singular linear system (condition estimate {cond:.3e})")]
    Singular { cond: f64 },
    #[error("non-finite values in linear system")]
    NonFinite,
}

/// Rough condition estimate from the LU factors: ratio of the largest to the
/// smallest absolute diagonal entry of U. Cheap, and good enough to make a
/// singular-system error message actionable.
fn lu_cond_estimate(lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let u = lu.u();
    let n = u.nrows().min(u.ncols());
    let mut max_d = 0.0f64;
    let mut min_d = f64::INFINITY;
    for i in 0..n {
        let d = u[(i, i)].abs();
        max_d = max_d.max(d);
        min_d = min_d.min(d);
    }
    if min_d == 0.0 { f64::INFINITY } else { max_d / min_d }
}

/// Solve `A x = b` by LU with partial pivoting.
pub fn solve_lu(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let lu = a.lu();
    let cond = lu_cond_estimate(&lu);
    match lu.solve(b) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(x),
        _ => Err(LinalgError::Singular { cond }),
    }
}

/// Solve a symmetric positive definite system by Cholesky.
pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    match a.cholesky() {
        Some(chol) => {
            let x = chol.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                Ok(x)
            } else {
                Err(LinalgError::NonFinite)
            }
        }
        None => Err(LinalgError::Singular { cond: f64::INFINITY }),
    }
}

/// Minimum-norm least squares via SVD: x minimizing ‖Ax − b‖₂, smallest ‖x‖
/// on rank deficiency.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let eps = max_sv * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    let x = svd
        .solve(b, eps)
        .map_err(|_| LinalgError::Singular { cond: f64::INFINITY })?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Smallest eigenvalue of a symmetric matrix (symmetrized first).
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}
