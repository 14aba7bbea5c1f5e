//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{KlError, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Raises every eigenvalue of the symmetric part of `m` to at least `floor`.
///
/// Matrices that already satisfy the floor are returned symmetrized but otherwise
/// untouched, so exact quadratics survive the projection bit-for-bit.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    if !all_finite_mat(m) {
        return Err(KlError::Numerical("non-finite matrix in eigenvalue projection".into()));
    }
    let sym = symmetrize(m);
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
    Ok(symmetrize(&rebuilt))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| KlError::Numerical("matrix is not symmetric positive definite".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| KlError::Numerical("matrix is not symmetric positive definite".into()))?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Lower Cholesky factor, or a numerical error when `m` is not SPD.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    symmetrize(m)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| KlError::Numerical("matrix is not symmetric positive definite".into()))
}

pub fn norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Eigenvalues of a symmetric matrix, floored, rebuilt; keeps the matrix PSD.
pub fn psd_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    eigen_floor(m, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_floor_lifts_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -3.0]);
        let f = eigen_floor(&m, 1e-6).unwrap();
        assert!(min_eigenvalue(&f) >= 1e-6 - 1e-15);
        assert!((f[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_floor_leaves_pd_untouched() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(eigen_floor(&m, 1e-6).unwrap(), m);
    }

    #[test]
    fn spd_inverse_and_logdet() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let inv = spd_inverse(&m).unwrap();
        let id = &m * &inv;
        assert!((id - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        assert!((logdet_spd(&m).unwrap() - 11.0f64.ln()).abs() < 1e-12);
        assert!(spd_inverse(&DMatrix::from_row_slice(1, 1, &[-1.0])).is_err());
    }
}
