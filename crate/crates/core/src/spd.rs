//! Symmetric positive-definite matrix kernels.
//!
//! Square roots and inverse square roots go through a symmetric
//! eigendecomposition. Eigenvalues below [`EIG_FLOOR`] are clamped to the
//! floor before the root is taken, so both functions are total on PSD input.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Floor applied to eigenvalues in every SPD decomposition.
pub const EIG_FLOOR: f64 = 1e-10;

/// Relative asymmetry accepted by the SPD kernels before they refuse input.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Largest absolute difference between `m` and its transpose.
pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    let scale = m.amax().max(1.0);
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * scale || !asym.is_finite() {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Applies `f` to the floored spectrum of the symmetric matrix `m`.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let eig = SymmetricEigen::new(symmetrize(m));
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = f(lambda.max(EIG_FLOOR));
        scaled.column_mut(j).scale_mut(v);
    }
    Ok(symmetrize(&(scaled * q.transpose())))
}

/// Principal square root of a symmetric PSD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, f64::sqrt)
}

/// Inverse principal square root of a symmetric PSD matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(m, |l| 1.0 / l.sqrt())
}

/// Smallest eigenvalue of a symmetric matrix (no flooring).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
