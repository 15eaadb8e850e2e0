//! Small dense linear-algebra helpers shared by the identification and control code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

const SCHUR_MAX_SWEEPS: usize = 10_000;

/// Largest eigenvalue magnitude of a square matrix, or NaN if the Schur
/// iteration fails to converge.
///
/// Matrices with exact shift structure (delay chains) can stall the QR
/// iteration; a fixed orthogonal similarity is tried before giving up.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let radius = |a: DMatrix<f64>| {
        nalgebra::Schur::try_new(a, f64::EPSILON, SCHUR_MAX_SWEEPS * n)
            .map(|s| s.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max))
    };
    radius(m.clone())
        .or_else(|| {
            let q = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 13) % 17) as f64 - 8.0 + if i == j { 20.0 } else { 0.0 })
                .qr()
                .q();
            radius(&q * m * q.transpose())
        })
        .unwrap_or(f64::NAN)
}

/// Moore–Penrose pseudoinverse with singular values below `rtol * sigma_max`
/// discarded. Returns the inverse and the retained rank.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> Result<(DMatrix<f64>, usize)> {
    let svd = m.clone().try_svd(true, true, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical("SVD did not converge".into())
    })?;
    let sigma_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rtol * sigma_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    let inv = svd
        .pseudo_inverse(cutoff.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((inv, rank))
}

/// Solves `x * m = rhs` for symmetric positive definite `m`.
pub fn solve_right_spd(rhs: &DMatrix<f64>, m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    Some(chol.solve(&rhs.transpose()).transpose())
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
