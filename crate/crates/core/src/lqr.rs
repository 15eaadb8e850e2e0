//! Infinite-horizon discrete LQR on the lifted predictor.

use nalgebra::{DMatrix, DVector};

use crate::edmd::LiftedPredictor;
use crate::error::{Error, Result};
use crate::lifting::{HistoryBuffer, LiftingSpec};
use crate::linalg::{is_finite, spectral_radius, symmetrize};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100_000;
const MAX_DOUBLING_STEPS: usize = 200;

/// `|| P - A'PA + A'PB (R + B'PB)^{-1} B'PA - Q ||_F`.
pub fn riccati_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    match riccati_map(a, b, q, r, p) {
        Some(next) => (p - next).norm(),
        None => f64::INFINITY,
    }
}

/// One Riccati recursion `Q + A'PA - A'PB (R + B'PB)^{-1} B'PA`.
fn riccati_map(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s.cholesky()?.solve(&(&bt_p * a));
    let at_p = a.transpose() * p;
    Some(q + &at_p * a - at_p * b * gain)
}

fn check_dims(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    Ok(())
}

/// Stabilizing solution of the discrete algebraic Riccati equation.
///
/// Structure-preserving doubling iterates on `(A_k, G_k, H_k)` with
/// `G_0 = B R^{-1} B'`, `H_0 = Q`, converging quadratically to `P`; it is
/// followed by plain Riccati recursions until the update falls below `tol`.
/// Both stages symmetrize their iterates.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    check_dims(a, b, q, r)?;
    let n = a.nrows();
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("R must be positive definite".into()))?;

    let mut iterations = 0;
    let mut p = doubling(a, &(b * r_chol.solve(&b.transpose())), q, tol, &mut iterations).unwrap_or_else(|| {
        log::debug!("doubling did not converge; falling back to fixed-point recursion");
        symmetrize(q)
    });

    loop {
        let next = riccati_map(a, b, q, r, &p)
            .map(|m| symmetrize(&m))
            .filter(is_finite)
            .ok_or_else(|| Error::Numerical("Riccati recursion broke down".into()))?;
        let delta = (&next - &p).norm();
        p = next;
        iterations += 1;
        if delta <= tol * (1.0 + p.norm()) {
            break;
        }
        if iterations >= max_iter {
            return Err(Error::DareNotConverged { iterations, residual: riccati_residual(a, b, q, r, &p) });
        }
    }
    debug_assert_eq!(p.nrows(), n);

    let k = gain(a, b, &p, r)?;
    let rho = spectral_radius(&(a - b * &k));
    if !(rho < 1.0) {
        return Err(Error::NotStabilizable { spectral_radius: rho });
    }
    Ok(p)
}

fn doubling(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>, tol: f64, iterations: &mut usize) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let (mut ak, mut gk, mut hk) = (a.clone(), symmetrize(g), symmetrize(q));
    for _ in 0..MAX_DOUBLING_STEPS {
        *iterations += 1;
        let lu = (&eye + &gk * &hk).lu();
        let w_a = lu.solve(&ak)?;
        let w_g = lu.solve(&gk)?;
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_a));
        let g_next = symmetrize(&(&gk + &ak * w_g * ak.transpose()));
        let a_next = &ak * w_a;
        if !(is_finite(&h_next) && is_finite(&g_next) && is_finite(&a_next)) {
            return None;
        }
        let delta = (&h_next - &hk).norm();
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if delta <= tol * (1.0 + hk.norm()) {
            return Some(hk);
        }
    }
    None
}

/// `K = (R + B'PB)^{-1} B'PA`.
pub fn gain(a: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let rhs = &bt_p * a;
    s.clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| s.lu().solve(&rhs))
        .ok_or_else(|| Error::Numerical("R + B'PB is singular".into()))
}

/// State penalty acting only on `phi` and `phi_dot` of the newest observable block.
pub fn output_state_penalty(spec: LiftingSpec, q_phi: f64, q_phi_dot: f64) -> DMatrix<f64> {
    let n = spec.lifted_dim();
    let off = spec.newest_offset();
    let mut q = DMatrix::zeros(n, n);
    q[(off, off)] = q_phi;
    q[(off + 1, off + 1)] = q_phi_dot;
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl LqrDesign {
    pub fn new(pred: &LiftedPredictor, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let p = solve_dare(&pred.a, &pred.b, &q, &r, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let k = gain(&pred.a, &pred.b, &p, &r)?;
        Ok(Self { q, r, k, p })
    }

    pub fn closed_loop_spectral_radius(&self, pred: &LiftedPredictor) -> f64 {
        spectral_radius(&(&pred.a - &pred.b * &self.k))
    }
}

pub fn saturate(u: f64, limit: f64) -> f64 {
    u.clamp(-limit, limit)
}

/// `u = clamp(-K Psi(y), -limit, limit)`; zero until the history is full.
pub fn lqr_control(k: &DMatrix<f64>, buffer: &HistoryBuffer, spec: LiftingSpec, limit: f64) -> f64 {
    match buffer.lift(spec) {
        Ok(z) => {
            let u: DVector<f64> = -(k * z);
            saturate(u[0], limit)
        }
        Err(_) => 0.0,
    }
}
