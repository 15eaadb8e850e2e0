//! Dense ADMM solver for strictly convex QPs
//!
//! ```text
//! min 1/2 x'Hx + f'x   s.t.  b_min <= G x <= b_max
//! ```
//!
//! The iteration is the operator-splitting scheme popularized by OSQP: Ruiz
//! equilibration of `(H, G)`, a single cached factorization of
//! `H + sigma I + G' diag(rho) G`, over-relaxation, and an optional polishing
//! pass that solves the equality-constrained problem on the guessed active set.
//!
//! Dual sign convention: `y_i > 0` when the upper bound is active and `y_i < 0`
//! for the lower bound, so stationarity reads `Hx + f + G'y = 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::inf_norm;

const RUIZ_MIN_NORM: f64 = 1e-4;
const RUIZ_MAX_NORM: f64 = 1e4;
/// Bounds beyond this magnitude are treated as infinite.
const INFINITY_BOUND: f64 = 1e20;
const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    /// Iterations between primal infeasibility tests.
    pub infeasibility_window: usize,
    pub eps_primal_infeasible: f64,
    pub polish: bool,
    /// Keep per-iteration objective and residuals in the solution.
    pub record_history: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            infeasibility_window: 100,
            eps_primal_infeasible: 1e-5,
            polish: true,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub b_min: DVector<f64>,
    pub b_max: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self { h, f, g: DMatrix::zeros(0, n), b_min: DVector::zeros(0), b_max: DVector::zeros(0) }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f.len();
        let c = self.g.nrows();
        if self.h.shape() != (n, n) || self.g.ncols() != n || self.b_min.len() != c || self.b_max.len() != c {
            return Err(Error::Dimension(format!(
                "H {:?}, f {}, G {:?}, b_min {}, b_max {}",
                self.h.shape(),
                n,
                self.g.shape(),
                self.b_min.len(),
                self.b_max.len()
            )));
        }
        validate_bounds(&self.b_min, &self.b_max)?;
        validate_hessian(&self.h)
    }
}

fn validate_hessian(h: &DMatrix<f64>) -> Result<()> {
    let asym = (h - h.transpose()).abs().max();
    if asym > 1e-12 * (1.0 + h.abs().max()) {
        return Err(Error::InvalidInput(format!("H is not symmetric (max asymmetry {asym:.3e})")));
    }
    if h.clone().cholesky().is_none() {
        return Err(Error::InvalidInput("H is not positive definite".into()));
    }
    Ok(())
}

fn validate_bounds(b_min: &DVector<f64>, b_max: &DVector<f64>) -> Result<()> {
    for (i, (lo, hi)) in b_min.iter().zip(b_max.iter()).enumerate() {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidInput(format!("bound {i}: b_min = {lo} > b_max = {hi}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub polished: bool,
    pub history: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// ADMM workspace for a fixed `(H, G)` pair; `f` and the bounds may change
/// between solves.
#[derive(Debug, Clone)]
pub struct AdmmSolver {
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    h_scaled: DMatrix<f64>,
    g_scaled: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    cost_scale: f64,
    settings: QpSettings,
    factor: Option<(Vec<u8>, Cholesky<f64, Dyn>)>,
}

impl AdmmSolver {
    pub fn new(h: DMatrix<f64>, g: DMatrix<f64>, settings: QpSettings) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || g.ncols() != n {
            return Err(Error::Dimension(format!("H {:?}, G {:?}", h.shape(), g.shape())));
        }
        validate_hessian(&h)?;
        let c = g.nrows();
        let mut hs = h.clone();
        let mut gs = g.clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(c, 1.0);
        let clip = |v: f64| if v < RUIZ_MIN_NORM { 1.0 } else { v.min(RUIZ_MAX_NORM) };
        for _ in 0..settings.scaling_iters {
            let delta = DVector::from_fn(n, |j, _| {
                let col = hs.column(j).amax().max(if c > 0 { gs.column(j).amax() } else { 0.0 });
                1.0 / clip(col).sqrt()
            });
            let eps = DVector::from_fn(c, |i, _| 1.0 / clip(gs.row(i).amax()).sqrt());
            for j in 0..n {
                for i in 0..n {
                    hs[(i, j)] *= delta[i] * delta[j];
                }
                for i in 0..c {
                    gs[(i, j)] *= eps[i] * delta[j];
                }
            }
            d.component_mul_assign(&delta);
            e.component_mul_assign(&eps);
        }
        let mean_col = if n > 0 { (0..n).map(|j| hs.column(j).amax()).sum::<f64>() / n as f64 } else { 1.0 };
        let cost_scale = 1.0 / clip(mean_col);
        hs *= cost_scale;
        Ok(Self { h, g, h_scaled: hs, g_scaled: gs, d, e, cost_scale, settings, factor: None })
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn settings_mut(&mut self) -> &mut QpSettings {
        &mut self.settings
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h.nrows(), self.g.nrows())
    }

    fn rho_vector(&self, lo: &DVector<f64>, hi: &DVector<f64>) -> (Vec<u8>, DVector<f64>) {
        let rho = self.settings.rho;
        let kinds: Vec<u8> = lo
            .iter()
            .zip(hi.iter())
            .map(|(&l, &u)| {
                if l <= -INFINITY_BOUND && u >= INFINITY_BOUND {
                    0
                } else if (u - l).abs() < 1e-12 {
                    2
                } else {
                    1
                }
            })
            .collect();
        let rv = DVector::from_iterator(
            kinds.len(),
            kinds.iter().map(|k| match k {
                0 => RHO_MIN,
                2 => RHO_EQ_SCALE * rho,
                _ => rho,
            }),
        );
        (kinds, rv)
    }

    fn factorize(&mut self, kinds: &[u8], rho: &DVector<f64>) -> Result<()> {
        if matches!(&self.factor, Some((k, _)) if k.as_slice() == kinds) {
            return Ok(());
        }
        let n = self.h.nrows();
        let mut kkt = &self.h_scaled + DMatrix::identity(n, n) * self.settings.sigma;
        kkt += self.g_scaled.transpose() * DMatrix::from_diagonal(rho) * &self.g_scaled;
        let chol = kkt
            .cholesky()
            .ok_or_else(|| Error::Numerical("ADMM linear system is not positive definite".into()))?;
        self.factor = Some((kinds.to_vec(), chol));
        Ok(())
    }

    pub fn solve(
        &mut self,
        f: &DVector<f64>,
        b_min: &DVector<f64>,
        b_max: &DVector<f64>,
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution> {
        let (n, c) = self.dims();
        if f.len() != n || b_min.len() != c || b_max.len() != c {
            return Err(Error::Dimension(format!("f {}, bounds {}/{} for a {n}x{c} problem", f.len(), b_min.len(), b_max.len())));
        }
        validate_bounds(b_min, b_max)?;
        let s = self.settings.clone();

        let scale_bound = |v: f64, e: f64| {
            if v >= INFINITY_BOUND {
                f64::INFINITY
            } else if v <= -INFINITY_BOUND {
                f64::NEG_INFINITY
            } else {
                v * e
            }
        };
        let lo = DVector::from_fn(c, |i, _| scale_bound(b_min[i], self.e[i]));
        let hi = DVector::from_fn(c, |i, _| scale_bound(b_max[i], self.e[i]));
        let q = f.component_mul(&self.d) * self.cost_scale;
        let (kinds, rho) = self.rho_vector(&lo, &hi);
        self.factorize(&kinds, &rho)?;
        let chol = &self.factor.as_ref().expect("factorized above").1;

        let project = |v: &DVector<f64>| DVector::from_fn(c, |i, _| v[i].clamp(lo[i], hi[i]));

        let (mut x, mut y) = match warm {
            Some(w) if w.x.len() == n && w.y.len() == c => (
                w.x.component_div(&self.d),
                w.y.component_div(&self.e) * self.cost_scale,
            ),
            Some(_) => return Err(Error::Dimension("warm start has wrong dimensions".into())),
            None => (DVector::zeros(n), DVector::zeros(c)),
        };
        let mut z = project(&(&self.g_scaled * &x));

        let unscale = |x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>| {
            (
                x.component_mul(&self.d),
                z.component_div(&self.e),
                y.component_mul(&self.e) / self.cost_scale,
            )
        };

        let mut history = Vec::new();
        let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;
        let mut y_window = y.clone();
        let mut status = QpStatus::MaxIter;
        let mut iterations = 0;
        let mut last = (DVector::zeros(n), DVector::zeros(c), DVector::zeros(c), f64::INFINITY, f64::INFINITY);

        for k in 1..=s.max_iter {
            iterations = k;
            let rhs = &x * s.sigma - &q + self.g_scaled.transpose() * (rho.component_mul(&z) - &y);
            let x_tilde = chol.solve(&rhs);
            let z_tilde = &self.g_scaled * &x_tilde;
            x = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_relaxed = &z_tilde * s.alpha + &z * (1.0 - s.alpha);
            let z_next = project(&(&z_relaxed + y.component_div(&rho)));
            y += rho.component_mul(&(&z_relaxed - &z_next));
            z = z_next;

            let (xu, zu, yu) = unscale(&x, &z, &y);
            let gx = &self.g * &xu;
            let hx = &self.h * &xu;
            let gty = self.g.transpose() * &yu;
            let prim = if c > 0 { inf_norm(&(&gx - &zu)) } else { 0.0 };
            let dual = inf_norm(&(&hx + f + &gty));
            let eps_prim = s.eps_abs + s.eps_rel * inf_norm(&gx).max(inf_norm(&zu));
            let eps_dual = s.eps_abs + s.eps_rel * inf_norm(&hx).max(inf_norm(&gty)).max(inf_norm(f));
            if s.record_history {
                history.push(IterationRecord {
                    objective: 0.5 * xu.dot(&hx) + f.dot(&xu),
                    primal_residual: prim,
                    dual_residual: dual,
                });
            }
            let score = (prim / eps_prim).max(dual / eps_dual);
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, xu.clone(), zu.clone(), yu.clone()));
            }
            last = (xu, zu, yu, prim, dual);
            if prim <= eps_prim && dual <= eps_dual {
                status = QpStatus::Solved;
                break;
            }
            if c > 0 && k % s.infeasibility_window == 0 {
                let dy = (&y - &y_window).component_mul(&self.e) / self.cost_scale;
                if primal_infeasibility_certificate(&self.g, b_min, b_max, &dy, s.eps_primal_infeasible) {
                    status = QpStatus::Infeasible;
                    break;
                }
                y_window = y.clone();
            }
        }

        let (mut xu, mut yu, mut prim, mut dual) = match status {
            QpStatus::Solved => (last.0, last.2, last.3, last.4),
            _ => {
                let (_, bx, bz, by) = best.expect("at least one iteration");
                let prim = if c > 0 { inf_norm(&(&self.g * &bx - bz)) } else { 0.0 };
                let dual = inf_norm(&(&self.h * &bx + f + self.g.transpose() * &by));
                (bx, by, prim, dual)
            }
        };
        let mut polished = false;
        if status == QpStatus::Solved && s.polish {
            let zu = &self.g * &xu;
            if let Some((px, py)) = polish(&self.h, &self.g, f, b_min, b_max, &zu, &yu) {
                let p_prim = bound_violation(&(&self.g * &px), b_min, b_max);
                let p_dual = inf_norm(&(&self.h * &px + f + self.g.transpose() * &py));
                if p_prim <= prim.max(1e-12) && p_dual <= dual.max(1e-12) {
                    xu = px;
                    yu = py;
                    prim = p_prim;
                    dual = p_dual;
                    polished = true;
                }
            }
        }
        let objective = 0.5 * xu.dot(&(&self.h * &xu)) + f.dot(&xu);
        Ok(QpSolution { x: xu, y: yu, status, iterations, primal_residual: prim, dual_residual: dual, objective, polished, history })
    }
}

/// `max(0, Gx - b_max, b_min - Gx)` in the infinity norm.
fn bound_violation(gx: &DVector<f64>, b_min: &DVector<f64>, b_max: &DVector<f64>) -> f64 {
    gx.iter()
        .zip(b_min.iter().zip(b_max.iter()))
        .map(|(&v, (&lo, &hi))| (v - hi).max(lo - v).max(0.0))
        .fold(0.0, f64::max)
}

fn primal_infeasibility_certificate(g: &DMatrix<f64>, b_min: &DVector<f64>, b_max: &DVector<f64>, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-10 {
        return false;
    }
    let tiny = 1e-9 * norm;
    if inf_norm(&(g.transpose() * dy)) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let v = dy[i];
        if v > tiny {
            if b_max[i] >= INFINITY_BOUND {
                return false;
            }
            support += b_max[i] * v;
        } else if v < -tiny {
            if b_min[i] <= -INFINITY_BOUND {
                return false;
            }
            support += b_min[i] * v;
        }
    }
    support < -eps * norm
}

/// Solves the KKT system restricted to the guessed active set.
fn polish(
    h: &DMatrix<f64>,
    g: &DMatrix<f64>,
    f: &DVector<f64>,
    b_min: &DVector<f64>,
    b_max: &DVector<f64>,
    gx: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = h.nrows();
    // (row, bound, is_upper)
    let active: Vec<(usize, f64, bool)> = (0..g.nrows())
        .filter_map(|i| {
            if b_min[i] > -INFINITY_BOUND && gx[i] - b_min[i] < -y[i] {
                Some((i, b_min[i], false))
            } else if b_max[i] < INFINITY_BOUND && b_max[i] - gx[i] < y[i] {
                Some((i, b_max[i], true))
            } else {
                None
            }
        })
        .collect();
    let na = active.len();
    let dim = n + na;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(h);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-f));
    for (k, &(row, bound, _)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + k, j)] = g[(row, j)];
            kkt[(j, n + k)] = g[(row, j)];
        }
        rhs[n + k] = bound;
    }
    // small regularization, removed again by iterative refinement
    let delta = 1e-9;
    let mut reg = kkt.clone();
    for i in 0..dim {
        reg[(i, i)] += if i < n { delta } else { -delta };
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..5 {
        let r = &rhs - &kkt * &sol;
        sol += lu.solve(&r)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(g.nrows());
    for (k, &(row, _, upper)) in active.iter().enumerate() {
        let v = sol[n + k];
        if (upper && v < -1e-12) || (!upper && v > 1e-12) {
            return None;
        }
        yp[row] = v;
    }
    Some((x, yp))
}

pub fn solve(problem: &QpProblem, warm: Option<&WarmStart>, settings: &QpSettings) -> Result<QpSolution> {
    problem.validate()?;
    let mut solver = AdmmSolver::new(problem.h.clone(), problem.g.clone(), settings.clone())?;
    solver.solve(&problem.f, &problem.b_min, &problem.b_max, warm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_violation: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal_violation).max(self.complementarity)
    }
}

/// First-order optimality residuals of `(x, y)`.
///
/// Complementarity is `max_i |y_i| * slack_i` against the bound that the sign
/// of `y_i` selects; a multiplier pushing on an infinite bound counts in full.
pub fn kkt_check(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> Result<KktReport> {
    let n = p.f.len();
    let c = p.g.nrows();
    if x.len() != n || y.len() != c {
        return Err(Error::Dimension(format!("x has {}, y has {} entries for a {n}x{c} problem", x.len(), y.len())));
    }
    let gx = &p.g * x;
    let stationarity = inf_norm(&(&p.h * x + &p.f + p.g.transpose() * y));
    let primal_violation = bound_violation(&gx, &p.b_min, &p.b_max);
    let complementarity = (0..c)
        .map(|i| {
            let v = y[i];
            if v > 0.0 {
                if p.b_max[i].is_finite() { v * (p.b_max[i] - gx[i]).abs() } else { v }
            } else if v < 0.0 {
                if p.b_min[i].is_finite() { -v * (gx[i] - p.b_min[i]).abs() } else { -v }
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    Ok(KktReport { stationarity, primal_violation, complementarity })
}
