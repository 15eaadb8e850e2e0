//! Dense delta-input Koopman MPC.
//!
//! Decision variable: `dU = [du_0; ...; du_{Np-1}]` with `u_k = u_prev + sum_{j<=k} du_j`.
//! The predictor runs `z_{k+1} = A z_k + B u_k + w` where `w` is a constant
//! offset estimated from the last one-step prediction error (velocity form),
//! and the cost is
//!
//! ```text
//! 1/2 e_Np' S e_Np + 1/2 sum_{k=0}^{Np-1} (e_k' Qe e_k + u_k' R u_k + du_k' Rd du_k),
//! e_k = r_k - C z_k.
//! ```
//!
//! Eliminating the states leaves `1/2 dU' H dU + (F p)' dU` with the parameter
//! vector `p = [z_0; r_1; ...; r_Np; u_prev; w]`. Input bounds become
//! `u_min - u_prev <= T dU <= u_max - u_prev` with `T` the block lower-triangular
//! cumulative sum. `H`, `G` have `m * Np` columns regardless of the lifted dimension.

use nalgebra::{DMatrix, DVector};

use crate::edmd::LiftedPredictor;
use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::qp::{AdmmSolver, QpSettings, QpStatus, WarmStart};

#[derive(Debug, Clone, PartialEq)]
pub struct KmpcConfig {
    pub horizon: usize,
    /// Stage tracking-error penalty (q x q).
    pub qe: DMatrix<f64>,
    /// Terminal tracking-error penalty (q x q).
    pub s: DMatrix<f64>,
    /// Input penalty (m x m).
    pub r: DMatrix<f64>,
    /// Input-increment penalty (m x m).
    pub rd: DMatrix<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub du_min: Option<DVector<f64>>,
    pub du_max: Option<DVector<f64>>,
    /// Filter gain of the offset estimate in `[0, 1]`; 0 disables it, 1 is the
    /// pure velocity form.
    pub offset_gain: f64,
    pub qp: QpSettings,
}

impl KmpcConfig {
    /// Single-input, two-output defaults for the tower: `S = 10 Qe`, symmetric bounds.
    pub fn tower(horizon: usize, q_phi: f64, q_phi_dot: f64, r: f64, rd: f64, limit: f64) -> Self {
        let qe = DMatrix::from_diagonal(&DVector::from_vec(vec![q_phi, q_phi_dot]));
        Self {
            horizon,
            s: &qe * 10.0,
            qe,
            r: DMatrix::from_element(1, 1, r),
            rd: DMatrix::from_element(1, 1, rd),
            u_min: DVector::from_element(1, -limit),
            u_max: DVector::from_element(1, limit),
            du_min: None,
            du_max: None,
            offset_gain: 1.0,
            qp: QpSettings::default(),
        }
    }

    fn validate(&self, m: usize, q: usize) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be >= 1".into()));
        }
        let shapes = [(&self.qe, q, "Qe"), (&self.s, q, "S"), (&self.r, m, "R"), (&self.rd, m, "Rd")];
        for (mat, dim, name) in shapes {
            if mat.shape() != (dim, dim) {
                return Err(Error::Dimension(format!("{name} is {:?}, expected {dim}x{dim}", mat.shape())));
            }
        }
        if self.u_min.len() != m || self.u_max.len() != m {
            return Err(Error::Dimension("input bounds must have one entry per input".into()));
        }
        if self.u_min.iter().zip(self.u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidInput("u_min must be < u_max".into()));
        }
        match (&self.du_min, &self.du_max) {
            (Some(lo), Some(hi)) => {
                if lo.len() != m || hi.len() != m || lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
                    return Err(Error::InvalidInput("invalid rate bounds".into()));
                }
            }
            (None, None) => {}
            _ => return Err(Error::InvalidInput("rate bounds need both du_min and du_max".into())),
        }
        if !(0.0..=1.0).contains(&self.offset_gain) {
            return Err(Error::InvalidInput("offset_gain must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Block sizes of the condensed problem and of its parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
    pub inputs: usize,
    pub outputs: usize,
    pub lifted: usize,
    pub rate_rows: bool,
}

impl Layout {
    pub fn decision_dim(&self) -> usize {
        self.inputs * self.horizon
    }

    pub fn constraint_rows(&self) -> usize {
        self.decision_dim() * if self.rate_rows { 2 } else { 1 }
    }

    /// `[z_0; r_1..r_Np; u_prev; w]`
    pub fn param_dim(&self) -> usize {
        2 * self.lifted + self.outputs * self.horizon + self.inputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub h: DMatrix<f64>,
    /// Maps the parameter vector to the linear term.
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub layout: Layout,
    u_min: DVector<f64>,
    u_max: DVector<f64>,
    du_min: Option<DVector<f64>>,
    du_max: Option<DVector<f64>>,
    /// stacked outputs y_1..y_Np = phi z0 + theta U + lambda w
    phi: DMatrix<f64>,
    theta: DMatrix<f64>,
    lambda: DMatrix<f64>,
    cumsum: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReference {
    points: Vec<DVector<f64>>,
}

impl TrackingReference {
    /// `points[j]` is the target for the output `j + 1` samples ahead; the
    /// last point is held for any further step.
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("reference needs at least one point".into()));
        }
        Ok(Self { points })
    }

    pub fn constant(value: DVector<f64>) -> Self {
        Self { points: vec![value] }
    }

    pub fn at(&self, j: usize) -> &DVector<f64> {
        &self.points[j.min(self.points.len() - 1)]
    }

    pub fn stacked(&self, horizon: usize, q: usize) -> Result<DVector<f64>> {
        let mut r = DVector::zeros(q * horizon);
        for j in 0..horizon {
            let p = self.at(j);
            if p.len() != q {
                return Err(Error::Dimension(format!("reference point has {} entries, expected {q}", p.len())));
            }
            r.rows_mut(j * q, q).copy_from(p);
        }
        Ok(r)
    }
}

fn block_diag(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let b = block.nrows();
    let mut out = DMatrix::zeros(b * count, b * count);
    for k in 0..count {
        out.view_mut((k * b, k * b), (b, b)).copy_from(block);
    }
    out
}

pub fn condense(pred: &LiftedPredictor, cfg: &KmpcConfig) -> Result<CondensedQp> {
    pred.validate()?;
    let (n, m, q, np) = (pred.lifted_dim(), pred.input_dim(), pred.output_dim(), cfg.horizon);
    cfg.validate(m, q)?;
    let (a, b, c) = (&pred.a, &pred.b, &pred.c);

    let mut powers = Vec::with_capacity(np + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    for k in 1..=np {
        powers.push(a * &powers[k - 1]);
    }

    let mut phi = DMatrix::zeros(q * np, n);
    let mut theta = DMatrix::zeros(q * np, m * np);
    let mut lambda = DMatrix::zeros(q * np, n);
    let mut power_sum = DMatrix::<f64>::zeros(n, n);
    for k in 1..=np {
        let row = (k - 1) * q;
        phi.view_mut((row, 0), (q, n)).copy_from(&(c * &powers[k]));
        power_sum += &powers[k - 1];
        lambda.view_mut((row, 0), (q, n)).copy_from(&(c * &power_sum));
        for j in 0..k {
            theta.view_mut((row, j * m), (q, m)).copy_from(&(c * &powers[k - 1 - j] * b));
        }
    }
    let mut cumsum = DMatrix::zeros(m * np, m * np);
    for i in 0..np {
        for j in 0..=i {
            cumsum.view_mut((i * m, j * m), (m, m)).fill_with_identity();
        }
    }
    let mut ones = DMatrix::zeros(m * np, m);
    for i in 0..np {
        ones.view_mut((i * m, 0), (m, m)).fill_with_identity();
    }

    let mut w = block_diag(&cfg.qe, np);
    w.view_mut(((np - 1) * q, (np - 1) * q), (q, q)).copy_from(&cfg.s);
    let r_bar = block_diag(&cfg.r, np);
    let rd_bar = block_diag(&cfg.rd, np);

    let mt = (&theta * &cumsum).transpose();
    let mtw = &mt * &w;
    let h = symmetrize(&(&mtw * mt.transpose() + cumsum.transpose() * &r_bar * &cumsum + rd_bar));
    if h.clone().cholesky().is_none() {
        return Err(Error::InvalidInput(
            "condensed Hessian is not positive definite; use R > 0 or Rd > 0".into(),
        ));
    }

    let layout = Layout { horizon: np, inputs: m, outputs: q, lifted: n, rate_rows: cfg.du_min.is_some() };
    let mut f = DMatrix::zeros(m * np, layout.param_dim());
    f.columns_mut(0, n).copy_from(&(&mtw * &phi));
    f.columns_mut(n, q * np).copy_from(&(-&mtw));
    f.columns_mut(n + q * np, m).copy_from(&(&mtw * &theta * &ones + cumsum.transpose() * &r_bar * &ones));
    f.columns_mut(n + q * np + m, n).copy_from(&(&mtw * &lambda));

    let g = if layout.rate_rows {
        let mut g = DMatrix::zeros(2 * m * np, m * np);
        g.rows_mut(0, m * np).copy_from(&cumsum);
        g.rows_mut(m * np, m * np).fill_with_identity();
        g
    } else {
        cumsum.clone()
    };

    Ok(CondensedQp {
        h,
        f,
        g,
        layout,
        u_min: cfg.u_min.clone(),
        u_max: cfg.u_max.clone(),
        du_min: cfg.du_min.clone(),
        du_max: cfg.du_max.clone(),
        phi,
        theta,
        lambda,
        cumsum,
    })
}

impl CondensedQp {
    pub fn param_vector(&self, z0: &DVector<f64>, reference: &TrackingReference, u_prev: &DVector<f64>, offset: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.layout;
        if z0.len() != l.lifted || u_prev.len() != l.inputs || offset.len() != l.lifted {
            return Err(Error::Dimension("parameter blocks do not match the condensed layout".into()));
        }
        let r = reference.stacked(l.horizon, l.outputs)?;
        let mut p = DVector::zeros(l.param_dim());
        p.rows_mut(0, l.lifted).copy_from(z0);
        p.rows_mut(l.lifted, r.len()).copy_from(&r);
        p.rows_mut(l.lifted + r.len(), l.inputs).copy_from(u_prev);
        p.rows_mut(l.lifted + r.len() + l.inputs, l.lifted).copy_from(offset);
        Ok(p)
    }

    pub fn linear_term(&self, params: &DVector<f64>) -> DVector<f64> {
        &self.f * params
    }

    /// `1/2 dU' H dU + (F p)' dU`, the dU-dependent part of the horizon cost.
    pub fn objective(&self, du: &DVector<f64>, params: &DVector<f64>) -> f64 {
        0.5 * du.dot(&(&self.h * du)) + self.linear_term(params).dot(du)
    }

    pub fn bounds(&self, u_prev: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let l = self.layout;
        let m = l.inputs;
        let mut lo = DVector::zeros(l.constraint_rows());
        let mut hi = DVector::zeros(l.constraint_rows());
        for k in 0..l.horizon {
            for i in 0..m {
                lo[k * m + i] = self.u_min[i] - u_prev[i];
                hi[k * m + i] = self.u_max[i] - u_prev[i];
            }
        }
        if let (Some(dlo), Some(dhi)) = (&self.du_min, &self.du_max) {
            let off = l.decision_dim();
            for k in 0..l.horizon {
                for i in 0..m {
                    lo[off + k * m + i] = dlo[i];
                    hi[off + k * m + i] = dhi[i];
                }
            }
        }
        (lo, hi)
    }

    pub fn planned_inputs(&self, du: &DVector<f64>, u_prev: &DVector<f64>) -> DVector<f64> {
        let m = self.layout.inputs;
        let mut u = &self.cumsum * du;
        for k in 0..self.layout.horizon {
            for i in 0..m {
                u[k * m + i] += u_prev[i];
            }
        }
        u
    }

    /// Predicted outputs `y_1..y_Np` of a plan.
    pub fn predicted_outputs(&self, du: &DVector<f64>, z0: &DVector<f64>, u_prev: &DVector<f64>, offset: &DVector<f64>) -> DVector<f64> {
        &self.phi * z0 + &self.theta * self.planned_inputs(du, u_prev) + &self.lambda * offset
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub du0: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// True when the solver stopped short and the fallback clamp was applied.
    pub degraded: bool,
    pub plan: DVector<f64>,
    pub planned_inputs: DVector<f64>,
    pub predicted_outputs: DVector<f64>,
}

/// Receding-horizon controller around one condensed problem.
#[derive(Debug, Clone)]
pub struct KmpcController {
    pred: LiftedPredictor,
    qp: CondensedQp,
    solver: AdmmSolver,
    offset_gain: f64,
    warm: Option<WarmStart>,
    previous: Option<DVector<f64>>,
    offset: DVector<f64>,
}

impl KmpcController {
    pub fn new(pred: LiftedPredictor, cfg: &KmpcConfig) -> Result<Self> {
        let qp = condense(&pred, cfg)?;
        let solver = AdmmSolver::new(qp.h.clone(), qp.g.clone(), cfg.qp.clone())?;
        let offset = DVector::zeros(pred.lifted_dim());
        Ok(Self { pred, qp, solver, offset_gain: cfg.offset_gain, warm: None, previous: None, offset })
    }

    pub fn condensed(&self) -> &CondensedQp {
        &self.qp
    }

    pub fn predictor(&self) -> &LiftedPredictor {
        &self.pred
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// Forgets warm start and offset history.
    pub fn reset(&mut self) {
        self.warm = None;
        self.previous = None;
        self.offset.fill(0.0);
    }

    pub fn set_warm_start(&mut self, warm: Option<WarmStart>) {
        self.warm = warm;
    }

    fn update_offset(&mut self, z0: &DVector<f64>, u_prev: &DVector<f64>) {
        if let Some(z_last) = &self.previous {
            if self.offset_gain > 0.0 {
                let residual = z0 - &self.pred.a * z_last - &self.pred.b * u_prev;
                self.offset = &self.offset * (1.0 - self.offset_gain) + residual * self.offset_gain;
            }
        }
        self.previous = Some(z0.clone());
    }

    /// One receding-horizon step; returns `u_prev + du_0*`.
    ///
    /// `u_prev` must be the input actually applied since the previous call; it
    /// anchors both the delta-input recursion and the offset estimate.
    pub fn step(&mut self, z0: &DVector<f64>, u_prev: &DVector<f64>, reference: &TrackingReference) -> Result<(DVector<f64>, StepDiagnostics)> {
        self.update_offset(z0, u_prev);
        let params = self.qp.param_vector(z0, reference, u_prev, &self.offset)?;
        let lin = self.qp.linear_term(&params);
        let (lo, hi) = self.qp.bounds(u_prev);
        let sol = self.solver.solve(&lin, &lo, &hi, self.warm.as_ref())?;
        if sol.status == QpStatus::Infeasible {
            return Err(Error::Infeasible);
        }
        let m = self.qp.layout.inputs;
        let du0 = sol.x.rows(0, m).into_owned();
        let mut u = u_prev + &du0;
        let degraded = sol.status != QpStatus::Solved;
        if degraded {
            for i in 0..m {
                u[i] = u[i].clamp(self.qp.u_min[i], self.qp.u_max[i]);
            }
        }
        self.warm = Some(shift_warm_start(&sol.x, &sol.y, self.qp.layout));
        let planned_inputs = self.qp.planned_inputs(&sol.x, u_prev);
        let predicted_outputs = self.qp.predicted_outputs(&sol.x, z0, u_prev, &self.offset);
        let diag = StepDiagnostics {
            du0,
            status: sol.status,
            iterations: sol.iterations,
            degraded,
            plan: sol.x,
            planned_inputs,
            predicted_outputs,
        };
        Ok((u, diag))
    }

    /// Tracks a sample without solving, e.g. during an open-loop phase, so the
    /// offset estimate stays consistent with the applied inputs.
    pub fn observe(&mut self, z0: &DVector<f64>, u_prev: &DVector<f64>) {
        self.update_offset(z0, u_prev);
        self.warm = None;
    }
}

/// Drops the first block of a plan (and of each dual group) and appends zeros.
fn shift_warm_start(x: &DVector<f64>, y: &DVector<f64>, layout: Layout) -> WarmStart {
    let shift = |v: &DVector<f64>, group: usize| {
        let m = layout.inputs;
        let mut out = DVector::zeros(v.len());
        for g in 0..v.len() / group {
            let base = g * group;
            for i in 0..group - m {
                out[base + i] = v[base + i + m];
            }
        }
        out
    };
    let nd = layout.decision_dim();
    WarmStart { x: shift(x, nd), y: shift(y, nd) }
}
