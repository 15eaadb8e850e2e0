//! Extended dynamic mode decomposition with control.
//!
//! Snapshot pairs are arranged column-wise into `Y`, `Y+`, `Y_lift`, `Y+_lift`
//! and `Omega`. The predictor solves
//!
//! ```text
//! min_{A,B} || Y+_lift - A Y_lift - B Omega ||_F
//! min_C     || Y - C Y_lift ||_F
//! ```
//!
//! through the Gram matrix of the stacked regressor `[Y_lift; Omega]`, with an
//! optional Tikhonov term.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lifting::{lift_dataset, LiftingSpec, OUTPUT_DIM};
use crate::linalg::{is_finite, pinv, solve_right_spd};
use crate::plant::Measurement;

/// Singular values below this fraction of the largest one are treated as zero.
pub const PINV_RTOL: f64 = 1e-10;
/// Default Tikhonov weight relative to the mean Gram diagonal.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-8;

/// One recorded trajectory: `(y_k, u_k)` for consecutive samples.
pub type Trajectory = Vec<(Measurement, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub y: DMatrix<f64>,
    pub y_plus: DMatrix<f64>,
    pub y_lift: DMatrix<f64>,
    pub y_plus_lift: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub spec: LiftingSpec,
}

impl SnapshotDataset {
    pub fn columns(&self) -> usize {
        self.y.ncols()
    }

    /// Stacked regressor `[Y_lift; Omega]`.
    pub fn regressor(&self) -> DMatrix<f64> {
        let (n, m, p) = (self.y_lift.nrows(), self.omega.nrows(), self.columns());
        let mut x = DMatrix::zeros(n + m, p);
        x.rows_mut(0, n).copy_from(&self.y_lift);
        x.rows_mut(n, m).copy_from(&self.omega);
        x
    }

    /// Ridge weight `scale * trace(Gram) / rows`.
    pub fn scaled_ridge(&self, scale: f64) -> f64 {
        let x = self.regressor();
        let trace: f64 = x.row_iter().map(|r| r.norm_squared()).sum();
        scale * trace / x.nrows() as f64
    }

    pub fn default_ridge(&self) -> f64 {
        self.scaled_ridge(DEFAULT_RIDGE_SCALE)
    }
}

pub fn assemble(trajectories: &[Trajectory], spec: LiftingSpec) -> Result<SnapshotDataset> {
    let pairs: Vec<_> = trajectories.iter().flat_map(|t| lift_dataset(t, spec)).collect();
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = pairs.len();
    let n = spec.lifted_dim();
    let mut ds = SnapshotDataset {
        y: DMatrix::zeros(OUTPUT_DIM, p),
        y_plus: DMatrix::zeros(OUTPUT_DIM, p),
        y_lift: DMatrix::zeros(n, p),
        y_plus_lift: DMatrix::zeros(n, p),
        omega: DMatrix::zeros(1, p),
        spec,
    };
    for (i, pair) in pairs.iter().enumerate() {
        ds.y[(0, i)] = pair.y.phi;
        ds.y[(1, i)] = pair.y.phi_dot;
        ds.y_plus[(0, i)] = pair.y_next.phi;
        ds.y_plus[(1, i)] = pair.y_next.phi_dot;
        ds.y_lift.set_column(i, &pair.z);
        ds.y_plus_lift.set_column(i, &pair.z_next);
        ds.omega[(0, i)] = pair.u;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub columns: usize,
    pub residual_ab: f64,
    pub residual_c: f64,
    pub ridge: f64,
    /// Set when the unregularized Gram matrix was rank deficient and the
    /// truncated pseudoinverse kept only this many directions.
    pub truncated_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedPredictor {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub spec: LiftingSpec,
    pub dt: f64,
    pub fit_report: Option<FitReport>,
}

impl LiftedPredictor {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, spec: LiftingSpec, dt: f64) -> Result<Self> {
        let pred = Self { a, b, c, spec, dt, fit_report: None };
        pred.validate()?;
        Ok(pred)
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if self.a.ncols() != n || self.b.nrows() != n || self.c.ncols() != n {
            return Err(Error::Dimension(format!(
                "A is {}x{}, B is {}x{}, C is {}x{}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols(),
                self.c.nrows(),
                self.c.ncols()
            )));
        }
        if !(is_finite(&self.a) && is_finite(&self.b) && is_finite(&self.c)) {
            return Err(Error::Numerical("predictor has non-finite entries".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt must be > 0, got {}", self.dt)));
        }
        Ok(())
    }

    /// Rolls the predictor forward; returns `len(inputs) + 1` outputs starting with `C z0`.
    pub fn predict(&self, z0: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if z0.len() != self.lifted_dim() {
            return Err(Error::Dimension(format!("z0 has {} entries, predictor expects {}", z0.len(), self.lifted_dim())));
        }
        let mut z = z0.clone();
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(&self.c * &z);
        for u in inputs {
            if u.len() != self.input_dim() {
                return Err(Error::Dimension(format!("input has {} entries, predictor expects {}", u.len(), self.input_dim())));
            }
            z = &self.a * &z + &self.b * u;
            out.push(&self.c * &z);
        }
        Ok(out)
    }

    pub fn predict_scalar(&self, z0: &DVector<f64>, inputs: &[f64]) -> Result<Vec<DVector<f64>>> {
        let inputs: Vec<_> = inputs.iter().map(|&u| DVector::from_element(1, u)).collect();
        self.predict(z0, &inputs)
    }
}

/// Solves `rhs = W [regressor]` in the least-squares sense via the Gram matrix.
fn gram_solve(rhs_cross: &DMatrix<f64>, gram: &DMatrix<f64>, ridge: f64) -> Result<(DMatrix<f64>, Option<usize>)> {
    if ridge > 0.0 {
        let mut reg = gram.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        if let Some(sol) = solve_right_spd(rhs_cross, &reg) {
            return Ok((sol, None));
        }
        log::warn!("regularized Gram matrix is not positive definite; using pseudoinverse");
        let (inv, rank) = pinv(&reg, PINV_RTOL)?;
        let truncated = (rank < reg.nrows()).then_some(rank);
        return Ok((rhs_cross * inv, truncated));
    }
    let (inv, rank) = pinv(gram, PINV_RTOL)?;
    let truncated = (rank < gram.nrows()).then_some(rank);
    if let Some(r) = truncated {
        log::warn!("Gram matrix is rank deficient ({r} of {}); truncated pseudoinverse used", gram.nrows());
    }
    Ok((rhs_cross * inv, truncated))
}

/// Fits `(A, B, C)` to the dataset. `ridge` is the absolute Tikhonov weight
/// added to the Gram diagonal; zero selects the plain pseudoinverse.
pub fn fit(data: &SnapshotDataset, ridge: f64, dt: f64) -> Result<LiftedPredictor> {
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge must be >= 0, got {ridge}")));
    }
    let n = data.y_lift.nrows();
    let m = data.omega.nrows();
    let p = data.columns();
    if p == 0 {
        return Err(Error::EmptyDataset);
    }
    if p < n + m {
        log::warn!("only {p} snapshot columns for {} unknowns per row", n + m);
    }

    let x = data.regressor();
    let gram = &x * x.transpose();
    let (ab, trunc_ab) = gram_solve(&(&data.y_plus_lift * x.transpose()), &gram, ridge)?;
    let a = ab.columns(0, n).into_owned();
    let b = ab.columns(n, m).into_owned();

    let gram_c = &data.y_lift * data.y_lift.transpose();
    let (c, trunc_c) = gram_solve(&(&data.y * data.y_lift.transpose()), &gram_c, ridge)?;

    let residual_ab = (&data.y_plus_lift - &a * &data.y_lift - &b * &data.omega).norm();
    let residual_c = (&data.y - &c * &data.y_lift).norm();

    let mut pred = LiftedPredictor::new(a, b, c, data.spec, dt)?;
    pred.fit_report = Some(FitReport {
        columns: p,
        residual_ab,
        residual_c,
        ridge,
        truncated_rank: trunc_ab.or(trunc_c),
    });
    Ok(pred)
}

/// Multi-step prediction error on a held-out trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// NRMSE at prediction steps `1..=horizon`.
    pub nrmse: Vec<f64>,
    /// Same metric for the zero-order-hold baseline `y_{k+j} = y_k`.
    pub baseline_nrmse: Vec<f64>,
    pub starts: usize,
}

/// NRMSE normalized per channel by the held-out output standard deviation and
/// averaged over every start index with a full window.
pub fn evaluate(pred: &LiftedPredictor, heldout: &[(Measurement, f64)], horizon: usize) -> Result<Evaluation> {
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be >= 1".into()));
    }
    let s = pred.spec.delays;
    if heldout.len() < s + 1 + horizon {
        return Err(Error::InvalidInput(format!(
            "held-out trajectory of {} samples is too short for {} delays and horizon {}",
            heldout.len(),
            s,
            horizon
        )));
    }
    let outputs: Vec<[f64; 2]> = heldout.iter().map(|(m, _)| [m.phi, m.phi_dot]).collect();
    let std: Vec<f64> = (0..OUTPUT_DIM)
        .map(|ch| {
            let mean = outputs.iter().map(|o| o[ch]).sum::<f64>() / outputs.len() as f64;
            (outputs.iter().map(|o| (o[ch] - mean).powi(2)).sum::<f64>() / outputs.len() as f64).sqrt()
        })
        .collect();
    if std.iter().any(|&sd| !(sd > 1e-14)) {
        return Err(Error::Degenerate("held-out output has zero variance; NRMSE undefined".into()));
    }

    let pairs = lift_dataset(heldout, pred.spec);
    let mut sq = vec![0.0; horizon];
    let mut sq_base = vec![0.0; horizon];
    let mut starts = 0;
    for k0 in s..heldout.len() - horizon {
        let z0 = &pairs[k0 - s].z;
        let inputs: Vec<f64> = heldout[k0..k0 + horizon].iter().map(|&(_, u)| u).collect();
        let yhat = pred.predict_scalar(z0, &inputs)?;
        for j in 1..=horizon {
            let actual = outputs[k0 + j];
            for ch in 0..OUTPUT_DIM {
                let e = (yhat[j][ch] - actual[ch]) / std[ch];
                let eb = (outputs[k0][ch] - actual[ch]) / std[ch];
                sq[j - 1] += e * e;
                sq_base[j - 1] += eb * eb;
            }
        }
        starts += 1;
    }
    let denom = (starts * OUTPUT_DIM) as f64;
    Ok(Evaluation {
        nrmse: sq.iter().map(|v| (v / denom).sqrt()).collect(),
        baseline_nrmse: sq_base.iter().map(|v| (v / denom).sqrt()).collect(),
        starts,
    })
}
