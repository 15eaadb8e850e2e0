//! Independent reference computations shared by the integration tests and
//! the acceptance suite. Nothing here calls the solvers under test.

#![allow(dead_code)]

use koopman_tower::kmpc::KmpcConfig;
use koopman_tower::lifting::LiftingSpec;
use koopman_tower::plant::{self, PlantParams, TowerState};
use koopman_tower::LiftedPredictor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random symmetric matrix with eigenvalues drawn from `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_matrix(rng, n, n).qr().q();
    let d = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.gen_range(lo..hi)));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random matrix rescaled to the given spectral radius.
pub fn random_with_radius(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    a.clone() * (radius / spectral_radius(&a))
}

/// Largest eigenvalue modulus from a real Schur form; a random orthogonal
/// similarity is applied first so exact shift structure cannot stall it.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.nrows() as u64);
    let q = random_matrix(&mut rng, a.nrows(), a.ncols()).qr().q();
    let schur = nalgebra::Schur::try_new(&q * a * q.transpose(), f64::EPSILON, 1_000_000).expect("Schur iteration did not converge");
    schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Plain Riccati fixed-point iteration started from `P = Q`.
pub fn dare_fixed_point(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, tol: f64, max_iter: usize) -> DMatrix<f64> {
    let mut p = q.clone();
    for _ in 0..max_iter {
        let btp = b.transpose() * &p;
        let s = r + &btp * b;
        let k = s.clone().lu().solve(&(&btp * a)).expect("R + B'PB invertible");
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * k;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).norm();
        p = next;
        if delta <= tol * (1.0 + p.norm()) {
            break;
        }
    }
    p
}

/// Projected gradient with fixed step `1/L` on `min 1/2 x'Hx + f'x, lo <= x <= hi`.
pub fn projected_gradient_box(h: &DMatrix<f64>, f: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let l = h.symmetric_eigenvalues().max();
    let step = 1.0 / l;
    let project = |x: DVector<f64>| DVector::from_fn(x.len(), |i, _| x[i].clamp(lo[i], hi[i]));
    let mut x = project(DVector::zeros(f.len()));
    for _ in 0..max_iter {
        let next = project(&x - (h * &x + f) * step);
        let delta = (&next - &x).amax();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    x
}

/// Projected gradient ascent on the dual of `min 1/2 x'Hx + f'x, lo <= Gx <= hi`.
///
/// Dual variables `(mu_hi, mu_lo) >= 0`; the primal is recovered as
/// `x = -H^-1 (f + G'(mu_hi - mu_lo))`.
pub fn dual_projected_gradient(h: &DMatrix<f64>, f: &DVector<f64>, g: &DMatrix<f64>, lo: &DVector<f64>, hi: &DVector<f64>, max_iter: usize) -> DVector<f64> {
    let chol = h.clone().cholesky().expect("H positive definite");
    let hinv = chol.inverse();
    let gh = g * &hinv;
    let l = 2.0 * (&gh * g.transpose()).symmetric_eigenvalues().max();
    let step = 1.0 / l;
    let c = g.nrows();
    let mut mu_hi = DVector::<f64>::zeros(c);
    let mut mu_lo = DVector::<f64>::zeros(c);
    let primal = |mh: &DVector<f64>, ml: &DVector<f64>| -(&hinv * (f + g.transpose() * (mh - ml)));
    for _ in 0..max_iter {
        let x = primal(&mu_hi, &mu_lo);
        let gx = g * &x;
        let mut delta = 0.0_f64;
        for i in 0..c {
            let nh = if hi[i].is_finite() { (mu_hi[i] + step * (gx[i] - hi[i])).max(0.0) } else { 0.0 };
            let nl = if lo[i].is_finite() { (mu_lo[i] + step * (lo[i] - gx[i])).max(0.0) } else { 0.0 };
            delta = delta.max((nh - mu_hi[i]).abs()).max((nl - mu_lo[i]).abs());
            mu_hi[i] = nh;
            mu_lo[i] = nl;
        }
        if delta < 1e-15 {
            break;
        }
    }
    primal(&mu_hi, &mu_lo)
}

/// Random predictor with a stable `A` for condensation tests.
pub fn random_predictor(rng: &mut ChaCha8Rng, spec: LiftingSpec, inputs: usize, outputs: usize) -> LiftedPredictor {
    let n = spec.lifted_dim();
    LiftedPredictor::new(random_with_radius(rng, n, 0.95), random_matrix(rng, n, inputs), random_matrix(rng, outputs, n), spec, 0.01).unwrap()
}

/// Horizon cost by explicit simulation of `z+ = A z + B u + w`.
///
/// Cost: `1/2 sum_k e_k' W_k e_k + 1/2 sum u_k' R u_k + 1/2 sum du_k' Rd du_k`
/// with `e_k = r_k - C z_k` for `k = 1..Np`, `W_k = Qe` except `W_Np = S`.
/// Returns the cost and the applied inputs `u_0..u_{Np-1}`.
pub fn rollout_cost(
    pred: &LiftedPredictor,
    cfg: &KmpcConfig,
    z0: &DVector<f64>,
    refs: &[DVector<f64>],
    u_prev: &DVector<f64>,
    w: &DVector<f64>,
    du: &DVector<f64>,
) -> (f64, Vec<DVector<f64>>) {
    let m = pred.input_dim();
    let np = cfg.horizon;
    let mut z = z0.clone();
    let mut u = u_prev.clone();
    let mut cost = 0.0;
    let mut inputs = Vec::with_capacity(np);
    for k in 0..np {
        let d = du.rows(k * m, m).into_owned();
        u += &d;
        cost += 0.5 * d.dot(&(&cfg.rd * &d)) + 0.5 * u.dot(&(&cfg.r * &u));
        z = &pred.a * &z + &pred.b * &u + w;
        let e = &refs[k] - &pred.c * &z;
        let weight = if k + 1 == np { &cfg.s } else { &cfg.qe };
        cost += 0.5 * e.dot(&(weight * &e));
        inputs.push(u.clone());
    }
    (cost, inputs)
}

/// Jacobians of the sampled plant map at the upright rest state.
pub fn linearized_plant(params: &PlantParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = params.n_links;
    let eps = 1e-7;
    let flat = |s: &TowerState| DVector::from_iterator(2 * n, s.theta.iter().chain(s.omega.iter()).copied());
    let rest = TowerState::rest(n);
    let base = flat(&plant::step(&rest, 0.0, 0.0, params).unwrap());
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut s = rest.clone();
        if j < n {
            s.theta[j] += eps;
        } else {
            s.omega[j - n] += eps;
        }
        let col = (flat(&plant::step(&s, 0.0, 0.0, params).unwrap()) - &base) / eps;
        a.set_column(j, &col);
    }
    let bcol = (flat(&plant::step(&rest, eps, 0.0, params).unwrap()) - &base) / eps;
    (a, DMatrix::from_column_slice(2 * n, 1, bcol.as_slice()))
}

/// Spectral radius of the true linearized plant under the delay-embedded
/// feedback `u_k = -K z_k`.
///
/// The augmented state holds the plant state, the last `s` outputs and the
/// last `s + 1` inputs.
pub fn true_closed_loop_radius(params: &PlantParams, k: &DMatrix<f64>, spec: LiftingSpec) -> f64 {
    spectral_radius(&true_closed_loop(params, k, spec))
}

/// Transition matrix of the true linearized plant in closed loop with the
/// delay-embedded feedback, see [`true_closed_loop_radius`].
pub fn true_closed_loop(params: &PlantParams, k: &DMatrix<f64>, spec: LiftingSpec) -> DMatrix<f64> {
    let (ad, bd) = linearized_plant(params);
    let n = params.n_links;
    let s = spec.delays;
    let nx = 2 * n;
    let ny = 2 * s;
    let nu = s + 1;
    let total = nx + ny + nu;
    let sensor = params.sensor_link - 1;
    let mut cs = DMatrix::zeros(2, nx);
    cs[(0, sensor)] = 1.0;
    cs[(1, n + sensor)] = 1.0;

    // z_k in terms of the augmented state; block b holds lag s - b
    let mut zmap = DMatrix::zeros(spec.lifted_dim(), total);
    for b in 0..=s {
        let lag = s - b;
        if lag == 0 {
            zmap.view_mut((3 * b, 0), (2, nx)).copy_from(&cs);
        } else {
            zmap.view_mut((3 * b, nx + 2 * (lag - 1)), (2, 2)).fill_with_identity();
        }
        zmap[(3 * b + 2, nx + ny + lag)] = 1.0;
    }
    let feedback = -(k * &zmap);

    let mut m = DMatrix::zeros(total, total);
    m.view_mut((0, 0), (nx, total)).copy_from(&(&bd * &feedback));
    let mut top = m.view_mut((0, 0), (nx, nx));
    top += &ad;
    if s > 0 {
        m.view_mut((nx, 0), (2, nx)).copy_from(&cs);
        for lag in 2..=s {
            m.view_mut((nx + 2 * (lag - 1), nx + 2 * (lag - 2)), (2, 2)).fill_with_identity();
        }
    }
    m.view_mut((nx + ny, 0), (1, total)).copy_from(&feedback);
    for j in 1..nu {
        m[(nx + ny + j, nx + ny + j - 1)] = 1.0;
    }
    m
}

/// Relative difference with an absolute floor of 1.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Random stable linear system `x+ = A x + B u, y = C x` sampled as a
/// snapshot dataset with the identity lifting.
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearSystem {
    pub fn random(rng: &mut ChaCha8Rng, n: usize, m: usize, q: usize) -> Self {
        Self { a: random_with_radius(rng, n, 0.9), b: random_matrix(rng, n, m), c: random_matrix(rng, q, n) }
    }

    pub fn dataset(&self, rng: &mut ChaCha8Rng, columns: usize) -> koopman_tower::SnapshotDataset {
        let x = random_matrix(rng, self.a.nrows(), columns);
        let u = random_matrix(rng, self.b.ncols(), columns);
        let xp = &self.a * &x + &self.b * &u;
        koopman_tower::SnapshotDataset {
            y: &self.c * &x,
            y_plus: &self.c * &xp,
            y_lift: x,
            y_plus_lift: xp,
            omega: u,
            spec: LiftingSpec::new(0),
        }
    }
}

/// Strictly convex QP with `G = I` and random, partly one-sided boxes.
pub fn random_box_qp(rng: &mut ChaCha8Rng, n: usize) -> koopman_tower::QpProblem {
    let h = random_spd(rng, n, 0.1, 10.0);
    let f = random_vector(rng, n) * 5.0;
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        lo[i] = if rng.gen_bool(0.15) { f64::NEG_INFINITY } else { rng.gen_range(-1.0..0.0) };
        hi[i] = if rng.gen_bool(0.15) { f64::INFINITY } else { rng.gen_range(0.0..1.0) };
    }
    koopman_tower::QpProblem { h, f, g: DMatrix::identity(n, n), b_min: lo, b_max: hi }
}

/// Strictly convex QP with a dense constraint matrix and a feasible interior point.
pub fn random_general_qp(rng: &mut ChaCha8Rng, n: usize, c: usize) -> koopman_tower::QpProblem {
    let h = random_spd(rng, n, 0.5, 5.0);
    let f = random_vector(rng, n) * 10.0;
    let g = random_matrix(rng, c, n);
    let x0 = random_vector(rng, n) * 0.1;
    let gx = &g * &x0;
    let mut lo = DVector::zeros(c);
    let mut hi = DVector::zeros(c);
    for i in 0..c {
        lo[i] = if i % 5 == 4 { f64::NEG_INFINITY } else { gx[i] - rng.gen_range(0.1..1.0) };
        hi[i] = gx[i] + rng.gen_range(0.1..1.0);
    }
    koopman_tower::QpProblem { h, f, g, b_min: lo, b_max: hi }
}

/// One random MPC instance: model, weights, bounds and parameters.
pub struct MpcInstance {
    pub pred: LiftedPredictor,
    pub cfg: KmpcConfig,
    pub z0: DVector<f64>,
    pub refs: Vec<DVector<f64>>,
    pub u_prev: DVector<f64>,
    pub w: DVector<f64>,
}

impl MpcInstance {
    pub fn random(rng: &mut ChaCha8Rng, delays: usize, inputs: usize, horizon: usize) -> Self {
        let outputs = 2;
        let pred = random_predictor(rng, LiftingSpec::new(delays), inputs, outputs);
        let mut cfg = KmpcConfig::tower(horizon, 1.0, 1.0, 0.0, 1.0, 1.0);
        cfg.qe = random_spd(rng, outputs, 0.1, 5.0);
        cfg.s = random_spd(rng, outputs, 0.1, 20.0);
        cfg.r = random_spd(rng, inputs, 0.0, 1.0);
        cfg.rd = random_spd(rng, inputs, 0.1, 5.0);
        cfg.u_min = DVector::from_fn(inputs, |_, _| rng.gen_range(-2.0..-0.1));
        cfg.u_max = DVector::from_fn(inputs, |_, _| rng.gen_range(0.1..2.0));
        if rng.gen_bool(0.5) {
            cfg.du_min = Some(DVector::from_element(inputs, -rng.gen_range(0.05..0.5)));
            cfg.du_max = Some(DVector::from_element(inputs, rng.gen_range(0.05..0.5)));
        }
        let n = pred.lifted_dim();
        Self {
            z0: random_vector(rng, n),
            refs: (0..horizon).map(|_| random_vector(rng, outputs)).collect(),
            u_prev: random_vector(rng, inputs) * 0.1,
            w: random_vector(rng, n) * 0.1,
            pred,
            cfg,
        }
    }
}

/// Largest relative mismatch between the condensed problem and explicit
/// simulation over a few random increment sequences: (objective, inputs, outputs).
pub fn condensation_mismatch(rng: &mut ChaCha8Rng, inst: &MpcInstance) -> (f64, f64, f64) {
    use koopman_tower::kmpc::condense;
    use koopman_tower::TrackingReference;

    let qp = condense(&inst.pred, &inst.cfg).unwrap();
    let reference = TrackingReference::new(inst.refs.clone()).unwrap();
    let p = qp.param_vector(&inst.z0, &reference, &inst.u_prev, &inst.w).unwrap();
    let dim = qp.layout.decision_dim();
    let m = inst.pred.input_dim();
    let (base, _) = rollout_cost(&inst.pred, &inst.cfg, &inst.z0, &inst.refs, &inst.u_prev, &inst.w, &DVector::zeros(dim));
    let (lo, hi) = qp.bounds(&inst.u_prev);
    let (mut obj, mut inp, mut out) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..4 {
        let du = random_vector(rng, dim) * 0.3;
        let (cost, inputs) = rollout_cost(&inst.pred, &inst.cfg, &inst.z0, &inst.refs, &inst.u_prev, &inst.w, &du);
        let explicit = cost - base;
        obj = obj.max((qp.objective(&du, &p) - explicit).abs() / cost.abs().max(1.0));

        // input rows of G du must sit between the shifted bounds exactly when u does
        let gdu = &qp.g * &du;
        let planned = qp.planned_inputs(&du, &inst.u_prev);
        for k in 0..inst.cfg.horizon {
            for i in 0..m {
                let row = k * m + i;
                let u = inputs[k][i];
                inp = inp.max((gdu[row] + inst.u_prev[i] - u).abs() / u.abs().max(1.0));
                inp = inp.max((planned[row] - u).abs() / u.abs().max(1.0));
                inp = inp.max((lo[row] - (inst.cfg.u_min[i] - inst.u_prev[i])).abs());
                inp = inp.max((hi[row] - (inst.cfg.u_max[i] - inst.u_prev[i])).abs());
                if let (Some(dlo), Some(dhi)) = (&inst.cfg.du_min, &inst.cfg.du_max) {
                    let rate = dim + row;
                    inp = inp.max((gdu[rate] - du[row]).abs());
                    inp = inp.max((lo[rate] - dlo[i]).abs()).max((hi[rate] - dhi[i]).abs());
                }
            }
        }

        let predicted = qp.predicted_outputs(&du, &inst.z0, &inst.u_prev, &inst.w);
        let mut z = inst.z0.clone();
        for k in 0..inst.cfg.horizon {
            z = &inst.pred.a * &z + &inst.pred.b * &inputs[k] + &inst.w;
            let y = &inst.pred.c * &z;
            for j in 0..y.len() {
                out = out.max((predicted[k * y.len() + j] - y[j]).abs() / y[j].abs().max(1.0));
            }
        }
    }
    (obj, inp, out)
}

/// Predictors identified from the default excitation suite.
pub struct TowerModels {
    /// Stabilization predictor with its LQR gain and Riccati solution.
    pub lqr: koopman_tower::format::PredictorFile,
    pub regulation: koopman_tower::format::PredictorFile,
    pub tracking: koopman_tower::format::PredictorFile,
}

impl TowerModels {
    pub fn identify(cfg: &koopman_tower::RunConfig) -> Self {
        use koopman_tower::format::PredictorFile;
        use koopman_tower::harness::pipeline::design_lqr;
        use koopman_tower::harness::{collect, identify};

        let data = collect(cfg).unwrap();
        let reg = identify(cfg, &data, cfg.stabilization_spec()).unwrap().predictor;
        let trk = identify(cfg, &data, cfg.tracking_spec()).unwrap().predictor;
        let design = design_lqr(cfg, &reg).unwrap();
        Self {
            lqr: PredictorFile { predictor: reg.clone(), gain: Some(design.k), riccati: Some(design.p) },
            regulation: PredictorFile::new(reg),
            tracking: PredictorFile::new(trk),
        }
    }

    /// Model file the configured controller and scenario run on.
    pub fn for_config(&self, cfg: &koopman_tower::RunConfig) -> &koopman_tower::format::PredictorFile {
        use koopman_tower::harness::ControllerKind;
        match cfg.scenario.controller {
            ControllerKind::Lqr => &self.lqr,
            _ if cfg.scenario_spec() == cfg.tracking_spec() => &self.tracking,
            _ => &self.regulation,
        }
    }

    pub fn run(&self, cfg: &koopman_tower::RunConfig) -> koopman_tower::harness::ScenarioOutcome {
        koopman_tower::harness::run_scenario(cfg, Some(self.for_config(cfg))).unwrap()
    }
}

pub fn scenario_config(kind: koopman_tower::harness::ScenarioKind, controller: koopman_tower::harness::ControllerKind) -> koopman_tower::RunConfig {
    let mut cfg = koopman_tower::RunConfig::default();
    cfg.scenario.kind = kind;
    cfg.scenario.controller = controller;
    cfg
}

/// Constant reference with a constant actuator-side disturbance; the step
/// happens at 1 s and the run lasts 11 s.
pub fn offset_config(reference_deg: f64, disturbance: f64) -> koopman_tower::RunConfig {
    use koopman_tower::harness::{ControllerKind, ScenarioKind};
    let mut cfg = scenario_config(ScenarioKind::StepTracking, ControllerKind::Kmpc);
    cfg.scenario.step_levels_deg = vec![reference_deg];
    cfg.scenario.step_dwell = 10.0;
    cfg.scenario.input_disturbance = disturbance;
    cfg.scenario.compare_uncontrolled = false;
    cfg
}

/// Largest `|phi - r|` of the noise-free output over `t in [from, to]`.
pub fn max_tracking_error(trace: &koopman_tower::harness::LoopTrace, from: f64, to: f64) -> f64 {
    trace
        .rows
        .iter()
        .zip(&trace.true_output)
        .filter(|(r, _)| r.t >= from - 1e-9 && r.t <= to + 1e-9)
        .map(|(r, y)| (y.phi - r.r_phi).abs())
        .fold(0.0, f64::max)
}
