//! Fixtures shared by the benchmarks.

use koopman_tower::kmpc::{condense, CondensedQp};
use koopman_tower::linalg::spectral_radius;
use koopman_tower::{KmpcConfig, LiftedPredictor, LiftingSpec, QpProblem, TrackingReference};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TORQUE_LIMIT: f64 = 0.5;

/// Stable random single-input, two-output lifted predictor.
pub fn predictor(delays: usize, seed: u64) -> LiftedPredictor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = LiftingSpec::new(delays);
    let n = spec.lifted_dim();
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let a = &a * (0.97 / spectral_radius(&a));
    let b = DMatrix::from_fn(n, 1, |_, _| rng.gen_range(-1.0..1.0));
    let c = DMatrix::from_fn(2, n, |_, _| rng.gen_range(-1.0..1.0));
    LiftedPredictor::new(a, b, c, spec, 0.01).expect("valid predictor")
}

pub fn tower_mpc(horizon: usize) -> KmpcConfig {
    let mut cfg = KmpcConfig::tower(horizon, 10.0, 0.0, 0.0, 10.0, TORQUE_LIMIT);
    cfg.offset_gain = 0.2;
    cfg
}

/// The condensed QP for one receding-horizon step with a step reference.
pub fn mpc_problem(qp: &CondensedQp, seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = qp.layout;
    let z0 = DVector::from_fn(l.lifted, |_, _| rng.gen_range(-0.2..0.2));
    let reference = TrackingReference::constant(DVector::from_vec(vec![0.07, 0.0]));
    let u_prev = DVector::from_element(1, 0.1);
    let p = qp.param_vector(&z0, &reference, &u_prev, &DVector::zeros(l.lifted)).expect("layout matches");
    let (b_min, b_max) = qp.bounds(&u_prev);
    QpProblem { h: qp.h.clone(), f: qp.linear_term(&p), g: qp.g.clone(), b_min, b_max }
}

pub fn condensed(delays: usize, horizon: usize) -> CondensedQp {
    condense(&predictor(delays, 1), &tower_mpc(horizon)).expect("condensation succeeds")
}
