//! Sample-by-sample simulation of the plant with a controller in the loop.
//!
//! Each sample runs measurement, lifting, control and actuation in that order.
//! Controllers see the input that was actually applied on the previous
//! sample, including any open-loop override.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::signals::Signal;
use crate::edmd::LiftedPredictor;
use crate::error::{Error, Result};
use crate::format::ExperimentRow;
use crate::kmpc::{KmpcConfig, KmpcController, TrackingReference};
use crate::lifting::{HistoryBuffer, LiftingSpec};
use crate::lqr::{lqr_control, saturate};
use crate::plant::{measure, step, Measurement, PlantParams, TowerState};
use crate::qp::QpStatus;

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAction {
    pub u: f64,
    pub solver_iters: usize,
    pub status: &'static str,
}

impl ControlAction {
    fn fixed(u: f64, status: &'static str) -> Self {
        Self { u, solver_iters: 0, status }
    }
}

pub trait Controller {
    fn name(&self) -> &'static str;

    /// Computes the input for sample `k`. When `engaged` is false the plant
    /// is driven open loop and the controller only keeps its state current.
    fn update(&mut self, m: Measurement, u_prev: f64, k: usize, engaged: bool) -> Result<ControlAction>;
}

/// Applies zero input.
#[derive(Debug, Clone, Default)]
pub struct Passive;

impl Controller for Passive {
    fn name(&self) -> &'static str {
        "none"
    }

    fn update(&mut self, _m: Measurement, _u_prev: f64, _k: usize, engaged: bool) -> Result<ControlAction> {
        Ok(ControlAction::fixed(0.0, if engaged { "passive" } else { "open_loop" }))
    }
}

/// Saturated lifted-state feedback `u = -K z`.
#[derive(Debug, Clone)]
pub struct LqrLoop {
    k: DMatrix<f64>,
    spec: LiftingSpec,
    buffer: HistoryBuffer,
    limit: f64,
}

impl LqrLoop {
    pub fn new(k: DMatrix<f64>, spec: LiftingSpec, limit: f64) -> Result<Self> {
        if k.shape() != (1, spec.lifted_dim()) {
            return Err(Error::Dimension(format!("gain is {:?}, expected 1x{}", k.shape(), spec.lifted_dim())));
        }
        Ok(Self { k, spec, buffer: HistoryBuffer::new(spec), limit })
    }
}

impl Controller for LqrLoop {
    fn name(&self) -> &'static str {
        "lqr"
    }

    fn update(&mut self, m: Measurement, u_prev: f64, _k: usize, engaged: bool) -> Result<ControlAction> {
        self.buffer.push(m, u_prev);
        if !engaged {
            return Ok(ControlAction::fixed(0.0, "open_loop"));
        }
        if !self.buffer.is_full() {
            return Ok(ControlAction::fixed(0.0, "warmup"));
        }
        Ok(ControlAction::fixed(lqr_control(&self.k, &self.buffer, self.spec, self.limit), "lqr"))
    }
}

/// Receding-horizon KMPC with a previewed phi reference and zero phi_dot reference.
#[derive(Debug, Clone)]
pub struct KmpcLoop {
    ctrl: KmpcController,
    spec: LiftingSpec,
    buffer: HistoryBuffer,
    reference: Signal,
    dt: f64,
    horizon: usize,
}

impl KmpcLoop {
    pub fn new(pred: LiftedPredictor, cfg: &KmpcConfig, reference: Signal) -> Result<Self> {
        if pred.input_dim() != 1 || pred.output_dim() != 2 {
            return Err(Error::Dimension("tower KMPC needs a 1-input, 2-output predictor".into()));
        }
        let spec = pred.spec;
        let dt = pred.dt;
        let ctrl = KmpcController::new(pred, cfg)?;
        Ok(Self { ctrl, spec, buffer: HistoryBuffer::new(spec), reference, dt, horizon: cfg.horizon })
    }

    pub fn controller(&self) -> &KmpcController {
        &self.ctrl
    }

    fn preview(&self, k: usize) -> TrackingReference {
        let points = (1..=self.horizon)
            .map(|j| DVector::from_vec(vec![self.reference.value((k + j) as f64 * self.dt), 0.0]))
            .collect();
        TrackingReference::new(points).expect("horizon >= 1")
    }
}

impl Controller for KmpcLoop {
    fn name(&self) -> &'static str {
        "kmpc"
    }

    fn update(&mut self, m: Measurement, u_prev: f64, k: usize, engaged: bool) -> Result<ControlAction> {
        self.buffer.push(m, u_prev);
        let Ok(z) = self.buffer.lift(self.spec) else {
            return Ok(ControlAction::fixed(0.0, if engaged { "warmup" } else { "open_loop" }));
        };
        let u_prev = DVector::from_element(1, u_prev);
        if !engaged {
            self.ctrl.observe(&z, &u_prev);
            return Ok(ControlAction::fixed(0.0, "open_loop"));
        }
        let (u, diag) = self.ctrl.step(&z, &u_prev, &self.preview(k))?;
        Ok(ControlAction { u: u[0], solver_iters: diag.iterations, status: diag.status.as_str() })
    }
}

/// Zero-mean uniform measurement noise with per-channel half-widths.
#[derive(Debug, Clone)]
pub struct MeasurementNoise {
    pub phi: f64,
    pub phi_dot: f64,
    rng: ChaCha8Rng,
}

impl MeasurementNoise {
    pub fn new(phi: f64, phi_dot: f64, seed: u64) -> Self {
        Self { phi, phi_dot, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn off() -> Self {
        Self::new(0.0, 0.0, 0)
    }

    fn corrupt(&mut self, m: Measurement) -> Measurement {
        if self.phi == 0.0 && self.phi_dot == 0.0 {
            return m;
        }
        let mut draw = |a: f64| if a > 0.0 { self.rng.gen_range(-a..=a) } else { 0.0 };
        Measurement { phi: m.phi + draw(self.phi), phi_dot: m.phi_dot + draw(self.phi_dot) }
    }
}

/// Everything a closed-loop run needs besides the controller.
#[derive(Debug, Clone)]
pub struct LoopSetup {
    pub params: PlantParams,
    pub initial: TowerState,
    pub steps: usize,
    /// Input applied instead of the controller's while `t < open_loop_until`.
    pub open_loop: Signal,
    pub open_loop_until: f64,
    /// Torque on the top link.
    pub disturbance: Signal,
    /// Torque added to the actuator input after saturation.
    pub input_disturbance: f64,
    /// phi reference, logged and used by tracking controllers.
    pub reference: Signal,
    pub noise: MeasurementNoise,
}

impl LoopSetup {
    pub fn new(params: PlantParams, initial: TowerState, steps: usize) -> Self {
        Self {
            params,
            initial,
            steps,
            open_loop: Signal::Zero,
            open_loop_until: 0.0,
            disturbance: Signal::Zero,
            input_disturbance: 0.0,
            reference: Signal::Zero,
            noise: MeasurementNoise::off(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopTrace {
    pub rows: Vec<ExperimentRow>,
    /// Top-link disturbance per sample.
    pub disturbance: Vec<f64>,
    /// Controller output before actuator saturation.
    pub commanded: Vec<f64>,
    /// Noise-free sensor readings.
    pub true_output: Vec<Measurement>,
}

impl LoopTrace {
    /// Largest `|commanded u|` over samples where the QP reported `solved`.
    pub fn max_solved_command(&self) -> f64 {
        self.rows
            .iter()
            .zip(&self.commanded)
            .filter(|(r, _)| r.status == QpStatus::Solved.as_str())
            .fold(0.0_f64, |m, (_, u)| m.max(u.abs()))
    }
}

pub fn run_loop(mut setup: LoopSetup, controller: &mut dyn Controller) -> Result<LoopTrace> {
    let p = setup.params.clone();
    p.validate()?;
    let mut state = setup.initial.clone();
    let mut u_prev = 0.0;
    let mut trace = LoopTrace {
        rows: Vec::with_capacity(setup.steps),
        disturbance: Vec::with_capacity(setup.steps),
        commanded: Vec::with_capacity(setup.steps),
        true_output: Vec::with_capacity(setup.steps),
    };
    for k in 0..setup.steps {
        let t = k as f64 * p.dt;
        let truth = measure(&state, &p);
        let m = setup.noise.corrupt(truth);
        let engaged = t + 1e-9 >= setup.open_loop_until;
        let action = controller.update(m, u_prev, k, engaged)?;
        let commanded = if engaged { action.u } else { setup.open_loop.value(t) };
        let u = saturate(commanded, p.torque_limit);
        let d = setup.disturbance.value(t);
        trace.rows.push(ExperimentRow {
            t,
            phi: m.phi,
            phi_dot: m.phi_dot,
            r_phi: setup.reference.value(t),
            u,
            du: u - u_prev,
            solver_iters: action.solver_iters,
            status: action.status.to_string(),
        });
        trace.disturbance.push(d);
        trace.commanded.push(commanded);
        trace.true_output.push(truth);
        state = step(&state, u + setup.input_disturbance, d, &p).map_err(|e| Error::Simulation { index: k, source: Box::new(e) })?;
        u_prev = u;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passive_loop_matches_open_loop_simulation() {
        let p = PlantParams::default();
        let init = TowerState::tilted(p.n_links, 0.2);
        let trace = run_loop(LoopSetup::new(p.clone(), init.clone(), 50), &mut Passive).unwrap();
        let sim = crate::plant::simulate(&init, &[0.0; 50], &[0.0; 50], &p).unwrap();
        for (r, s) in trace.rows.iter().zip(&sim) {
            assert_eq!(r.phi, s.measurement.phi);
            assert_eq!(r.phi_dot, s.measurement.phi_dot);
        }
    }

    #[test]
    fn open_loop_phase_overrides_and_saturates() {
        let p = PlantParams::default();
        let mut setup = LoopSetup::new(p.clone(), TowerState::rest(p.n_links), 20);
        setup.open_loop = Signal::Constant(2.0);
        setup.open_loop_until = 0.1;
        let trace = run_loop(setup, &mut Passive).unwrap();
        assert_eq!(trace.rows[0].u, p.torque_limit);
        assert_eq!(trace.rows[0].status, "open_loop");
        assert_eq!(trace.rows[9].u, p.torque_limit);
        assert_eq!(trace.rows[10].u, 0.0);
        assert_eq!(trace.rows[10].du, -p.torque_limit);
        assert_eq!(trace.rows[10].status, "passive");
    }

    #[test]
    fn lqr_loop_warms_up_then_acts() {
        let spec = LiftingSpec::new(2);
        let k = DMatrix::from_element(1, spec.lifted_dim(), 1.0);
        let mut ctrl = LqrLoop::new(k, spec, 0.5).unwrap();
        let m = Measurement { phi: 0.1, phi_dot: 0.0 };
        assert_eq!(ctrl.update(m, 0.0, 0, true).unwrap().status, "warmup");
        assert_eq!(ctrl.update(m, 0.0, 1, true).unwrap().status, "warmup");
        let a = ctrl.update(m, 0.0, 2, true).unwrap();
        assert_eq!(a.status, "lqr");
        assert!((a.u + 0.3).abs() < 1e-15);
        assert!(LqrLoop::new(DMatrix::zeros(1, 3), spec, 0.5).is_err());
    }

    #[test]
    fn noise_is_bounded_and_seeded() {
        let mut a = MeasurementNoise::new(0.01, 0.1, 5);
        let mut b = MeasurementNoise::new(0.01, 0.1, 5);
        for _ in 0..100 {
            let x = a.corrupt(Measurement::ZERO);
            assert_eq!(x, b.corrupt(Measurement::ZERO));
            assert!(x.phi.abs() <= 0.01 && x.phi_dot.abs() <= 0.1);
        }
        assert_eq!(MeasurementNoise::off().corrupt(Measurement { phi: 1.0, phi_dot: 2.0 }).phi, 1.0);
    }
}
