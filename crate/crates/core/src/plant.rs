//! Planar link-chain surrogate of the flexible tower.
//!
//! The chain has `n_links` rigid links stacked on a fixed base. Joint `i`
//! connects link `i - 1` (the ground for `i = 1`) to link `i` through a linear
//! torsional spring and damper acting on the relative angle. Each link carries
//! a point mass at its tip, so link `i` has inertia `m l^2` and supports the
//! weight of every mass from `i` upward. The resulting gravity moment on link
//! `i` is `(n - i + 1) m g l sin(theta_i)`, the inverted-pendulum term. The
//! actuator torque acts across the base joint and the disturbance torque
//! acts on the top link.
//!
//! Angles are absolute (measured from the vertical) and in radians.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RK4_SUBSTEPS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    pub n_links: usize,
    /// kg per link
    pub link_mass: f64,
    /// m per link
    pub link_length: f64,
    /// N·m/rad per joint
    pub stiffness: f64,
    /// N·m·s/rad per joint
    pub damping: f64,
    pub gravity: f64,
    /// 1-based index of the measured link.
    pub sensor_link: usize,
    /// N·m
    pub torque_limit: f64,
    /// Sample period in seconds.
    pub dt: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            n_links: 8,
            link_mass: 0.1,
            link_length: 0.07,
            stiffness: 10.0,
            damping: 0.02,
            gravity: 9.81,
            sensor_link: 4,
            torque_limit: 0.5,
            dt: 0.01,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_links < 2 {
            return Err(Error::InvalidInput(format!("n_links must be >= 2, got {}", self.n_links)));
        }
        if self.sensor_link < 1 || self.sensor_link > self.n_links {
            return Err(Error::InvalidInput(format!(
                "sensor_link must lie in [1, {}], got {}",
                self.n_links, self.sensor_link
            )));
        }
        let positive = [
            ("link_mass", self.link_mass),
            ("link_length", self.link_length),
            ("stiffness", self.stiffness),
            ("damping", self.damping),
            ("torque_limit", self.torque_limit),
            ("dt", self.dt),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be finite and > 0, got {value}")));
            }
        }
        if !self.gravity.is_finite() || self.gravity < 0.0 {
            return Err(Error::InvalidInput(format!("gravity must be finite and >= 0, got {}", self.gravity)));
        }
        Ok(())
    }

    pub fn link_inertia(&self) -> f64 {
        self.link_mass * self.link_length * self.link_length
    }

    /// Weight-bearing factor `(n - i + 1)` for the 0-based link index `i`.
    fn load_factor(&self, i: usize) -> f64 {
        (self.n_links - i) as f64
    }

    fn gravity_moment_coeff(&self, i: usize) -> f64 {
        self.load_factor(i) * self.link_mass * self.gravity * self.link_length
    }

    /// Linearized stiffness matrix at the upright equilibrium, such that the
    /// small-angle dynamics read `I theta'' = -K theta - D theta' + e_1 u + e_n d`.
    pub fn linear_stiffness(&self) -> DMatrix<f64> {
        let n = self.n_links;
        let mut k = chain_matrix(n, self.stiffness);
        for i in 0..n {
            k[(i, i)] -= self.gravity_moment_coeff(i);
        }
        k
    }

    pub fn linear_damping(&self) -> DMatrix<f64> {
        chain_matrix(self.n_links, self.damping)
    }
}

/// Fixed-free chain Laplacian scaled by `c`.
fn chain_matrix(n: usize, c: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = if i + 1 < n { 2.0 * c } else { c };
        if i > 0 {
            m[(i, i - 1)] = -c;
            m[(i - 1, i)] = -c;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerState {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub t: f64,
}

impl TowerState {
    pub fn rest(n_links: usize) -> Self {
        Self { theta: vec![0.0; n_links], omega: vec![0.0; n_links], t: 0.0 }
    }

    /// Every link at the same absolute angle, i.e. the chain rigidly tilted about its base.
    pub fn tilted(n_links: usize, angle: f64) -> Self {
        Self { theta: vec![angle; n_links], omega: vec![0.0; n_links], t: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.theta.iter().chain(&self.omega).all(|v| v.is_finite())
    }

    fn check(&self, params: &PlantParams) -> Result<()> {
        if self.theta.len() != params.n_links || self.omega.len() != params.n_links {
            return Err(Error::Dimension(format!(
                "state has {}/{} entries, plant has {} links",
                self.theta.len(),
                self.omega.len(),
                params.n_links
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidInput("state contains non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub phi: f64,
    pub phi_dot: f64,
}

impl Measurement {
    pub const ZERO: Measurement = Measurement { phi: 0.0, phi_dot: 0.0 };
}

/// Time derivative of a [`TowerState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub dtheta: Vec<f64>,
    pub domega: Vec<f64>,
}

pub fn dynamics(state: &TowerState, u: f64, d: f64, params: &PlantParams) -> Result<StateDerivative> {
    params.validate()?;
    state.check(params)?;
    if !u.is_finite() || !d.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite input u = {u}, d = {d}")));
    }
    let mut domega = vec![0.0; params.n_links];
    accelerations(&state.theta, &state.omega, u, d, params, &mut domega);
    Ok(StateDerivative { dtheta: state.omega.clone(), domega })
}

fn accelerations(theta: &[f64], omega: &[f64], u: f64, d: f64, p: &PlantParams, out: &mut [f64]) {
    let n = p.n_links;
    let inertia = p.link_inertia();
    // Torque transmitted by joint i onto link i; the reaction acts on link i - 1.
    let joint = |i: usize| {
        let (below_theta, below_omega) = if i == 0 { (0.0, 0.0) } else { (theta[i - 1], omega[i - 1]) };
        let mut tau = -p.stiffness * (theta[i] - below_theta) - p.damping * (omega[i] - below_omega);
        if i == 0 {
            tau += u;
        }
        tau
    };
    let mut tau_here = joint(0);
    for i in 0..n {
        let tau_above = if i + 1 < n { joint(i + 1) } else { 0.0 };
        let mut net = tau_here - tau_above + p.gravity_moment_coeff(i) * theta[i].sin();
        if i + 1 == n {
            net += d;
        }
        out[i] = net / inertia;
        tau_here = tau_above;
    }
}

/// Advances the plant by one sample period using fixed-step RK4 on `dt / 4` substeps.
pub fn step(state: &TowerState, u: f64, d: f64, params: &PlantParams) -> Result<TowerState> {
    params.validate()?;
    state.check(params)?;
    let n = params.n_links;
    let h = params.dt / RK4_SUBSTEPS as f64;
    let mut th = state.theta.clone();
    let mut om = state.omega.clone();

    let mut k1w = vec![0.0; n];
    let mut k2w = vec![0.0; n];
    let mut k3w = vec![0.0; n];
    let mut k4w = vec![0.0; n];
    let mut th_tmp = vec![0.0; n];
    let mut om_tmp = vec![0.0; n];
    let mut k2t = vec![0.0; n];
    let mut k3t = vec![0.0; n];

    for _ in 0..RK4_SUBSTEPS {
        accelerations(&th, &om, u, d, params, &mut k1w);
        for i in 0..n {
            th_tmp[i] = th[i] + 0.5 * h * om[i];
            om_tmp[i] = om[i] + 0.5 * h * k1w[i];
        }
        k2t.copy_from_slice(&om_tmp);
        accelerations(&th_tmp, &om_tmp, u, d, params, &mut k2w);
        for i in 0..n {
            th_tmp[i] = th[i] + 0.5 * h * k2t[i];
            om_tmp[i] = om[i] + 0.5 * h * k2w[i];
        }
        k3t.copy_from_slice(&om_tmp);
        accelerations(&th_tmp, &om_tmp, u, d, params, &mut k3w);
        for i in 0..n {
            th_tmp[i] = th[i] + h * k3t[i];
            om_tmp[i] = om[i] + h * k3w[i];
        }
        accelerations(&th_tmp, &om_tmp, u, d, params, &mut k4w);
        for i in 0..n {
            let k4t = om_tmp[i];
            th[i] += h / 6.0 * (om[i] + 2.0 * k2t[i] + 2.0 * k3t[i] + k4t);
            om[i] += h / 6.0 * (k1w[i] + 2.0 * k2w[i] + 2.0 * k3w[i] + k4w[i]);
        }
    }

    let next = TowerState { theta: th, omega: om, t: state.t + params.dt };
    if !next.is_finite() {
        return Err(Error::Blowup { time: next.t });
    }
    Ok(next)
}

pub fn measure(state: &TowerState, params: &PlantParams) -> Measurement {
    let i = params.sensor_link - 1;
    Measurement { phi: state.theta[i], phi_dot: state.omega[i] }
}

/// Total mechanical energy relative to the upright rest configuration.
pub fn mechanical_energy(state: &TowerState, params: &PlantParams) -> f64 {
    let inertia = params.link_inertia();
    let mut energy = 0.0;
    let mut below = 0.0;
    for i in 0..params.n_links {
        let rel = state.theta[i] - below;
        energy += 0.5 * inertia * state.omega[i] * state.omega[i];
        energy += 0.5 * params.stiffness * rel * rel;
        energy += params.gravity_moment_coeff(i) * (state.theta[i].cos() - 1.0);
        below = state.theta[i];
    }
    energy
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: TowerState,
    pub measurement: Measurement,
}

/// Open-loop rollout. Element `k` holds the state before `u_signal[k]` is applied,
/// so the output has the same length as the input signals.
pub fn simulate(
    initial: &TowerState,
    u_signal: &[f64],
    d_signal: &[f64],
    params: &PlantParams,
) -> Result<Vec<Sample>> {
    if u_signal.len() != d_signal.len() {
        return Err(Error::Dimension(format!(
            "input signal has {} samples, disturbance signal has {}",
            u_signal.len(),
            d_signal.len()
        )));
    }
    params.validate()?;
    initial.check(params)?;
    let mut out = Vec::with_capacity(u_signal.len());
    let mut state = initial.clone();
    for (k, (&u, &d)) in u_signal.iter().zip(d_signal).enumerate() {
        let measurement = measure(&state, params);
        let next = if k + 1 < u_signal.len() {
            Some(step(&state, u, d, params).map_err(|e| Error::Simulation { index: k, source: Box::new(e) })?)
        } else {
            None
        };
        out.push(Sample { state, measurement });
        match next {
            Some(s) => state = s,
            None => break,
        }
    }
    Ok(out)
}
