//! Run configuration.
//!
//! The file is `key = value` lines grouped under `[section]` headers (a TOML
//! subset). Every key is optional and falls back to the defaults below;
//! unknown keys and sections are rejected. Angles are given in degrees and
//! converted to radians by the accessors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmpc::KmpcConfig;
use crate::lifting::LiftingSpec;
use crate::plant::PlantParams;
use crate::qp::QpSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    InitialTilt,
    ExciteThenDamp,
    PulseDisturbance,
    StepTracking,
    RampTracking,
    Collect,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::InitialTilt,
        ScenarioKind::ExciteThenDamp,
        ScenarioKind::PulseDisturbance,
        ScenarioKind::StepTracking,
        ScenarioKind::RampTracking,
        ScenarioKind::Collect,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::InitialTilt => "initial_tilt",
            ScenarioKind::ExciteThenDamp => "excite_then_damp",
            ScenarioKind::PulseDisturbance => "pulse_disturbance",
            ScenarioKind::StepTracking => "step_tracking",
            ScenarioKind::RampTracking => "ramp_tracking",
            ScenarioKind::Collect => "collect",
        }
    }

    pub fn is_tracking(&self) -> bool {
        matches!(self, ScenarioKind::StepTracking | ScenarioKind::RampTracking)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    None,
    Lqr,
    Kmpc,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::None, ControllerKind::Lqr, ControllerKind::Kmpc];

    pub fn as_str(&self) -> &'static str {
        match self {
            ControllerKind::None => "none",
            ControllerKind::Lqr => "lqr",
            ControllerKind::Kmpc => "kmpc",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown controller `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiftingSection {
    /// Delays of the predictor used for regulation (LQR and regulating KMPC).
    pub stabilization_delays: usize,
    /// Delays of the predictor used by KMPC in the tracking scenarios.
    pub tracking_delays: usize,
}

impl Default for LiftingSection {
    fn default() -> Self {
        Self { stabilization_delays: 2, tracking_delays: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    /// Samples per training trajectory.
    pub samples: usize,
    pub heldout_samples: usize,
    /// Minimum number of snapshot pairs over the training set.
    pub target_pairs: usize,
    /// Multiplies every excitation signal; 0 yields a rejected dataset.
    pub amplitude_scale: f64,
    /// Trajectories whose phi standard deviation falls below this are rejected.
    pub min_phi_std_deg: f64,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self { samples: 4000, heldout_samples: 3000, target_pairs: 20_000, amplitude_scale: 1.0, min_phi_std_deg: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifySection {
    /// Ridge as a multiple of `trace(Gram) / rows`; 0 selects the pseudoinverse.
    pub ridge_scale: f64,
    pub eval_horizon: usize,
}

impl Default for IdentifySection {
    fn default() -> Self {
        Self { ridge_scale: crate::edmd::DEFAULT_RIDGE_SCALE, eval_horizon: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrSection {
    pub q_phi: f64,
    pub q_phi_dot: f64,
    pub r: f64,
}

impl Default for LqrSection {
    fn default() -> Self {
        Self { q_phi: 10.0, q_phi_dot: 0.01, r: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmpcSection {
    pub horizon: usize,
    pub q_phi: f64,
    pub q_phi_dot: f64,
    /// `S = terminal_scale * Qe`.
    pub terminal_scale: f64,
    pub r: f64,
    pub rd: f64,
    /// Symmetric rate bound in N·m per sample; 0 disables the rate rows.
    pub du_limit: f64,
    pub offset_gain: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
}

impl Default for KmpcSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            q_phi: 10.0,
            q_phi_dot: 0.0,
            terminal_scale: 10.0,
            r: 0.0,
            rd: 10.0,
            du_limit: 0.0,
            offset_gain: 0.2,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    pub controller: ControllerKind,
    /// Seconds; 0 picks a length that suits the scenario.
    pub duration: f64,
    /// Also run the same scenario without control.
    pub compare_uncontrolled: bool,
    /// Predictor file for the controlled run; empty means `<out>/lqr_s<d>.txt`
    /// for LQR and `<out>/predictor_s<d>.txt` for KMPC.
    pub predictor: String,
    pub tilt_deg: f64,
    pub excite_duration: f64,
    /// N·m
    pub excite_amplitude: f64,
    /// Hz
    pub excite_frequency: f64,
    /// N·m on the top link
    pub pulse_amplitude: f64,
    pub pulse_duration: f64,
    pub pulse_count: usize,
    /// Explicit pulse start times in seconds; empty draws them from the seed.
    pub pulse_times: Vec<f64>,
    pub step_levels_deg: Vec<f64>,
    pub step_dwell: f64,
    pub ramp_levels_deg: Vec<f64>,
    /// Seconds spent moving between consecutive ramp levels.
    pub ramp_time: f64,
    /// Seconds held at each ramp level.
    pub ramp_hold: f64,
    /// Constant torque added to the actuator input, N·m.
    pub input_disturbance: f64,
    /// Seconds after each reference change excluded from the RMS error.
    pub transient: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::InitialTilt,
            controller: ControllerKind::Lqr,
            duration: 0.0,
            compare_uncontrolled: true,
            predictor: String::new(),
            tilt_deg: -20.0,
            excite_duration: 6.0,
            excite_amplitude: 0.08,
            excite_frequency: 2.5,
            pulse_amplitude: 0.18,
            pulse_duration: 0.5,
            pulse_count: 2,
            pulse_times: Vec::new(),
            step_levels_deg: vec![4.0, -3.0, 2.0, 0.0],
            step_dwell: 5.0,
            ramp_levels_deg: vec![0.0, 4.0, -4.0, 0.0],
            ramp_time: 4.0,
            ramp_hold: 3.0,
            input_disturbance: 0.0,
            transient: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Half-width of the uniform noise on phi, degrees.
    pub phi_deg: f64,
    /// Half-width of the uniform noise on phi_dot, degrees per second.
    pub phi_dot_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub plant: PlantParams,
    pub lifting: LiftingSection,
    pub collect: CollectSection,
    pub identify: IdentifySection,
    pub lqr: LqrSection,
    pub kmpc: KmpcSection,
    pub scenario: ScenarioSection,
    pub noise: NoiseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: "out".into(),
            plant: PlantParams::default(),
            lifting: LiftingSection::default(),
            collect: CollectSection::default(),
            identify: IdentifySection::default(),
            lqr: LqrSection::default(),
            kmpc: KmpcSection::default(),
            scenario: ScenarioSection::default(),
            noise: NoiseSection::default(),
        }
    }
}

fn check(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.into()))
    }
}

fn finite_nonneg(name: &str, v: f64) -> Result<()> {
    check(v.is_finite() && v >= 0.0, format!("{name} must be finite and >= 0, got {v}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::format::read_text(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate().map_err(|e| Error::Config(format!("[plant] {e}")))?;
        let c = &self.collect;
        check(c.samples >= 10, "[collect] samples must be >= 10")?;
        check(c.heldout_samples >= 10, "[collect] heldout_samples must be >= 10")?;
        finite_nonneg("[collect] amplitude_scale", c.amplitude_scale)?;
        finite_nonneg("[collect] min_phi_std_deg", c.min_phi_std_deg)?;
        finite_nonneg("[identify] ridge_scale", self.identify.ridge_scale)?;
        check(self.identify.eval_horizon >= 1, "[identify] eval_horizon must be >= 1")?;
        let l = &self.lqr;
        finite_nonneg("[lqr] q_phi", l.q_phi)?;
        finite_nonneg("[lqr] q_phi_dot", l.q_phi_dot)?;
        check(l.r.is_finite() && l.r > 0.0, "[lqr] r must be > 0")?;
        let k = &self.kmpc;
        check(k.horizon >= 1, "[kmpc] horizon must be >= 1")?;
        for (name, v) in [
            ("q_phi", k.q_phi),
            ("q_phi_dot", k.q_phi_dot),
            ("terminal_scale", k.terminal_scale),
            ("r", k.r),
            ("rd", k.rd),
            ("du_limit", k.du_limit),
        ] {
            finite_nonneg(&format!("[kmpc] {name}"), v)?;
        }
        check((0.0..=1.0).contains(&k.offset_gain), "[kmpc] offset_gain must lie in [0, 1]")?;
        check(k.eps_abs > 0.0 && k.eps_rel >= 0.0, "[kmpc] tolerances must be positive")?;
        check(k.max_iter >= 1, "[kmpc] max_iter must be >= 1")?;
        let s = &self.scenario;
        finite_nonneg("[scenario] duration", s.duration)?;
        check(s.tilt_deg.is_finite() && s.tilt_deg.abs() < 90.0, "[scenario] tilt_deg must lie in (-90, 90)")?;
        finite_nonneg("[scenario] excite_duration", s.excite_duration)?;
        finite_nonneg("[scenario] excite_frequency", s.excite_frequency)?;
        check(s.excite_amplitude.is_finite(), "[scenario] excite_amplitude must be finite")?;
        check(s.pulse_amplitude.is_finite(), "[scenario] pulse_amplitude must be finite")?;
        check(s.pulse_duration.is_finite() && s.pulse_duration > 0.0, "[scenario] pulse_duration must be > 0")?;
        check(s.pulse_times.iter().all(|t| t.is_finite() && *t >= 0.0), "[scenario] pulse_times must be >= 0")?;
        check(s.step_dwell.is_finite() && s.step_dwell > 0.0, "[scenario] step_dwell must be > 0")?;
        check(s.ramp_time.is_finite() && s.ramp_time > 0.0, "[scenario] ramp_time must be > 0")?;
        finite_nonneg("[scenario] ramp_hold", s.ramp_hold)?;
        finite_nonneg("[scenario] transient", s.transient)?;
        check(s.input_disturbance.is_finite(), "[scenario] input_disturbance must be finite")?;
        check(
            s.step_levels_deg.iter().chain(&s.ramp_levels_deg).all(|v| v.is_finite()),
            "[scenario] reference levels must be finite",
        )?;
        if s.kind == ScenarioKind::StepTracking {
            check(!s.step_levels_deg.is_empty(), "[scenario] step_levels_deg is empty")?;
        }
        if s.kind == ScenarioKind::RampTracking {
            check(!s.ramp_levels_deg.is_empty(), "[scenario] ramp_levels_deg is empty")?;
        }
        finite_nonneg("[noise] phi_deg", self.noise.phi_deg)?;
        finite_nonneg("[noise] phi_dot_deg", self.noise.phi_dot_deg)?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn stabilization_spec(&self) -> LiftingSpec {
        LiftingSpec::new(self.lifting.stabilization_delays)
    }

    pub fn tracking_spec(&self) -> LiftingSpec {
        LiftingSpec::new(self.lifting.tracking_delays)
    }

    /// Delays of the predictor the configured scenario runs on.
    pub fn scenario_spec(&self) -> LiftingSpec {
        if self.scenario.controller == ControllerKind::Kmpc && self.scenario.kind.is_tracking() {
            self.tracking_spec()
        } else {
            self.stabilization_spec()
        }
    }

    /// Distinct delays that `identify` should fit, ascending.
    pub fn identified_delays(&self) -> Vec<usize> {
        let mut d = vec![self.lifting.stabilization_delays, self.lifting.tracking_delays];
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn kmpc_config(&self) -> KmpcConfig {
        let k = &self.kmpc;
        let mut cfg = KmpcConfig::tower(k.horizon, k.q_phi, k.q_phi_dot, k.r, k.rd, self.plant.torque_limit);
        cfg.s = &cfg.qe * k.terminal_scale;
        cfg.offset_gain = k.offset_gain;
        if k.du_limit > 0.0 {
            cfg.du_min = Some(nalgebra::DVector::from_element(1, -k.du_limit));
            cfg.du_max = Some(nalgebra::DVector::from_element(1, k.du_limit));
        }
        cfg.qp = QpSettings { eps_abs: k.eps_abs, eps_rel: k.eps_rel, max_iter: k.max_iter, ..QpSettings::default() };
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse_from_their_names() {
        for k in ScenarioKind::ALL {
            assert_eq!(k.as_str().parse::<ScenarioKind>().unwrap(), k);
        }
        for k in ControllerKind::ALL {
            assert_eq!(k.as_str().parse::<ControllerKind>().unwrap(), k);
        }
        assert!("tilt".parse::<ScenarioKind>().unwrap_err().is_config());
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let text = include_str!("../../../../configs/default.toml");
        assert_eq!(RunConfig::parse(text).unwrap(), RunConfig::default());
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn serialized_defaults_parse_back() {
        let text = RunConfig::default().to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse("seed = 7\n[plant]\nstiffness = 12.5\n[scenario]\nkind = \"step_tracking\"\ncontroller = \"kmpc\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.plant.stiffness, 12.5);
        assert_eq!(cfg.scenario.kind, ScenarioKind::StepTracking);
        assert_eq!(cfg.scenario_spec(), LiftingSpec::new(3));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1\n", "[plant]\nstifness = 1\n", "[nope]\n", "[scenario]\nkind = \"sideways\"\n"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in ["[plant]\ndt = 0\n", "[lqr]\nr = 0\n", "[kmpc]\nhorizon = 0\n", "[scenario]\ntilt_deg = 95\n"] {
            assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn rate_limit_enables_rate_rows() {
        let cfg = RunConfig::parse("[kmpc]\ndu_limit = 0.05\n").unwrap();
        let k = cfg.kmpc_config();
        assert_eq!(k.du_max.unwrap()[0], 0.05);
        assert!(RunConfig::default().kmpc_config().du_max.is_none());
    }
}
