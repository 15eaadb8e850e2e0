//! Collect, identify, design and run, with the files each stage reads and writes.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::closed_loop::{run_loop, Controller, KmpcLoop, LoopSetup, LoopTrace, LqrLoop, MeasurementNoise, Passive};
use super::config::{ControllerKind, RunConfig, ScenarioKind};
use super::metrics::{compute_metrics, MetricWindows, Metrics};
use super::signals::{self, Pulse, Signal};
use crate::edmd::{self, Evaluation, LiftedPredictor, Trajectory};
use crate::error::{Error, Result};
use crate::format::{self, PredictorFile, TrajectoryRow};
use crate::lifting::{lift_dataset, LiftingSpec};
use crate::linalg::spectral_radius;
use crate::lqr::{output_state_penalty, LqrDesign};
use crate::plant::{simulate, TowerState};

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;
const PULSE_STREAM: u64 = 0x7075_6c73_6500_0002;
const COLLECT_STREAM: u64 = 0x636f_6c6c_6563_0003;
/// Quiet lead-in before the first reference change in tracking scenarios.
const TRACKING_LEAD_IN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTrajectory {
    pub name: String,
    pub rows: Vec<TrajectoryRow>,
}

impl NamedTrajectory {
    pub fn trajectory(&self) -> Trajectory {
        format::rows_to_trajectory(&self.rows)
    }

    fn phi_stats(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let mean = self.rows.iter().map(|r| r.phi).sum::<f64>() / n;
        let var = self.rows.iter().map(|r| (r.phi - mean).powi(2)).sum::<f64>() / n;
        let peak = self.rows.iter().fold(0.0_f64, |m, r| m.max(r.phi.abs()));
        (var.sqrt(), peak)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectedData {
    pub training: Vec<NamedTrajectory>,
    pub heldout: NamedTrajectory,
}

impl CollectedData {
    pub fn training_trajectories(&self) -> Vec<Trajectory> {
        self.training.iter().map(NamedTrajectory::trajectory).collect()
    }

    pub fn pairs(&self, spec: LiftingSpec) -> usize {
        self.training.iter().map(|t| lift_dataset(&t.trajectory(), spec).len()).sum()
    }
}

/// The excitation suite: six training inputs followed by the held-out input.
pub fn excitation_suite(cfg: &RunConfig) -> Vec<(String, Vec<f64>)> {
    let c = &cfg.collect;
    let (len, dt, a) = (c.samples, cfg.plant.dt, c.amplitude_scale);
    let limit = cfg.plant.torque_limit;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ COLLECT_STREAM);
    let mut suite = vec![
        ("chirp".to_string(), signals::chirp(len, dt, 0.4 * a, 0.2, 6.0)),
        ("sine_2p5hz".to_string(), Signal::Sine { amplitude: 0.3 * a, frequency: 2.5 }.sample(len, dt)),
        ("sine_1hz".to_string(), Signal::Sine { amplitude: 0.4 * a, frequency: 1.0 }.sample(len, dt)),
        ("random_steps".to_string(), signals::random_steps(len, 50, 0.5 * a, &mut rng)),
        ("filtered_noise".to_string(), signals::filtered_noise(len, 0.9, 0.4 * a, limit, &mut rng)),
        ("pulse_train".to_string(), signals::pulse_train(len, 100, 300, 0.4 * a)),
    ];
    let heldout = signals::multisine(c.heldout_samples, dt, 0.15 * a, &[0.7, 1.9, 3.3], &mut rng);
    suite.push(("heldout".to_string(), heldout));
    for (_, u) in &mut suite {
        for v in u.iter_mut() {
            *v = v.clamp(-limit, limit);
        }
    }
    suite
}

fn simulate_named(cfg: &RunConfig, name: &str, u: &[f64]) -> Result<NamedTrajectory> {
    let p = &cfg.plant;
    let d = vec![0.0; u.len()];
    let samples = simulate(&TowerState::rest(p.n_links), u, &d, p)
        .map_err(|e| Error::Numerical(format!("excitation `{name}`: {e}")))?;
    let rows = samples
        .iter()
        .zip(u)
        .enumerate()
        .map(|(k, (s, &u))| TrajectoryRow { t: k as f64 * p.dt, phi: s.measurement.phi, phi_dot: s.measurement.phi_dot, u, d: 0.0 })
        .collect();
    Ok(NamedTrajectory { name: name.to_string(), rows })
}

/// Runs the excitation suite open loop from rest.
///
/// Fails when any trajectory barely moves the sensor or when the training set
/// yields fewer snapshot pairs than `[collect] target_pairs`.
pub fn collect(cfg: &RunConfig) -> Result<CollectedData> {
    let mut trajectories = Vec::new();
    let min_std = cfg.collect.min_phi_std_deg.to_radians();
    for (name, u) in excitation_suite(cfg) {
        let traj = simulate_named(cfg, &name, &u)?;
        let (std, peak) = traj.phi_stats();
        if !(std >= min_std) || std == 0.0 {
            log::warn!("excitation `{name}`: output variance below threshold, dataset rejected");
            return Err(Error::Degenerate(format!(
                "excitation `{name}`: phi standard deviation {:.3e} deg is below the {:.3e} deg threshold, dataset rejected",
                std.to_degrees(),
                cfg.collect.min_phi_std_deg
            )));
        }
        log::info!("excitation `{name}`: phi std {:.3} deg, peak {:.3} deg", std.to_degrees(), peak.to_degrees());
        trajectories.push(traj);
    }
    let heldout = trajectories.pop().expect("suite has a held-out entry");
    let data = CollectedData { training: trajectories, heldout };
    let spec = LiftingSpec::new(*cfg.identified_delays().last().expect("nonempty"));
    let pairs = data.pairs(spec);
    if pairs < cfg.collect.target_pairs {
        return Err(Error::Config(format!(
            "training set yields {pairs} snapshot pairs, below [collect] target_pairs = {}",
            cfg.collect.target_pairs
        )));
    }
    Ok(data)
}

pub fn training_file_name(index: usize, name: &str) -> String {
    format!("train_{}_{name}.csv", index + 1)
}

pub const HELDOUT_FILE: &str = "heldout.csv";

/// Writes the trajectories and a small report; returns the CSV paths.
pub fn write_collected(cfg: &RunConfig, data: &CollectedData, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (i, t) in data.training.iter().enumerate() {
        let path = dir.join(training_file_name(i, &t.name));
        format::write_text(&path, &format::trajectory_csv(&t.rows))?;
        paths.push(path);
    }
    let path = dir.join(HELDOUT_FILE);
    format::write_text(&path, &format::trajectory_csv(&data.heldout.rows))?;
    paths.push(path);

    let mut report = vec![
        ("seed".to_string(), cfg.seed.to_string()),
        ("trajectories".to_string(), data.training.len().to_string()),
        ("samples_per_trajectory".to_string(), cfg.collect.samples.to_string()),
    ];
    for d in cfg.identified_delays() {
        report.push((format!("pairs_s{d}"), data.pairs(LiftingSpec::new(d)).to_string()));
    }
    for t in data.training.iter().chain(std::iter::once(&data.heldout)) {
        let (std, peak) = t.phi_stats();
        report.push((format!("{}_phi_std_deg", t.name), std.to_degrees().to_string()));
        report.push((format!("{}_phi_peak_deg", t.name), peak.to_degrees().to_string()));
    }
    format::write_text(&dir.join("collect_report.txt"), &format::key_value_text(&report))?;
    Ok(paths)
}

/// Reads back what `write_collected` produced.
pub fn read_collected(dir: &Path) -> Result<CollectedData> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(usize, String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(file) = path.file_name().and_then(|f| f.to_str()) else { continue };
        let Some(rest) = file.strip_prefix("train_").and_then(|r| r.strip_suffix(".csv")) else { continue };
        let Some((idx, name)) = rest.split_once('_') else { continue };
        let Ok(idx) = idx.parse::<usize>() else { continue };
        files.push((idx, name.to_string(), path));
    }
    if files.is_empty() {
        return Err(Error::Config(format!("no train_*.csv trajectories in {}", dir.display())));
    }
    files.sort();
    let training = files
        .into_iter()
        .map(|(_, name, path)| Ok(NamedTrajectory { name, rows: format::read_trajectory(&path)? }))
        .collect::<Result<Vec<_>>>()?;
    let heldout = NamedTrajectory { name: "heldout".into(), rows: format::read_trajectory(&dir.join(HELDOUT_FILE))? };
    Ok(CollectedData { training, heldout })
}

#[derive(Debug, Clone)]
pub struct Identified {
    pub predictor: LiftedPredictor,
    pub evaluation: Evaluation,
}

impl Identified {
    pub fn report(&self) -> Vec<(String, String)> {
        let p = &self.predictor;
        let mut out = vec![
            ("delays".to_string(), p.spec.delays.to_string()),
            ("lifted_dim".to_string(), p.lifted_dim().to_string()),
            ("spectral_radius_a".to_string(), spectral_radius(&p.a).to_string()),
        ];
        if let Some(r) = &p.fit_report {
            out.push(("columns".into(), r.columns.to_string()));
            out.push(("ridge".into(), r.ridge.to_string()));
            out.push(("residual_ab".into(), r.residual_ab.to_string()));
            out.push(("residual_c".into(), r.residual_c.to_string()));
            out.push(("truncated_rank".into(), r.truncated_rank.map_or("none".into(), |k| k.to_string())));
        }
        out.extend(evaluation_report(&self.evaluation));
        out
    }
}

pub fn evaluation_report(e: &Evaluation) -> Vec<(String, String)> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    vec![
        ("eval_starts".to_string(), e.starts.to_string()),
        ("nrmse_step1".to_string(), e.nrmse[0].to_string()),
        ("baseline_nrmse_step1".to_string(), e.baseline_nrmse[0].to_string()),
        ("nrmse_curve".to_string(), join(&e.nrmse)),
        ("baseline_nrmse_curve".to_string(), join(&e.baseline_nrmse)),
    ]
}

pub fn identify(cfg: &RunConfig, data: &CollectedData, spec: LiftingSpec) -> Result<Identified> {
    let ds = edmd::assemble(&data.training_trajectories(), spec)?;
    let ridge = ds.scaled_ridge(cfg.identify.ridge_scale);
    let predictor = edmd::fit(&ds, ridge, cfg.plant.dt)?;
    let evaluation = edmd::evaluate(&predictor, &data.heldout.trajectory(), cfg.identify.eval_horizon)?;
    Ok(Identified { predictor, evaluation })
}

pub fn predictor_file_name(delays: usize) -> String {
    format!("predictor_s{delays}.txt")
}

pub fn lqr_file_name(delays: usize) -> String {
    format!("lqr_s{delays}.txt")
}

pub fn design_lqr(cfg: &RunConfig, pred: &LiftedPredictor) -> Result<LqrDesign> {
    if pred.input_dim() != 1 {
        return Err(Error::Dimension("tower LQR needs a single-input predictor".into()));
    }
    let q = output_state_penalty(pred.spec, cfg.lqr.q_phi, cfg.lqr.q_phi_dot);
    LqrDesign::new(pred, q, DMatrix::from_element(1, 1, cfg.lqr.r))
}

pub fn lqr_report(design: &LqrDesign, pred: &LiftedPredictor) -> Vec<(String, String)> {
    let k: Vec<String> = design.k.iter().map(|v| v.to_string()).collect();
    vec![
        ("delays".to_string(), pred.spec.delays.to_string()),
        ("closed_loop_spectral_radius".to_string(), design.closed_loop_spectral_radius(pred).to_string()),
        ("open_loop_spectral_radius".to_string(), spectral_radius(&pred.a).to_string()),
        ("gain".to_string(), k.join(",")),
    ]
}

/// Plant, signals and metric windows for one scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub setup: LoopSetup,
    pub windows: MetricWindows,
    pub pulses: Vec<Pulse>,
}

fn steps_for(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize + 1
}

pub fn build_scenario(cfg: &RunConfig) -> Result<Scenario> {
    let s = &cfg.scenario;
    let p = &cfg.plant;
    let auto = |d: f64| if s.duration > 0.0 { s.duration } else { d };
    let warmup = cfg.scenario_spec().delays as f64 * p.dt;
    let mut setup = LoopSetup::new(p.clone(), TowerState::rest(p.n_links), 0);
    setup.noise = MeasurementNoise::new(cfg.noise.phi_deg.to_radians(), cfg.noise.phi_dot_deg.to_radians(), cfg.seed ^ NOISE_STREAM);
    setup.input_disturbance = s.input_disturbance;
    let mut pulses = Vec::new();
    let (duration, windows) = match s.kind {
        ScenarioKind::InitialTilt => {
            setup.initial = TowerState::tilted(p.n_links, s.tilt_deg.to_radians());
            (auto(12.0), MetricWindows::regulation(0.0, warmup))
        }
        ScenarioKind::ExciteThenDamp => {
            setup.open_loop = Signal::Sine { amplitude: s.excite_amplitude, frequency: s.excite_frequency };
            setup.open_loop_until = s.excite_duration;
            (auto(s.excite_duration + 10.0), MetricWindows::regulation(s.excite_duration, s.excite_duration))
        }
        ScenarioKind::PulseDisturbance => {
            let times = if s.pulse_times.is_empty() {
                signals::random_pulse_times(s.pulse_count, s.pulse_duration, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ PULSE_STREAM))
            } else {
                s.pulse_times.clone()
            };
            pulses = times.iter().map(|&start| Pulse { start, duration: s.pulse_duration, amplitude: s.pulse_amplitude }).collect();
            let last_end = pulses.iter().map(Pulse::end).fold(0.0, f64::max);
            setup.disturbance = Signal::Pulses(pulses.clone());
            (auto(last_end + 12.0), MetricWindows::regulation(last_end, warmup))
        }
        ScenarioKind::StepTracking => {
            let levels: Vec<f64> = s.step_levels_deg.iter().map(|v| v.to_radians()).collect();
            setup.reference = signals::step_sequence(&levels, s.step_dwell, TRACKING_LEAD_IN);
            let n = levels.len() as f64;
            let windows = (0..levels.len())
                .map(|i| {
                    let start = TRACKING_LEAD_IN + i as f64 * s.step_dwell;
                    (start + s.transient, start + s.step_dwell)
                })
                .collect();
            let last_change = TRACKING_LEAD_IN + (n - 1.0) * s.step_dwell;
            (auto(TRACKING_LEAD_IN + n * s.step_dwell), MetricWindows { settle_from: last_change, rms_windows: windows })
        }
        ScenarioKind::RampTracking => {
            let levels: Vec<f64> = s.ramp_levels_deg.iter().map(|v| v.to_radians()).collect();
            let reference = signals::ramp_profile(&levels, s.ramp_time, s.ramp_hold, TRACKING_LEAD_IN);
            let end = match &reference {
                Signal::Knots(k) => k.last().map_or(TRACKING_LEAD_IN, |kn| kn.0),
                _ => unreachable!(),
            };
            setup.reference = reference;
            (auto(end + 2.0), MetricWindows { settle_from: end, rms_windows: vec![(TRACKING_LEAD_IN + s.transient, f64::INFINITY)] })
        }
        ScenarioKind::Collect => {
            return Err(Error::Config("scenario kind `collect` is handled by the collect command".into()));
        }
    };
    setup.steps = steps_for(duration, p.dt);
    Ok(Scenario { kind: s.kind, setup, windows, pulses })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub scenario: ScenarioKind,
    pub controller: ControllerKind,
    pub dt: f64,
    pub windows: MetricWindows,
    pub pulses: Vec<Pulse>,
    pub trace: LoopTrace,
    pub metrics: Metrics,
}

impl ExperimentResult {
    pub fn stem(&self) -> String {
        format!("{}_{}", self.scenario.as_str(), self.controller.as_str())
    }

    pub fn summary(&self) -> Vec<(String, String)> {
        let rows = &self.trace.rows;
        let count = |status: &str| rows.iter().filter(|r| r.status == status).count();
        let mut out = vec![
            ("scenario".to_string(), self.scenario.as_str().to_string()),
            ("controller".to_string(), self.controller.as_str().to_string()),
            ("dt".to_string(), self.dt.to_string()),
            ("samples".to_string(), rows.len().to_string()),
            ("settle_from".to_string(), self.windows.settle_from.to_string()),
            ("rms_windows".to_string(), self.windows.rms_windows_text()),
            ("pulse_times".to_string(), self.pulses.iter().map(|p| p.start.to_string()).collect::<Vec<_>>().join(",")),
        ];
        out.extend(self.metrics.entries());
        out.push(("max_abs_u_solved".to_string(), self.trace.max_solved_command().to_string()));
        out.push(("steps_solved".to_string(), count("solved").to_string()));
        out.push(("steps_max_iter".to_string(), count("max_iter").to_string()));
        out
    }

    /// Writes `<scenario>_<controller>.csv` and `<scenario>_<controller>_metrics.txt`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = dir.join(format!("{}.csv", self.stem()));
        let metrics = dir.join(format!("{}_metrics.txt", self.stem()));
        format::write_text(&csv, &format::experiment_csv(&self.trace.rows))?;
        format::write_text(&metrics, &format::key_value_text(&self.summary()))?;
        Ok((csv, metrics))
    }
}

pub fn run_with(scenario: &Scenario, controller: &mut dyn Controller, kind: ControllerKind) -> Result<ExperimentResult> {
    let trace = run_loop(scenario.setup.clone(), controller)?;
    let dt = scenario.setup.params.dt;
    let metrics = compute_metrics(&trace.rows, dt, &scenario.windows);
    Ok(ExperimentResult {
        scenario: scenario.kind,
        controller: kind,
        dt,
        windows: scenario.windows.clone(),
        pulses: scenario.pulses.clone(),
        trace,
        metrics,
    })
}

fn check_predictor(cfg: &RunConfig, pred: &LiftedPredictor) -> Result<()> {
    let spec = cfg.scenario_spec();
    if pred.spec != spec {
        return Err(Error::Dimension(format!("predictor uses {} delays, config expects {}", pred.spec.delays, spec.delays)));
    }
    if (pred.dt - cfg.plant.dt).abs() > 1e-12 * cfg.plant.dt {
        return Err(Error::Dimension(format!("predictor dt {} differs from plant dt {}", pred.dt, cfg.plant.dt)));
    }
    Ok(())
}

/// Builds the configured controller. LQR uses the file's gain when present
/// and designs one from `[lqr]` otherwise.
pub fn make_controller(cfg: &RunConfig, scenario: &Scenario, model: Option<&PredictorFile>) -> Result<Box<dyn Controller>> {
    let limit = cfg.plant.torque_limit;
    match cfg.scenario.controller {
        ControllerKind::None => Ok(Box::new(Passive)),
        kind => {
            let file = model.ok_or_else(|| Error::Config(format!("controller `{}` needs a predictor", kind.as_str())))?;
            let pred = &file.predictor;
            check_predictor(cfg, pred)?;
            if kind == ControllerKind::Lqr {
                let k = match &file.gain {
                    Some(k) => k.clone(),
                    None => design_lqr(cfg, pred)?.k,
                };
                Ok(Box::new(LqrLoop::new(k, pred.spec, limit)?))
            } else {
                Ok(Box::new(KmpcLoop::new(pred.clone(), &cfg.kmpc_config(), scenario.setup.reference.clone())?))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub controlled: ExperimentResult,
    pub uncontrolled: Option<ExperimentResult>,
}

impl ScenarioOutcome {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for r in std::iter::once(&self.controlled).chain(&self.uncontrolled) {
            let (a, b) = r.write(dir)?;
            paths.push(a);
            paths.push(b);
        }
        Ok(paths)
    }
}

pub fn run_scenario(cfg: &RunConfig, model: Option<&PredictorFile>) -> Result<ScenarioOutcome> {
    let scenario = build_scenario(cfg)?;
    let mut controller = make_controller(cfg, &scenario, model)?;
    let controlled = run_with(&scenario, controller.as_mut(), cfg.scenario.controller)?;
    let uncontrolled = if cfg.scenario.compare_uncontrolled && cfg.scenario.controller != ControllerKind::None {
        Some(run_with(&scenario, &mut Passive, ControllerKind::None)?)
    } else {
        None
    };
    Ok(ScenarioOutcome { controlled, uncontrolled })
}

/// Predictor file a controlled run reads by default.
pub fn scenario_model_path(cfg: &RunConfig) -> PathBuf {
    if !cfg.scenario.predictor.is_empty() {
        return PathBuf::from(&cfg.scenario.predictor);
    }
    let d = cfg.scenario_spec().delays;
    match cfg.scenario.controller {
        ControllerKind::Lqr => cfg.out_dir().join(lqr_file_name(d)),
        _ => cfg.out_dir().join(predictor_file_name(d)),
    }
}

pub fn load_scenario_model(cfg: &RunConfig) -> Result<Option<PredictorFile>> {
    if cfg.scenario.controller == ControllerKind::None {
        return Ok(None);
    }
    let path = scenario_model_path(cfg);
    if !path.exists() {
        let stage = if cfg.scenario.controller == ControllerKind::Lqr && cfg.scenario.predictor.is_empty() { "design-lqr" } else { "identify" };
        return Err(Error::Config(format!("predictor file {} does not exist; run {stage} first", path.display())));
    }
    PredictorFile::read(&path).map(Some)
}

/// Paths written by a full pipeline run.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub trajectories: Vec<PathBuf>,
    pub predictors: Vec<PathBuf>,
    pub experiments: Vec<PathBuf>,
}

/// Collect, identify every configured lifting, design the LQR and run the
/// configured scenario, all under `cfg.out`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    let dir = cfg.out_dir();
    let mut out = PipelineOutput::default();
    let data = collect(cfg)?;
    out.trajectories = write_collected(cfg, &data, &dir)?;
    for d in cfg.identified_delays() {
        let id = identify(cfg, &data, LiftingSpec::new(d))?;
        let path = dir.join(predictor_file_name(d));
        PredictorFile::new(id.predictor.clone()).write(&path)?;
        format::write_text(&dir.join(format!("identify_s{d}.txt")), &format::key_value_text(&id.report()))?;
        out.predictors.push(path);
        if d == cfg.lifting.stabilization_delays {
            let design = design_lqr(cfg, &id.predictor)?;
            let file = PredictorFile { predictor: id.predictor.clone(), gain: Some(design.k.clone()), riccati: Some(design.p.clone()) };
            let path = dir.join(lqr_file_name(d));
            file.write(&path)?;
            format::write_text(&dir.join(format!("lqr_s{d}_report.txt")), &format::key_value_text(&lqr_report(&design, &id.predictor)))?;
            out.predictors.push(path);
        }
    }
    if cfg.scenario.kind != ScenarioKind::Collect {
        let model = load_scenario_model(cfg)?;
        out.experiments = run_scenario(cfg, model.as_ref())?.write(&dir)?;
    }
    Ok(out)
}
