mod common;

use std::sync::OnceLock;

use common::*;
use koopman_tower::format::parse_key_value;
use koopman_tower::harness::{ControllerKind, ScenarioKind};
use koopman_tower::plant::PlantParams;
use koopman_tower::{LiftingSpec, RunConfig};
use nalgebra::DMatrix;

fn models() -> &'static TowerModels {
    static MODELS: OnceLock<TowerModels> = OnceLock::new();
    MODELS.get_or_init(|| TowerModels::identify(&RunConfig::default()))
}

struct Column {
    t: Vec<f64>,
    phi: Vec<f64>,
    r: Vec<f64>,
    u: Vec<f64>,
}

fn columns(csv: &str) -> Column {
    let mut c = Column { t: vec![], phi: vec![], r: vec![], u: vec![] };
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        c.t.push(f[0].parse().unwrap());
        c.phi.push(f[1].parse().unwrap());
        c.r.push(f[3].parse().unwrap());
        c.u.push(f[4].parse().unwrap());
    }
    c
}

/// Earliest sample at or after `from` from which `|phi|` stays inside the band.
fn forward_settling(t: &[f64], phi: &[f64], from: f64) -> f64 {
    let band = 0.02 * phi.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut candidate = None;
    for k in 0..t.len() {
        if t[k] + 1e-9 < from {
            continue;
        }
        if phi[k].abs() > band {
            candidate = None;
        } else if candidate.is_none() {
            candidate = Some(t[k]);
        }
    }
    candidate.map_or(f64::INFINITY, |t0| t0 - from)
}

#[test]
fn written_metrics_match_recomputation_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, controller) in [
        (ScenarioKind::InitialTilt, ControllerKind::Lqr),
        (ScenarioKind::PulseDisturbance, ControllerKind::Lqr),
        (ScenarioKind::StepTracking, ControllerKind::Kmpc),
    ] {
        let cfg = scenario_config(kind, controller);
        let outcome = models().run(&cfg);
        outcome.write(dir.path()).unwrap();
        let stem = outcome.controlled.stem();
        let csv = std::fs::read_to_string(dir.path().join(format!("{stem}.csv"))).unwrap();
        let text = std::fs::read_to_string(dir.path().join(format!("{stem}_metrics.txt"))).unwrap();
        let kv: std::collections::HashMap<String, String> = parse_key_value(&text).into_iter().collect();
        let get = |k: &str| kv[k].parse::<f64>().unwrap();
        let c = columns(&csv);
        let dt = get("dt");

        let from = get("settle_from");
        let expected = forward_settling(&c.t, &c.phi, from);
        if expected.is_finite() {
            assert!((get("settling_time") - expected).abs() < 1e-9, "{stem}: {} vs {expected}", get("settling_time"));
        }
        let peak = c.phi.iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert_eq!(get("peak_abs_phi"), peak);
        let effort: f64 = c.u.iter().map(|u| u * u * dt).sum();
        assert!((get("control_effort") - effort).abs() < 1e-9 * (1.0 + effort));

        let windows: Vec<(f64, f64)> = kv["rms_windows"]
            .split(';')
            .map(|w| {
                let (a, b) = w.split_once(':').unwrap();
                (a.parse().unwrap(), b.parse().unwrap())
            })
            .collect();
        let errs: Vec<f64> = (0..c.t.len())
            .filter(|&k| windows.iter().any(|&(a, b)| c.t[k] >= a - 1e-9 && c.t[k] < b - 1e-9))
            .map(|k| c.phi[k] - c.r[k])
            .collect();
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        assert!((get("rms_tracking_error") - rms).abs() < 1e-12, "{stem}");
    }
}

#[test]
fn opposite_tilts_give_mirrored_trajectories() {
    let mut runs = Vec::new();
    for tilt in [20.0, -20.0] {
        let mut cfg = scenario_config(ScenarioKind::InitialTilt, ControllerKind::Lqr);
        cfg.scenario.tilt_deg = tilt;
        cfg.scenario.compare_uncontrolled = false;
        runs.push(models().run(&cfg).controlled.trace);
    }
    for (a, b) in runs[0].rows.iter().zip(&runs[1].rows) {
        assert!((a.phi + b.phi).abs() < 1e-9);
        assert!((a.phi_dot + b.phi_dot).abs() < 1e-9);
        assert!((a.u + b.u).abs() < 1e-9);
    }
}

#[test]
fn lqr_stabilizes_the_linearized_plant() {
    let file = &models().lqr;
    let k = file.gain.as_ref().unwrap();
    let rho = true_closed_loop_radius(&PlantParams::default(), k, file.predictor.spec);
    assert!(rho < 1.0, "true closed-loop spectral radius {rho}");
}

#[test]
fn zero_gain_leaves_plant_modes_unchanged() {
    let params = PlantParams::default();
    let spec = LiftingSpec::new(2);
    let (a, _) = linearized_plant(&params);
    let open = spectral_radius(&a);
    let rho = true_closed_loop_radius(&params, &DMatrix::zeros(1, spec.lifted_dim()), spec);
    assert!((rho - open).abs() < 1e-9);
    assert!(open < 1.0);
}

#[test]
fn kmpc_offset_free_under_input_disturbance() {
    for (reference, disturbance) in [(3.0, 0.05), (-2.0, -0.05), (0.0, 0.05)] {
        let cfg = offset_config(reference, disturbance);
        let run = models().run(&cfg).controlled;
        let err = max_tracking_error(&run.trace, 10.0, 11.0);
        assert!(err < 0.01, "r = {reference} deg, d = {disturbance}: {err}");
        assert!(run.trace.max_solved_command() <= 0.5 + 1e-5);
    }
}

#[test]
fn kmpc_regulation_beats_passive_settling() {
    let mut cfg = scenario_config(ScenarioKind::InitialTilt, ControllerKind::Kmpc);
    cfg.scenario.compare_uncontrolled = true;
    let run = models().run(&cfg);
    let open = run.uncontrolled.unwrap().metrics.settling_time;
    assert!(run.controlled.metrics.settling_time < 0.5 * open);
}

#[test]
fn heavy_rate_weight_destabilizes_linearized_plant() {
    use koopman_tower::lqr::output_state_penalty;
    use koopman_tower::LqrDesign;

    let pred = &models().regulation.predictor;
    let spec = pred.spec;
    let design = LqrDesign::new(pred, output_state_penalty(spec, 10.0, 1.0), DMatrix::from_element(1, 1, 0.1)).unwrap();
    assert!(design.closed_loop_spectral_radius(pred) < 1.0);
    assert!(true_closed_loop_radius(&PlantParams::default(), &design.k, spec) > 1.0);
}

#[test]
fn lqr_damps_faster_than_free_decay_after_excitation() {
    let cfg = scenario_config(ScenarioKind::ExciteThenDamp, ControllerKind::Lqr);
    let run = models().run(&cfg);
    let open = run.uncontrolled.unwrap();
    let switch = cfg.scenario.excite_duration;
    let envelope = |trace: &koopman_tower::harness::LoopTrace, from: f64, to: f64| {
        trace.rows.iter().filter(|r| r.t >= from && r.t < to).map(|r| r.phi.abs()).fold(0.0, f64::max)
    };
    for second in 1..4 {
        let a = switch + second as f64;
        let controlled = envelope(&run.controlled.trace, a, a + 1.0);
        let free = envelope(&open.trace, a, a + 1.0);
        assert!(controlled < 0.5 * free, "{a} s: {controlled} vs {free}");
    }
    assert!(run.controlled.metrics.settling_time < open.metrics.settling_time);
}
