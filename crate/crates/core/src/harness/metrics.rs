//! Scalar summaries of a closed-loop run.

use crate::format::ExperimentRow;

pub const SETTLING_BAND: f64 = 0.02;

/// Which part of a run each metric looks at.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricWindows {
    /// End of the last excitation or disturbance; settling is measured from here.
    pub settle_from: f64,
    /// Half-open `[start, end)` intervals over which the tracking error is averaged.
    pub rms_windows: Vec<(f64, f64)>,
}

impl MetricWindows {
    pub fn regulation(settle_from: f64, rms_from: f64) -> Self {
        Self { settle_from, rms_windows: vec![(rms_from, f64::INFINITY)] }
    }

    fn in_rms_window(&self, t: f64) -> bool {
        self.rms_windows.iter().any(|&(a, b)| t + 1e-9 >= a && t + 1e-9 < b)
    }

    pub fn rms_windows_text(&self) -> String {
        self.rms_windows.iter().map(|(a, b)| format!("{a}:{b}")).collect::<Vec<_>>().join(";")
    }

    pub fn parse_rms_windows(text: &str) -> Option<Vec<(f64, f64)>> {
        if text.is_empty() {
            return Some(Vec::new());
        }
        text.split(';')
            .map(|w| {
                let (a, b) = w.split_once(':')?;
                Some((a.parse().ok()?, b.parse().ok()?))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Seconds after `settle_from`; `+inf` when the run never settles.
    pub settling_time: f64,
    pub peak_abs_phi: f64,
    pub rms_tracking_error: f64,
    /// Integral of `u^2` over the run, N²·m²·s.
    pub control_effort: f64,
    pub max_abs_u: f64,
}

impl Metrics {
    pub fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("settling_time".into(), self.settling_time.to_string()),
            ("peak_abs_phi".into(), self.peak_abs_phi.to_string()),
            ("peak_abs_phi_deg".into(), self.peak_abs_phi.to_degrees().to_string()),
            ("rms_tracking_error".into(), self.rms_tracking_error.to_string()),
            ("control_effort".into(), self.control_effort.to_string()),
            ("max_abs_u".into(), self.max_abs_u.to_string()),
        ]
    }
}

/// Settling time of `phi` measured from `from`.
///
/// The band is `SETTLING_BAND` times the largest `|phi|` over the whole series.
pub fn settling_time(t: &[f64], phi: &[f64], from: f64) -> f64 {
    let peak = phi.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    let band = SETTLING_BAND * peak;
    let start = t.iter().position(|&s| s + 1e-9 >= from).unwrap_or(t.len());
    match (start..t.len()).rev().find(|&k| phi[k].abs() > band) {
        None => 0.0,
        Some(k) if k + 1 == t.len() => f64::INFINITY,
        Some(k) => t[k + 1] - from,
    }
}

pub fn compute_metrics(rows: &[ExperimentRow], dt: f64, windows: &MetricWindows) -> Metrics {
    let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let phi: Vec<f64> = rows.iter().map(|r| r.phi).collect();
    let (sq, count) = rows
        .iter()
        .filter(|r| windows.in_rms_window(r.t))
        .fold((0.0, 0usize), |(s, n), r| (s + (r.phi - r.r_phi).powi(2), n + 1));
    Metrics {
        settling_time: settling_time(&t, &phi, windows.settle_from),
        peak_abs_phi: phi.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
        rms_tracking_error: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
        control_effort: rows.iter().map(|r| r.u * r.u).sum::<f64>() * dt,
        max_abs_u: rows.iter().fold(0.0_f64, |m, r| m.max(r.u.abs())),
    }
}
