//! Time signals for excitation, disturbances and references.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Absorbs rounding when a sample time lands on a switching instant.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub start: f64,
    pub duration: f64,
    pub amplitude: f64,
}

impl Pulse {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Signal {
    Zero,
    Constant(f64),
    Sine { amplitude: f64, frequency: f64 },
    Pulses(Vec<Pulse>),
    /// Piecewise constant: `levels[i]` holds from `times[i]` until `times[i + 1]`.
    Steps { times: Vec<f64>, levels: Vec<f64> },
    /// Linear interpolation through `(t, value)` knots, held outside their span.
    Knots(Vec<(f64, f64)>),
}

impl Signal {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Signal::Zero => 0.0,
            Signal::Constant(v) => *v,
            Signal::Sine { amplitude, frequency } => amplitude * (2.0 * PI * frequency * t).sin(),
            Signal::Pulses(pulses) => pulses
                .iter()
                .filter(|p| t + TIME_EPS >= p.start && t + TIME_EPS < p.end())
                .map(|p| p.amplitude)
                .sum(),
            Signal::Steps { times, levels } => {
                let idx = times.iter().rposition(|&s| t + TIME_EPS >= s);
                idx.map_or(0.0, |i| levels[i])
            }
            Signal::Knots(knots) => {
                let Some(&(t0, v0)) = knots.first() else { return 0.0 };
                if t <= t0 {
                    return v0;
                }
                for w in knots.windows(2) {
                    let ((ta, va), (tb, vb)) = (w[0], w[1]);
                    if t <= tb {
                        return if tb > ta { va + (vb - va) * (t - ta) / (tb - ta) } else { vb };
                    }
                }
                knots[knots.len() - 1].1
            }
        }
    }

    pub fn sample(&self, len: usize, dt: f64) -> Vec<f64> {
        (0..len).map(|k| self.value(k as f64 * dt)).collect()
    }
}

/// Step sequence holding each level for `dwell` seconds, starting at `t0`.
pub fn step_sequence(levels: &[f64], dwell: f64, t0: f64) -> Signal {
    let mut times = Vec::with_capacity(levels.len() + 1);
    let mut values = Vec::with_capacity(levels.len() + 1);
    if t0 > 0.0 {
        times.push(0.0);
        values.push(0.0);
    }
    for (i, &level) in levels.iter().enumerate() {
        times.push(t0 + i as f64 * dwell);
        values.push(level);
    }
    Signal::Steps { times, levels: values }
}

/// Ramps from 0 through each level, moving for `ramp` seconds and holding for `hold`.
pub fn ramp_profile(levels: &[f64], ramp: f64, hold: f64, t0: f64) -> Signal {
    let mut knots = vec![(0.0, 0.0), (t0, 0.0)];
    let mut t = t0;
    let mut last = 0.0;
    for &level in levels {
        if level != last {
            t += ramp;
        }
        knots.push((t, level));
        t += hold;
        knots.push((t, level));
        last = level;
    }
    Signal::Knots(knots)
}

/// Linear chirp from `f0` to `f1` Hz over `duration` seconds.
pub fn chirp(len: usize, dt: f64, amplitude: f64, f0: f64, f1: f64) -> Vec<f64> {
    let duration = (len.max(2) - 1) as f64 * dt;
    let rate = (f1 - f0) / duration;
    (0..len)
        .map(|k| {
            let t = k as f64 * dt;
            amplitude * (2.0 * PI * (f0 * t + 0.5 * rate * t * t)).sin()
        })
        .collect()
}

/// Piecewise-constant random levels drawn uniformly from `[-amplitude, amplitude]`.
pub fn random_steps(len: usize, hold: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut level = 0.0;
    (0..len)
        .map(|k| {
            if k % hold.max(1) == 0 {
                level = rng.gen_range(-1.0..=1.0) * amplitude;
            }
            level
        })
        .collect()
}

/// First-order low-pass filtered uniform noise, clipped to `limit`.
pub fn filtered_noise(len: usize, pole: f64, gain: f64, limit: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = 0.0;
    (0..len)
        .map(|_| {
            v = pole * v + gain * rng.gen_range(-1.0..=1.0);
            v.clamp(-limit, limit)
        })
        .collect()
}

/// Alternating-sign pulses: on for `on` samples out of every `period`.
pub fn pulse_train(len: usize, on: usize, period: usize, amplitude: f64) -> Vec<f64> {
    (0..len)
        .map(|k| {
            let cycle = k / period;
            if k % period < on {
                if cycle.is_multiple_of(2) {
                    amplitude
                } else {
                    -amplitude
                }
            } else {
                0.0
            }
        })
        .collect()
}

/// Sum of sines with random phases.
pub fn multisine(len: usize, dt: f64, amplitude: f64, frequencies: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let phases: Vec<f64> = frequencies.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    (0..len)
        .map(|k| {
            let t = k as f64 * dt;
            frequencies.iter().zip(&phases).map(|(f, p)| amplitude * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect()
}

/// Pulse start times: the first in `[1, 3]` s, then gaps of `[1.5, 3.5]` s after each pulse ends.
pub fn random_pulse_times(count: usize, duration: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut t = rng.gen_range(1.0..=3.0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(round_to_ms(t));
        t += duration + rng.gen_range(1.5..=3.5);
    }
    out
}

fn round_to_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn pulses_cover_their_window() {
        let s = Signal::Pulses(vec![Pulse { start: 1.0, duration: 0.5, amplitude: 2.0 }]);
        let v = s.sample(200, 0.01);
        assert_eq!(v.iter().filter(|&&x| x == 2.0).count(), 50);
        assert_eq!(v[100], 2.0);
        assert_eq!(v[150], 0.0);
    }

    #[test]
    fn steps_switch_on_schedule() {
        let s = step_sequence(&[1.0, -1.0], 2.0, 1.0);
        assert_eq!(s.value(0.5), 0.0);
        assert_eq!(s.value(1.0), 1.0);
        assert_eq!(s.value(2.99), 1.0);
        assert_eq!(s.value(3.0), -1.0);
        assert_eq!(s.value(100.0), -1.0);
    }

    #[test]
    fn ramp_interpolates_and_holds() {
        let s = ramp_profile(&[2.0, 0.0], 2.0, 1.0, 1.0);
        assert_eq!(s.value(0.5), 0.0);
        assert!((s.value(2.0) - 1.0).abs() < 1e-12);
        assert_eq!(s.value(3.5), 2.0);
        assert!((s.value(5.0) - 1.0).abs() < 1e-12);
        assert_eq!(s.value(50.0), 0.0);
    }

    #[test]
    fn chirp_starts_at_zero_and_is_bounded() {
        let c = chirp(1000, 0.01, 0.4, 0.2, 6.0);
        assert_eq!(c[0], 0.0);
        assert!(c.iter().all(|v| v.abs() <= 0.4));
    }

    #[test]
    fn pulse_train_alternates() {
        let p = pulse_train(12, 2, 3, 1.0);
        assert_eq!(p, vec![1.0, 1.0, 0.0, -1.0, -1.0, 0.0, 1.0, 1.0, 0.0, -1.0, -1.0, 0.0]);
    }

    #[test]
    fn random_signals_are_seeded() {
        let a = random_steps(100, 10, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = random_steps(100, 10, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        let n = filtered_noise(500, 0.9, 0.4, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(n.iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn pulse_times_are_separated() {
        let times = random_pulse_times(2, 0.5, &mut ChaCha8Rng::seed_from_u64(9));
        assert!((1.0..=3.0).contains(&times[0]));
        assert!(times[1] - times[0] >= 2.0 - 1e-9);
    }
}
