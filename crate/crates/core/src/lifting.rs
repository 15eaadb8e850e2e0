//! Delay-embedding observables.
//!
//! The base observable is `psi_k = (phi_k, phi_dot_k, u_{k-1})`. A lifting with
//! `delays = s` stacks `s + 1` consecutive copies oldest first:
//! `z_k = [psi_{k-s}, ..., psi_{k-1}, psi_k]`.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::Measurement;

/// Number of entries in one observable block: phi, phi_dot and the previous input.
pub const BASE_DIM: usize = 3;
/// Raw measured outputs per sample.
pub const OUTPUT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiftingSpec {
    pub delays: usize,
}

impl LiftingSpec {
    pub fn new(delays: usize) -> Self {
        Self { delays }
    }

    pub fn base_dim(&self) -> usize {
        BASE_DIM
    }

    /// Lifted dimension `N = base_dim * (delays + 1)`.
    pub fn lifted_dim(&self) -> usize {
        BASE_DIM * (self.delays + 1)
    }

    pub fn window(&self) -> usize {
        self.delays + 1
    }

    /// Offset of the newest block within a lifted vector.
    pub fn newest_offset(&self) -> usize {
        BASE_DIM * self.delays
    }
}

/// Rolling window holding the last `delays + 1` observable blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    entries: VecDeque<[f64; BASE_DIM]>,
    capacity: usize,
}

impl HistoryBuffer {
    pub fn new(spec: LiftingSpec) -> Self {
        Self::with_capacity(spec.window())
    }

    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0, "history buffer needs room for at least one entry");
        Self { entries: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn filled(&self) -> usize {
        self.entries.len()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    /// Entries oldest to newest.
    pub fn entries(&self) -> impl Iterator<Item = &[f64; BASE_DIM]> {
        self.entries.iter()
    }

    pub fn push(&mut self, m: Measurement, u_prev: f64) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back([m.phi, m.phi_dot, u_prev]);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn lift(&self, spec: LiftingSpec) -> Result<DVector<f64>> {
        let needed = spec.window();
        if self.entries.len() < needed || self.capacity < needed {
            return Err(Error::NotReady { filled: self.entries.len(), needed });
        }
        let skip = self.entries.len() - needed;
        Ok(DVector::from_iterator(
            spec.lifted_dim(),
            self.entries.iter().skip(skip).flat_map(|b| b.iter().copied()),
        ))
    }
}

/// One snapshot column: lifted state, its successor, the applied input and the
/// raw outputs at both instants.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotPair {
    pub z: DVector<f64>,
    pub z_next: DVector<f64>,
    pub u: f64,
    pub y: Measurement,
    pub y_next: Measurement,
}

/// Builds the snapshot pairs of one trajectory of `(y_k, u_k)` records.
///
/// The input preceding the first record is taken to be zero. A trajectory of
/// length `L` yields `L - delays - 1` pairs; shorter trajectories yield none.
pub fn lift_dataset(records: &[(Measurement, f64)], spec: LiftingSpec) -> Vec<SnapshotPair> {
    let s = spec.delays;
    if records.len() < s + 2 {
        log::warn!(
            "trajectory of {} samples is too short for {} delays; no snapshot pairs",
            records.len(),
            s
        );
        return Vec::new();
    }
    let psi = |k: usize| -> [f64; BASE_DIM] {
        let (m, _) = records[k];
        let u_prev = if k == 0 { 0.0 } else { records[k - 1].1 };
        [m.phi, m.phi_dot, u_prev]
    };
    let lifted = |k: usize| {
        DVector::from_iterator(spec.lifted_dim(), (k - s..=k).flat_map(|j| psi(j).into_iter()))
    };
    (s..records.len() - 1)
        .map(|k| SnapshotPair {
            z: lifted(k),
            z_next: lifted(k + 1),
            u: records[k].1,
            y: records[k].0,
            y_next: records[k + 1].0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meas(phi: f64, phi_dot: f64) -> Measurement {
        Measurement { phi, phi_dot }
    }

    #[test]
    fn lifted_dims() {
        assert_eq!(LiftingSpec::new(2).lifted_dim(), 9);
        assert_eq!(LiftingSpec::new(3).lifted_dim(), 12);
        assert_eq!(LiftingSpec::new(0).lifted_dim(), 3);
    }

    #[test]
    fn push_counts_and_evicts_fifo() {
        let mut buf = HistoryBuffer::with_capacity(3);
        buf.push(meas(1.0, 0.0), 0.0);
        assert_eq!(buf.filled(), 1);
        for i in 2..=4 {
            buf.push(meas(i as f64, 0.0), 0.0);
        }
        assert_eq!(buf.filled(), 3);
        let phis: Vec<f64> = buf.entries().map(|e| e[0]).collect();
        assert_eq!(phis, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn lift_requires_full_buffer() {
        let spec = LiftingSpec::new(2);
        let mut buf = HistoryBuffer::new(spec);
        buf.push(meas(0.1, 0.2), 0.0);
        assert!(matches!(buf.lift(spec), Err(Error::NotReady { filled: 1, needed: 3 })));
        let before = buf.clone();
        assert_eq!(before, buf);
    }

    #[test]
    fn constant_history_repeats_block() {
        let spec = LiftingSpec::new(1);
        let mut buf = HistoryBuffer::new(spec);
        buf.push(meas(1.0, 2.0), 3.0);
        buf.push(meas(1.0, 2.0), 3.0);
        let z = buf.lift(spec).unwrap();
        assert_eq!(z.as_slice(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn lift_orders_oldest_first() {
        let spec = LiftingSpec::new(2);
        let mut buf = HistoryBuffer::new(spec);
        buf.push(meas(0.1, 0.0), 0.0);
        buf.push(meas(0.2, 0.0), 0.0);
        buf.push(meas(0.3, 0.5), 0.7);
        let z = buf.lift(spec).unwrap();
        assert_eq!(z.as_slice(), &[0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.3, 0.5, 0.7]);
    }

    #[test]
    fn pair_counts() {
        let spec = LiftingSpec::new(2);
        let traj: Vec<_> = (0..4).map(|k| (meas(k as f64, 0.0), 0.0)).collect();
        assert_eq!(lift_dataset(&traj, spec).len(), 1);
        let traj: Vec<_> = (0..25).map(|k| (meas(k as f64, 0.0), 0.0)).collect();
        assert_eq!(lift_dataset(&traj, spec).len(), 25 - 2 - 1);
        assert!(lift_dataset(&traj[..3], spec).is_empty());
    }

    #[test]
    fn separate_trajectories_never_share_pairs() {
        let spec = LiftingSpec::new(1);
        let a: Vec<_> = (0..10).map(|k| (meas(k as f64, 0.0), 1.0)).collect();
        let b: Vec<_> = (0..7).map(|k| (meas(-(k as f64), 0.0), -1.0)).collect();
        let total = lift_dataset(&a, spec).len() + lift_dataset(&b, spec).len();
        assert_eq!(total, (10 - 2) + (7 - 2));
        assert!(lift_dataset(&b, spec).iter().all(|p| p.z[0] <= 0.0 && p.u == -1.0));
    }

    proptest! {
        #[test]
        fn consecutive_lifts_shift_blocks(
            delays in 0usize..4,
            seq in prop::collection::vec((-1.0f64..1.0, -5.0f64..5.0, -0.5f64..0.5), 6..40),
        ) {
            let spec = LiftingSpec::new(delays);
            let records: Vec<_> = seq.iter().map(|&(p, v, u)| (meas(p, v), u)).collect();
            let pairs = lift_dataset(&records, spec);
            prop_assert_eq!(pairs.len(), records.len().saturating_sub(delays + 1));
            let off = spec.newest_offset();
            for (i, pair) in pairs.iter().enumerate() {
                let k = i + delays;
                // newest block carries the raw output exactly
                prop_assert_eq!(pair.z[off], records[k].0.phi);
                prop_assert_eq!(pair.z[off + 1], records[k].0.phi_dot);
                // and becomes the second-newest block one sample later
                if delays > 0 {
                    for c in 0..BASE_DIM {
                        prop_assert_eq!(pair.z[off + c], pair.z_next[off - BASE_DIM + c]);
                    }
                }
                prop_assert_eq!(pair.z_next[off + 2], records[k].1);
            }

            // the rolling buffer reproduces the batch lifting
            let mut buf = HistoryBuffer::new(spec);
            let mut u_prev = 0.0;
            for (k, &(m, u)) in records.iter().enumerate() {
                buf.push(m, u_prev);
                if k >= delays && k + 1 < records.len() {
                    prop_assert_eq!(&buf.lift(spec).unwrap(), &pairs[k - delays].z);
                }
                u_prev = u;
            }
        }
    }
}
