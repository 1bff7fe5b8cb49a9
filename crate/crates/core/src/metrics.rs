//! Onset F1 and latency statistics.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::event::Timestamp;

/// Default onset matching tolerance.
pub const DEFAULT_TOLERANCE_MS: f64 = 50.0;

/// A note onset: time and pitch.
pub type Onset = (Timestamp, u8);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matches: usize,
    pub reference: usize,
    pub transcribed: usize,
}

impl F1Report {
    fn from_counts(matches: usize, reference: usize, transcribed: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(matches, transcribed);
        let recall = ratio(matches, reference);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        F1Report { precision, recall, f1, matches, reference, transcribed }
    }
}

/// Greedy time-ordered onset matching.
///
/// Onsets of each pitch are swept in time order. An onset matches the oldest
/// still-pending onset from the other list that lies within `tol_ms`;
/// otherwise it waits for a later partner. Input order does not matter.
pub fn onset_f1(reference: &[Onset], transcribed: &[Onset], tol_ms: f64) -> F1Report {
    let tol = crate::event::ms_to_us(tol_ms);
    // per pitch: (time, side) with side 0 = reference, 1 = transcribed
    let mut by_pitch: BTreeMap<u8, Vec<(u64, u8)>> = BTreeMap::new();
    for &(t, p) in reference {
        by_pitch.entry(p).or_default().push((t.0, 0));
    }
    for &(t, p) in transcribed {
        by_pitch.entry(p).or_default().push((t.0, 1));
    }
    let mut matches = 0;
    for points in by_pitch.values_mut() {
        points.sort_unstable();
        let mut pending: [VecDeque<u64>; 2] = [VecDeque::new(), VecDeque::new()];
        for &(t, side) in points.iter() {
            let other = &mut pending[1 - side as usize];
            while other.front().is_some_and(|&u| t - u > tol) {
                other.pop_front();
            }
            if other.pop_front().is_some() {
                matches += 1;
            } else {
                pending[side as usize].push_back(t);
            }
        }
    }
    F1Report::from_counts(matches, reference.len(), transcribed.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

/// Summary of signed latencies in µs. Percentiles use the nearest-rank rule.
pub fn latency_stats(samples_us: &[i64]) -> Option<LatencyStats> {
    if samples_us.is_empty() {
        return None;
    }
    let mut s = samples_us.to_vec();
    s.sort_unstable();
    let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1] as f64 / 1000.0;
    Some(LatencyStats {
        count: s.len(),
        mean_ms: s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64 / 1000.0,
        median_ms: rank(0.5),
        p95_ms: rank(0.95),
        max_ms: *s.last().unwrap() as f64 / 1000.0,
    })
}

/// Pairs each output onset with the latest input onset of the same pitch at
/// or before it and returns the differences in µs.
pub fn attributed_latencies(inputs: &[Onset], outputs: &[Onset]) -> Vec<i64> {
    let mut by_pitch: BTreeMap<u8, Vec<u64>> = BTreeMap::new();
    for &(t, p) in inputs {
        by_pitch.entry(p).or_default().push(t.0);
    }
    for v in by_pitch.values_mut() {
        v.sort_unstable();
    }
    outputs
        .iter()
        .filter_map(|&(t, p)| {
            let ins = by_pitch.get(&p)?;
            let i = ins.partition_point(|&u| u <= t.0);
            (i > 0).then(|| t.0 as i64 - ins[i - 1] as i64)
        })
        .collect()
}
