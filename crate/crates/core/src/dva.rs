//! Differential voltage analysis of discharge traces.
//!
//! `dQ/dV` is estimated by adjacent-pair finite differences placed at the
//! interval midpoints. On discharge, capacity accumulates as voltage falls,
//! so raw values are negative; magnitudes are left to the caller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DischargeTrace;

pub const DEFAULT_SMOOTHING: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum DvaError {
    #[error("trace {cell_id}/{cycle_index} collapses to fewer than two distinct voltages")]
    DegenerateTrace { cell_id: String, cycle_index: u32 },
    #[error("smoothing window must be odd and positive, got {0}")]
    Window(usize),
    #[error("no traces given")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvaPoint {
    pub v_mid: f64,
    pub dq_dv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvaCurve {
    pub points: Vec<DvaPoint>,
    pub cell_id: String,
    pub cycle_index: u32,
    pub smoothing_window: usize,
}

impl DvaCurve {
    /// Point with the largest `|dQ/dV|`.
    pub fn peak(&self) -> Option<DvaPoint> {
        self.points
            .iter()
            .copied()
            .max_by(|a, b| a.dq_dv.abs().total_cmp(&b.dq_dv.abs()))
    }
}

/// Merge runs of equal voltage, averaging their capacities.
fn collapse(trace: &DischargeTrace) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::with_capacity(trace.len());
    for s in &trace.samples {
        match out.last_mut() {
            Some((v, q, n)) if *v == s.voltage_v => {
                *q += s.capacity_mah;
                *n += 1;
            }
            _ => out.push((s.voltage_v, s.capacity_mah, 1)),
        }
    }
    out.into_iter().map(|(v, q, n)| (v, q / n as f64)).collect()
}

/// Centered moving average; edges use the truncated window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

pub fn compute_dva(trace: &DischargeTrace, smoothing_window: usize) -> Result<DvaCurve, DvaError> {
    if smoothing_window == 0 || smoothing_window.is_multiple_of(2) {
        return Err(DvaError::Window(smoothing_window));
    }
    let pts = collapse(trace);
    if pts.len() < 2 {
        return Err(DvaError::DegenerateTrace {
            cell_id: trace.cell_id.clone(),
            cycle_index: trace.cycle_index,
        });
    }
    let (v_mid, raw): (Vec<f64>, Vec<f64>) = pts
        .windows(2)
        .map(|w| {
            let (v0, q0) = w[0];
            let (v1, q1) = w[1];
            (0.5 * (v0 + v1), (q1 - q0) / (v1 - v0))
        })
        .unzip();
    let smoothed = if smoothing_window == 1 {
        raw
    } else {
        moving_average(&raw, smoothing_window)
    };
    Ok(DvaCurve {
        points: v_mid
            .into_iter()
            .zip(smoothed)
            .map(|(v_mid, dq_dv)| DvaPoint { v_mid, dq_dv })
            .collect(),
        cell_id: trace.cell_id.clone(),
        cycle_index: trace.cycle_index,
        smoothing_window,
    })
}

/// Charge delivered while the voltage lies in `[v_lo, v_hi]`.
///
/// Pairs partially inside the band contribute in proportion to the
/// overlapping share of their voltage interval. A pair at constant voltage
/// counts when that voltage is in `[v_lo, v_hi)`, so adjacent bands never
/// share it.
pub fn window_capacity(trace: &DischargeTrace, v_lo: f64, v_hi: f64) -> f64 {
    if !(v_lo < v_hi) {
        return 0.0;
    }
    trace
        .samples
        .windows(2)
        .map(|w| {
            let dq = (w[1].capacity_mah - w[0].capacity_mah).abs();
            let lo = w[0].voltage_v.min(w[1].voltage_v);
            let hi = w[0].voltage_v.max(w[1].voltage_v);
            if hi == lo {
                return if lo >= v_lo && lo < v_hi { dq } else { 0.0 };
            }
            let overlap = hi.min(v_hi) - lo.max(v_lo);
            if overlap <= 0.0 {
                0.0
            } else {
                dq * overlap / (hi - lo)
            }
        })
        .sum()
}

/// Window capacity per trace, ordered by cycle index.
pub fn fade_series(traces: &[DischargeTrace], v_lo: f64, v_hi: f64) -> Result<Vec<(u32, f64)>, DvaError> {
    if traces.is_empty() {
        return Err(DvaError::Empty);
    }
    let mut out: Vec<(u32, f64)> = traces
        .iter()
        .map(|t| (t.cycle_index, window_capacity(t, v_lo, v_hi)))
        .collect();
    out.sort_by_key(|&(c, _)| c);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Sample;
    use crate::synth::{generate_trace, DegradationProfile, TraceShape};

    fn trace_of(pts: &[(f64, f64)]) -> DischargeTrace {
        DischargeTrace::new("t", 1, pts.iter().map(|&(v, q)| Sample::new(v, q)).collect())
    }

    #[test]
    fn linear_capacity_gives_constant_slope() {
        let pts: Vec<_> = (0..10)
            .map(|i| {
                let v = 2.9 - 0.1 * i as f64;
                (v, -100.0 * v + 300.0)
            })
            .collect();
        let c = compute_dva(&trace_of(&pts), 1).unwrap();
        assert_eq!(c.points.len(), 9);
        for p in &c.points {
            assert!((p.dq_dv + 100.0).abs() < 1e-9, "{}", p.dq_dv);
        }
    }

    #[test]
    fn quadratic_matches_midpoint_derivative() {
        let pts: Vec<_> = (0..20)
            .map(|i| {
                let v = 2.9 - 0.05 * i as f64;
                (v, -50.0 * v * v + 500.0)
            })
            .collect();
        let c = compute_dva(&trace_of(&pts), 1).unwrap();
        for p in &c.points {
            let exact = -100.0 * p.v_mid;
            assert!(((p.dq_dv - exact) / exact).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_voltage_collapses() {
        let t = trace_of(&[(2.8, 0.0), (2.6, 10.0), (2.6, 20.0), (2.4, 40.0)]);
        let c = compute_dva(&t, 1).unwrap();
        assert_eq!(c.points.len(), 2);
        assert!((c.points[0].dq_dv - (15.0 / -0.2)).abs() < 1e-9);
        assert!((c.points[1].dq_dv - (25.0 / -0.2)).abs() < 1e-9);
    }

    #[test]
    fn all_same_voltage_is_degenerate() {
        let t = trace_of(&[(2.5, 0.0), (2.5, 1.0), (2.5, 2.0)]);
        assert!(matches!(compute_dva(&t, 1), Err(DvaError::DegenerateTrace { .. })));
    }

    #[test]
    fn even_window_rejected() {
        let t = trace_of(&[(2.8, 0.0), (2.5, 1.0)]);
        assert_eq!(compute_dva(&t, 2), Err(DvaError::Window(2)));
        assert_eq!(compute_dva(&t, 0), Err(DvaError::Window(0)));
    }

    #[test]
    fn moving_average_edges_truncate() {
        let s = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0], 3);
        assert_eq!(s, vec![1.5, 2.0, 3.0, 4.0, 4.5]);
    }

    #[test]
    fn window_capacity_cases() {
        let p = DegradationProfile::default();
        let t = generate_trace(&p, &TraceShape::default(), 50).unwrap();
        let w = window_capacity(&t, 2.25, 2.30);
        assert!((w - 40.0).abs() <= 2.0, "{w}");
        let full = window_capacity(&t, 1.6, 2.8);
        assert!((full - t.total_capacity()).abs() < 1e-9);
        assert_eq!(window_capacity(&t, 5.0, 6.0), 0.0);
    }

    #[test]
    fn partial_overlap_is_prorated() {
        let t = trace_of(&[(3.0, 0.0), (2.0, 100.0)]);
        assert!((window_capacity(&t, 2.25, 2.5) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn fade_series_sorted() {
        let p = DegradationProfile::default();
        let s = TraceShape::default();
        let traces = vec![
            generate_trace(&p, &s, 500).unwrap(),
            generate_trace(&p, &s, 50).unwrap(),
        ];
        let f = fade_series(&traces, 2.25, 2.30).unwrap();
        assert_eq!(f[0].0, 50);
        assert_eq!(f[1].0, 500);
        assert!((f[0].1 - 40.0).abs() <= 2.0);
        assert!((f[1].1 - 28.0).abs() <= 2.0);
        assert_eq!(fade_series(&traces[..1], 2.25, 2.30).unwrap().len(), 1);
        assert_eq!(fade_series(&[], 2.25, 2.30), Err(DvaError::Empty));
    }
}
