//! Robust flagging of voltage deviations in discharge traces.
//!
//! Residuals against an expected voltage pattern are scored with the
//! median and the median absolute deviation (MAD, scaled by 1.4826 so it
//! estimates a Gaussian standard deviation). The expected pattern is either
//! a reference trace, resampled onto the trace's capacity grid, or a
//! centered running median of the trace itself.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DischargeTrace;
use crate::util::nonfinite_as_null;

pub const DEFAULT_THRESHOLD_Z: f64 = 3.0;
pub const MEDIAN_WINDOW: usize = 11;
pub const MIN_TRACE_SAMPLES: usize = 10;
pub const MAD_TO_SD: f64 = 1.4826;
/// Residuals closer than this to the median count as zero when the MAD
/// vanishes.
pub const RESIDUAL_TOLERANCE_V: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("every sample is flagged; nothing to interpolate from")]
    AllFlagged,
}

pub type Result<T> = std::result::Result<T, AnomalyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    ReferenceTrace,
    SmoothedSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSample {
    pub sample_index: usize,
    pub residual_v: f64,
    /// Infinite when the robust scale is zero.
    #[serde(with = "nonfinite_as_null")]
    pub zscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub cell_id: String,
    pub cycle_index: u32,
    pub flagged: Vec<FlaggedSample>,
    #[serde(with = "nonfinite_as_null")]
    pub threshold_z: f64,
    pub baseline_kind: BaselineKind,
    /// The MAD was zero, so every residual away from the median was flagged.
    pub degenerate_scale: bool,
}

impl AnomalyReport {
    pub fn flagged_indices(&self) -> Vec<usize> {
        self.flagged.iter().map(|f| f.sample_index).collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Running median with a symmetric window that shrinks near the ends, so
/// the window stays centered on every sample.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let r = half.min(i).min(n - 1 - i);
            median(&values[i - r..=i + r])
        })
        .collect()
}

/// Voltage of `reference` at each capacity of `trace`, linearly
/// interpolated and clamped to the reference's end values.
pub fn resample_voltage(reference: &DischargeTrace, trace: &DischargeTrace) -> Vec<f64> {
    let s = &reference.samples;
    trace
        .samples
        .iter()
        .map(|t| {
            let q = t.capacity_mah;
            let k = s.partition_point(|p| p.capacity_mah <= q);
            if k == 0 {
                return s[0].voltage_v;
            }
            if k == s.len() {
                return s[k - 1].voltage_v;
            }
            let (a, b) = (s[k - 1], s[k]);
            let dq = b.capacity_mah - a.capacity_mah;
            if dq == 0.0 {
                a.voltage_v
            } else {
                a.voltage_v + (b.voltage_v - a.voltage_v) * (q - a.capacity_mah) / dq
            }
        })
        .collect()
}

pub fn detect_anomalies(
    trace: &DischargeTrace,
    baseline: Option<&DischargeTrace>,
    threshold_z: f64,
) -> Result<AnomalyReport> {
    if trace.len() < MIN_TRACE_SAMPLES {
        return Err(AnomalyError::Argument(format!(
            "trace has {} samples, need at least {MIN_TRACE_SAMPLES}",
            trace.len()
        )));
    }
    if threshold_z.is_nan() || threshold_z <= 0.0 {
        return Err(AnomalyError::Argument(format!(
            "threshold must be positive, got {threshold_z}"
        )));
    }
    let voltages = trace.voltages();
    let (expected, baseline_kind) = match baseline {
        Some(b) if b.is_empty() => {
            return Err(AnomalyError::Argument("baseline trace is empty".into()))
        }
        Some(b) => (resample_voltage(b, trace), BaselineKind::ReferenceTrace),
        None => (median_filter(&voltages, MEDIAN_WINDOW), BaselineKind::SmoothedSelf),
    };
    let residuals: Vec<f64> = voltages.iter().zip(&expected).map(|(v, e)| v - e).collect();
    let center = median(&residuals);
    let deviations: Vec<f64> = residuals.iter().map(|r| (r - center).abs()).collect();
    let scale = MAD_TO_SD * median(&deviations);
    let degenerate_scale = !(scale > 0.0);

    let flagged = residuals
        .iter()
        .enumerate()
        .filter_map(|(i, &r)| {
            let d = r - center;
            let z = if !degenerate_scale {
                d / scale
            } else if d.abs() <= RESIDUAL_TOLERANCE_V {
                0.0
            } else {
                d.signum() * f64::INFINITY
            };
            (threshold_z.is_finite() && z.abs() >= threshold_z).then_some(FlaggedSample {
                sample_index: i,
                residual_v: r,
                zscore: z,
            })
        })
        .collect();

    Ok(AnomalyReport {
        cell_id: trace.cell_id.clone(),
        cycle_index: trace.cycle_index,
        flagged,
        threshold_z,
        baseline_kind,
        degenerate_scale,
    })
}

/// Replace flagged voltages by linear interpolation (over sample index)
/// between the nearest unflagged neighbours; flagged runs at either end take
/// the nearest unflagged value.
pub fn feedback_refine(report: &AnomalyReport, trace: &DischargeTrace) -> Result<DischargeTrace> {
    if report.cell_id != trace.cell_id || report.cycle_index != trace.cycle_index {
        return Err(AnomalyError::Argument("report does not refer to this trace".into()));
    }
    let n = trace.len();
    let flagged: BTreeSet<usize> = report.flagged.iter().map(|f| f.sample_index).collect();
    if flagged.iter().any(|&i| i >= n) {
        return Err(AnomalyError::Argument("flagged index outside trace".into()));
    }
    if flagged.is_empty() {
        return Ok(trace.clone());
    }
    if flagged.len() == n {
        return Err(AnomalyError::AllFlagged);
    }
    let v = trace.voltages();
    let mut out = trace.clone();
    for &i in &flagged {
        let prev = (0..i).rev().find(|j| !flagged.contains(j));
        let next = (i + 1..n).find(|j| !flagged.contains(j));
        out.samples[i].voltage_v = match (prev, next) {
            (Some(p), Some(q)) => v[p] + (v[q] - v[p]) * (i - p) as f64 / (q - p) as f64,
            (Some(p), None) => v[p],
            (None, Some(q)) => v[q],
            (None, None) => unreachable!(),
        };
    }
    Ok(out)
}
