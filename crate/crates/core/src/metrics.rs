//! Regression metrics, timing, and the method comparison table.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::nonfinite_as_null;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R2Status {
    Defined,
    /// Constant targets predicted exactly; reported as 1.
    ConstantTargetsExact,
    /// Constant targets with nonzero error; reported as -inf.
    ConstantTargetsMissed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalTiming {
    pub inference_seconds: f64,
    pub n_batches: usize,
    pub batches_per_second: f64,
    /// The measured duration was zero, so throughput is reported as 0.
    pub zero_duration: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mse: f64,
    pub mae: f64,
    /// MAE as a percentage of nominal capacity; `null` without one.
    #[serde(with = "nonfinite_as_null")]
    pub mae_pct: f64,
    #[serde(with = "nonfinite_as_null")]
    pub r2: f64,
    pub r2_status: R2Status,
    pub n: usize,
    pub parameter_count: usize,
    pub timing: EvalTiming,
}

pub fn evaluate(
    y_true: &[f64],
    y_pred: &[f64],
    timing: (f64, usize),
    parameter_count: usize,
    nominal_capacity_mah: Option<f64>,
) -> Result<EvalResult, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Argument(format!(
            "{} targets vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(MetricsError::Argument("empty input".into()));
    }
    let (seconds, n_batches) = timing;
    if !(seconds >= 0.0) {
        return Err(MetricsError::Argument(format!("negative duration {seconds}")));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    let mut abs = 0.0;
    for (&y, &p) in y_true.iter().zip(y_pred) {
        let r = y - p;
        ss_res += r * r;
        abs += r.abs();
        ss_tot += (y - mean) * (y - mean);
    }
    let (r2, r2_status) = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot, R2Status::Defined)
    } else if ss_res == 0.0 {
        (1.0, R2Status::ConstantTargetsExact)
    } else {
        (f64::NEG_INFINITY, R2Status::ConstantTargetsMissed)
    };
    let mae = abs / n;
    let zero_duration = seconds == 0.0;
    Ok(EvalResult {
        mse: ss_res / n,
        mae,
        mae_pct: nominal_capacity_mah.map_or(f64::NAN, |c| 100.0 * mae / c),
        r2,
        r2_status,
        n: y_true.len(),
        parameter_count,
        timing: EvalTiming {
            inference_seconds: seconds,
            n_batches,
            batches_per_second: if zero_duration { 0.0 } else { n_batches as f64 / seconds },
            zero_duration,
        },
    })
}

/// Run `action` and return its result with elapsed wall-clock seconds
/// from the monotonic clock.
pub fn timeit<T>(action: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = action();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSource {
    Measured,
    /// Published figures for a separate full-scale system and dataset.
    Published,
}

impl RowSource {
    fn label(self) -> &'static str {
        match self {
            RowSource::Measured => "measured",
            RowSource::Published => "published",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method_name: String,
    pub mae_pct: f64,
    /// Seconds.
    pub time_seconds: f64,
    pub source: RowSource,
}

impl ComparisonRow {
    pub fn measured(method_name: impl Into<String>, mae_pct: f64, time_seconds: f64) -> Self {
        Self {
            method_name: method_name.into(),
            mae_pct,
            time_seconds,
            source: RowSource::Measured,
        }
    }
}

/// Published MAE (%) and time (s) for the LTO capacity-fade comparison.
/// "RD" is kept as an opaque label.
pub const REFERENCE_TABLE: [(&str, f64, f64); 5] = [
    ("GPR", 21.00, 34.50),
    ("RD", 8.74, 27.50),
    ("SVR", 4.27, 22.00),
    ("CNN", 10.31, 30.00),
    ("LLM", 0.81, 61.17),
];

/// Published headline figures for the full-scale model, for display only.
pub mod reference {
    pub const MAE_PCT_ABSTRACT: f64 = 0.87;
    pub const MAE_PCT_TABLE: f64 = 0.81;
    pub const TIME_SECONDS: f64 = 61.17;
    pub const TRAIN_MSE: f64 = 655290.2594;
    pub const TEST_MSE: f64 = 654172.7254;
    pub const BATCHES_EVALUATED: u32 = 122;
    pub const BATCHES_PER_SECOND: f64 = 13.30;
    pub const PARAMETER_COUNT: u64 = 109_483_009;
}

pub fn reference_rows() -> Vec<ComparisonRow> {
    REFERENCE_TABLE
        .iter()
        .map(|&(name, mae, t)| ComparisonRow {
            method_name: name.to_string(),
            mae_pct: mae,
            time_seconds: t,
            source: RowSource::Published,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// What MAE(%) is relative to.
    pub mae_basis: String,
}

impl ComparisonTable {
    /// Plain-text table with columns Method, MAE(%), Time(s), Source.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method_name.len())
            .max()
            .unwrap_or(0)
            .max("Method".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  Source", "Method", "MAE(%)", "Time(s)");
        let _ = writeln!(out, "{}", "-".repeat(width + 30));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.2}  {:>8.2}  {}",
                r.method_name,
                r.mae_pct,
                r.time_seconds,
                r.source.label()
            );
        }
        out
    }
}

/// Sort `measured` plus, optionally, the published reference rows by
/// ascending MAE.
pub fn comparison_table(measured: &[ComparisonRow], include_reference: bool) -> Result<ComparisonTable, MetricsError> {
    let mut rows = measured.to_vec();
    if include_reference {
        rows.extend(reference_rows());
    }
    if rows.is_empty() {
        return Err(MetricsError::Argument("no rows to tabulate".into()));
    }
    rows.sort_by(|a, b| a.mae_pct.total_cmp(&b.mae_pct));
    Ok(ComparisonTable {
        rows,
        mae_basis: "MAE as a percentage of nominal capacity".into(),
    })
}
