//! State of health, quadratic degradation fit, and end-of-life solving.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::CycleRecord;

pub const DEFAULT_EOL_THRESHOLD_PCT: f64 = 80.0;

/// Cycles inspected by [`estimate_nominal`].
pub const NOMINAL_HEURISTIC_CYCLES: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum HealthError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("design matrix is rank deficient: {0}")]
    Rank(String),
}

pub type Result<T> = std::result::Result<T, HealthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NominalSource {
    Given,
    /// Maximum charge capacity over the first few cycles.
    Heuristic,
}

/// Nominal capacity guess: the largest charge capacity among the first
/// [`NOMINAL_HEURISTIC_CYCLES`] records.
pub fn estimate_nominal(records: &[CycleRecord]) -> Option<f64> {
    records
        .iter()
        .take(NOMINAL_HEURISTIC_CYCLES)
        .map(|r| r.cap_chg_mah)
        .reduce(f64::max)
        .filter(|v| *v > 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SohPoint {
    pub cycle: u32,
    pub soh_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SohSeries {
    pub cell_id: String,
    pub nominal_capacity_mah: f64,
    pub points: Vec<SohPoint>,
    /// Set when any point exceeds 100 %.
    pub overshoot: bool,
}

pub fn compute_soh(records: &[CycleRecord], nominal_capacity_mah: f64) -> Result<SohSeries> {
    if !(nominal_capacity_mah.is_finite() && nominal_capacity_mah > 0.0) {
        return Err(HealthError::Argument(format!(
            "nominal capacity must be positive, got {nominal_capacity_mah}"
        )));
    }
    if records.is_empty() {
        return Err(HealthError::Argument("no records".into()));
    }
    let mut points: Vec<SohPoint> = records
        .iter()
        .map(|r| SohPoint {
            cycle: r.cycle_index,
            soh_pct: 100.0 * r.cap_chg_mah / nominal_capacity_mah,
        })
        .collect();
    points.sort_by_key(|p| p.cycle);
    if points.windows(2).any(|w| w[0].cycle == w[1].cycle) {
        return Err(HealthError::Argument("duplicate cycle index".into()));
    }
    if let Some(p) = points.iter().find(|p| !p.soh_pct.is_finite()) {
        return Err(HealthError::Argument(format!("non-finite SoH at cycle {}", p.cycle)));
    }
    Ok(SohSeries {
        cell_id: records[0].cell_id.clone(),
        nominal_capacity_mah,
        overshoot: points.iter().any(|p| p.soh_pct > 100.0),
        points,
    })
}

/// `SoH(C) = a·C² + b·C + c` fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rmse_pct: f64,
    pub n_points: usize,
    /// Standard errors of `(a, b, c)`; zero when there are no spare degrees
    /// of freedom.
    pub std_errors: [f64; 3],
}

impl QuadraticFit {
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Self {
        Self {
            a,
            b,
            c,
            rmse_pct: 0.0,
            n_points: 0,
            std_errors: [0.0; 3],
        }
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

pub fn predict_soh(fit: &QuadraticFit, cycle: f64) -> f64 {
    (fit.a * cycle + fit.b) * cycle + fit.c
}

type Mat3 = [[f64; 3]; 3];

/// Gaussian elimination with partial pivoting. `None` when a pivot falls
/// below `tol` relative to the largest diagonal entry.
fn solve3(m: &Mat3, rhs: &[f64; 3]) -> Option<[f64; 3]> {
    let scale = (0..3).map(|i| m[i][i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut a = *m;
    let mut y = *rhs;
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= tol {
            return None;
        }
        a.swap(col, piv);
        y.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            let pivot_row = a[col];
            for (dst, src) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                *dst -= f * src;
            }
            y[row] -= f * y[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (y[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least-squares quadratic in cycle index.
///
/// The normal equations are formed on `t = (C − mean) / half_span`, which
/// keeps them well conditioned for large cycle counts; coefficients are
/// mapped back to the raw cycle basis afterwards.
pub fn fit_quadratic(series: &SohSeries) -> Result<QuadraticFit> {
    let pts = &series.points;
    let mut cycles: Vec<u32> = pts.iter().map(|p| p.cycle).collect();
    cycles.dedup();
    if cycles.len() < 3 {
        return Err(HealthError::Rank(format!(
            "{} distinct cycles, need at least 3",
            cycles.len()
        )));
    }
    let n = pts.len() as f64;
    let mean = pts.iter().map(|p| p.cycle as f64).sum::<f64>() / n;
    let half_span = pts
        .iter()
        .map(|p| (p.cycle as f64 - mean).abs())
        .fold(0.0, f64::max);
    let t: Vec<f64> = pts.iter().map(|p| (p.cycle as f64 - mean) / half_span).collect();

    // Basis order (t², t, 1).
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for (ti, p) in t.iter().zip(pts) {
        let row = [ti * ti, *ti, 1.0];
        for i in 0..3 {
            aty[i] += row[i] * p.soh_pct;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let [alpha, beta, gamma] =
        solve3(&ata, &aty).ok_or_else(|| HealthError::Rank("singular normal equations".into()))?;

    let ss_res: f64 = t
        .iter()
        .zip(pts)
        .map(|(ti, p)| {
            let r = p.soh_pct - ((alpha * ti + beta) * ti + gamma);
            r * r
        })
        .sum();

    let (m, s) = (mean, half_span);
    // (a, b, c) = M · (alpha, beta, gamma)
    let map: Mat3 = [
        [1.0 / (s * s), 0.0, 0.0],
        [-2.0 * m / (s * s), 1.0 / s, 0.0],
        [m * m / (s * s), -m / s, 1.0],
    ];
    let coef = |row: usize| map[row][0] * alpha + map[row][1] * beta + map[row][2] * gamma;

    let dof = pts.len().saturating_sub(3);
    let std_errors = if dof == 0 {
        [0.0; 3]
    } else {
        let sigma2 = ss_res / dof as f64;
        let mut inv = [[0.0; 3]; 3];
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = 1.0;
            let col = solve3(&ata, &e).ok_or_else(|| HealthError::Rank("singular normal equations".into()))?;
            for i in 0..3 {
                inv[i][k] = col[i];
            }
        }
        let mut se = [0.0; 3];
        for (r, out) in se.iter_mut().enumerate() {
            let mut v = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    v += map[r][i] * inv[i][j] * map[r][j];
                }
            }
            *out = (sigma2 * v).max(0.0).sqrt();
        }
        se
    };

    Ok(QuadraticFit {
        a: coef(0),
        b: coef(1),
        c: coef(2),
        rmse_pct: (ss_res / n).sqrt(),
        n_points: pts.len(),
        std_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulEstimate {
    pub fit: QuadraticFit,
    pub current_cycle: u32,
    pub threshold_pct: f64,
    /// `None` when the fitted curve never crosses the threshold after
    /// `current_cycle`.
    pub end_of_life_cycle: Option<f64>,
    pub rul_cycles: Option<f64>,
}

impl RulEstimate {
    pub fn reached(&self) -> bool {
        self.end_of_life_cycle.is_some()
    }
}

/// Real roots of `a·x² + b·x + c`, using the cancellation-free form of
/// the quadratic formula.
pub fn real_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    if a == 0.0 {
        return if b == 0.0 { Vec::new() } else { vec![-c / b] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let sign = if b >= 0.0 { 1.0 } else { -1.0 };
    let q = -0.5 * (b + sign * disc.sqrt());
    if q == 0.0 {
        return vec![0.0];
    }
    let mut roots = vec![q / a, c / q];
    roots.sort_by(f64::total_cmp);
    roots
}

/// First cycle after `current_cycle` where the fit reaches `threshold_pct`.
pub fn solve_end_of_life(fit: &QuadraticFit, current_cycle: u32, threshold_pct: f64) -> RulEstimate {
    let now = current_cycle as f64;
    let eol = real_roots(fit.a, fit.b, fit.c - threshold_pct)
        .into_iter()
        .filter(|r| r.is_finite() && *r > now)
        .reduce(f64::min);
    RulEstimate {
        fit: fit.clone(),
        current_cycle,
        threshold_pct,
        end_of_life_cycle: eol,
        rul_cycles: eol.map(|e| e - now),
    }
}
