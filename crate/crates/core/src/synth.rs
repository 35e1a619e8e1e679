//! Synthetic LTO degradation data with known ground truth.
//!
//! Cycle capacities follow a quadratic state-of-health curve
//! `SoH(C) = 100 + b·C + a·C²`. Discharge traces are scaled logistic
//! capacity-voltage curves whose total equals the cycle capacity, so the
//! charge inside any fixed voltage window scales with SoH.
//!
//! All randomness comes from [`ChaCha8Rng`] seeded with `seed_from_u64`
//! and Gaussian draws from [`rand_distr::Normal`].

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CycleRecord, DischargeTrace, Sample};

/// Quadratic fade coefficient of the default profile (per cycle²).
pub const DEFAULT_FADE_A: f64 = -1e-4;
/// Linear fade coefficient of the default profile. Chosen so that
/// `SoH(500) / SoH(50) = 28 / 40`.
pub const DEFAULT_FADE_B: f64 = -0.011129032258064516;
pub const DEFAULT_NOMINAL_MAH: f64 = 1000.0;
pub const DEFAULT_N_CYCLES: u32 = 500;

pub const DEFAULT_V_MAX: f64 = 2.8;
pub const DEFAULT_V_MIN: f64 = 1.6;
pub const DEFAULT_PLATEAU_CENTER_V: f64 = 2.40;
/// Logistic sharpness (1/V) putting 40 mAh of a cycle-50 discharge in the
/// 2.25–2.30 V band. Solved by bisection on the falling branch; see the
/// `calibration_constants_are_solutions` test.
pub const DEFAULT_PLATEAU_SHARPNESS: f64 = 28.703485332455656;
/// 5 mV spacing over the default voltage span.
pub const DEFAULT_TRACE_SAMPLES: usize = 241;

/// Voltage band used for fade tracking.
pub const FADE_WINDOW_V: (f64, f64) = (2.25, 2.30);

/// Mean discharge voltage used to derive energy from capacity.
const MEAN_DISCHARGE_V: f64 = 2.4;
const NOMINAL_EFFICIENCY: f64 = 0.99;
const AMBIENT_C: f64 = 25.0;
const TEMPERATURE_SD_C: f64 = 0.5;
const SAG_WIDTH: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    Profile(String),
    #[error("invalid trace shape: {0}")]
    Shape(String),
    #[error("sample index {index} out of range for trace of {len} samples")]
    Index { index: usize, len: usize },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationProfile {
    pub nominal_capacity_mah: f64,
    pub fade_a: f64,
    pub fade_b: f64,
    pub noise_sd_mah: f64,
    pub n_cycles: u32,
    pub seed: u64,
}

impl Default for DegradationProfile {
    fn default() -> Self {
        Self {
            nominal_capacity_mah: DEFAULT_NOMINAL_MAH,
            fade_a: DEFAULT_FADE_A,
            fade_b: DEFAULT_FADE_B,
            noise_sd_mah: 0.0,
            n_cycles: DEFAULT_N_CYCLES,
            seed: 0,
        }
    }
}

impl DegradationProfile {
    pub fn soh(&self, cycle: f64) -> f64 {
        100.0 + self.fade_b * cycle + self.fade_a * cycle * cycle
    }

    /// Noiseless charge capacity at `cycle`.
    pub fn capacity(&self, cycle: f64) -> f64 {
        self.nominal_capacity_mah * self.soh(cycle) / 100.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nominal_capacity_mah.is_finite() && self.nominal_capacity_mah > 0.0) {
            return Err(SynthError::Profile("nominal capacity must be positive".into()));
        }
        if !(self.noise_sd_mah.is_finite() && self.noise_sd_mah >= 0.0) {
            return Err(SynthError::Profile("noise sd must be non-negative".into()));
        }
        if !(self.fade_a.is_finite() && self.fade_b.is_finite()) {
            return Err(SynthError::Profile("fade coefficients must be finite".into()));
        }
        if self.n_cycles == 0 {
            return Err(SynthError::Profile("n_cycles must be positive".into()));
        }
        // A quadratic's extremes on an interval are at the ends or the vertex.
        let n = self.n_cycles as f64;
        let mut probes = vec![1.0, n];
        if self.fade_a != 0.0 {
            let vertex = -self.fade_b / (2.0 * self.fade_a);
            if vertex > 1.0 && vertex < n {
                probes.push(vertex);
            }
        }
        for c in probes {
            let s = self.soh(c);
            if !(s > 0.0 && s <= 100.0) {
                return Err(SynthError::Profile(format!(
                    "SoH({c}) = {s} leaves (0, 100]"
                )));
            }
        }
        Ok(())
    }
}

/// Generate `n_cells` cycle series named `cell1..cellN`; cell `k` draws its
/// noise from `seed + k`.
pub fn generate_cells(profile: &DegradationProfile, n_cells: usize) -> Result<Vec<Vec<CycleRecord>>> {
    profile.validate()?;
    if n_cells == 0 {
        return Err(SynthError::Profile("n_cells must be at least 1".into()));
    }
    let cells = (1..=n_cells)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(profile.seed.wrapping_add(k as u64));
            generate_series(profile, &format!("cell{k}"), &mut rng)
        })
        .collect();
    Ok(cells)
}

fn generate_series(profile: &DegradationProfile, cell_id: &str, rng: &mut ChaCha8Rng) -> Vec<CycleRecord> {
    let sd = profile.noise_sd_mah;
    let noisy = sd > 0.0;
    let cap_noise = Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).unwrap();
    let eff_noise = Normal::new(0.0, (sd / profile.nominal_capacity_mah).max(f64::MIN_POSITIVE)).unwrap();
    let temp_noise = Normal::new(0.0, TEMPERATURE_SD_C).unwrap();

    (1..=profile.n_cycles)
        .map(|c| {
            let mut chg = profile.capacity(c as f64);
            let mut eff = NOMINAL_EFFICIENCY;
            let mut temp = AMBIENT_C;
            if noisy {
                chg = (chg + cap_noise.sample(rng)).max(0.0);
                eff += eff_noise.sample(rng);
                temp += temp_noise.sample(rng);
            }
            let dchg = (chg * eff).max(0.0);
            CycleRecord {
                cell_id: cell_id.to_string(),
                cycle_index: c,
                cap_chg_mah: chg,
                cap_dchg_mah: dchg,
                energy_mwh: Some(dchg * MEAN_DISCHARGE_V),
                temperature_c: Some(temp),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceShape {
    pub v_max_v: f64,
    pub v_min_v: f64,
    pub plateau_center_v: f64,
    /// Logistic steepness in 1/V.
    pub plateau_sharpness: f64,
    pub n_samples: usize,
    /// Gaussian measurement noise added to voltages.
    pub voltage_noise_sd_v: f64,
}

impl Default for TraceShape {
    fn default() -> Self {
        Self {
            v_max_v: DEFAULT_V_MAX,
            v_min_v: DEFAULT_V_MIN,
            plateau_center_v: DEFAULT_PLATEAU_CENTER_V,
            plateau_sharpness: DEFAULT_PLATEAU_SHARPNESS,
            n_samples: DEFAULT_TRACE_SAMPLES,
            voltage_noise_sd_v: 0.0,
        }
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl TraceShape {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.v_max_v, self.v_min_v, self.plateau_center_v, self.plateau_sharpness]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.v_max_v <= self.v_min_v {
            return Err(SynthError::Shape("need finite v_max > v_min".into()));
        }
        if !(self.plateau_center_v > self.v_min_v && self.plateau_center_v < self.v_max_v) {
            return Err(SynthError::Shape("plateau centre must lie inside (v_min, v_max)".into()));
        }
        if self.plateau_sharpness <= 0.0 {
            return Err(SynthError::Shape("sharpness must be positive".into()));
        }
        if self.n_samples < 2 {
            return Err(SynthError::Shape("need at least 2 samples".into()));
        }
        if !(self.voltage_noise_sd_v.is_finite() && self.voltage_noise_sd_v >= 0.0) {
            return Err(SynthError::Shape("voltage noise sd must be non-negative".into()));
        }
        Ok(())
    }

    /// Fraction of the discharge delivered above voltage `v`: 0 at `v_max`,
    /// 1 at `v_min`, strictly decreasing in `v`.
    pub fn delivered_fraction(&self, v: f64) -> f64 {
        let s = |x: f64| logistic(self.plateau_sharpness * (self.plateau_center_v - x));
        let lo = s(self.v_max_v);
        let hi = s(self.v_min_v);
        (s(v) - lo) / (hi - lo)
    }

    /// Fraction of the discharge delivered while voltage lies in `[v_lo, v_hi]`.
    pub fn window_fraction(&self, v_lo: f64, v_hi: f64) -> f64 {
        let clamp = |v: f64| v.clamp(self.v_min_v, self.v_max_v);
        self.delivered_fraction(clamp(v_lo)) - self.delivered_fraction(clamp(v_hi))
    }
}

/// Discharge trace for `cycle_index`. Voltages are evenly spaced from
/// `v_max` down to `v_min`; measurement noise, when enabled, is seeded from
/// the profile seed and the cycle index.
pub fn generate_trace(profile: &DegradationProfile, shape: &TraceShape, cycle_index: u32) -> Result<DischargeTrace> {
    profile.validate()?;
    shape.validate()?;
    if cycle_index == 0 || cycle_index > profile.n_cycles {
        return Err(SynthError::Profile(format!(
            "cycle {cycle_index} outside [1, {}]",
            profile.n_cycles
        )));
    }
    let total = profile.capacity(cycle_index as f64);
    let n = shape.n_samples;
    let span = shape.v_min_v - shape.v_max_v;
    let mut samples: Vec<Sample> = (0..n)
        .map(|i| {
            let v = if i + 1 == n {
                shape.v_min_v
            } else {
                shape.v_max_v + span * i as f64 / (n - 1) as f64
            };
            Sample::new(v, total * shape.delivered_fraction(v))
        })
        .collect();
    if shape.voltage_noise_sd_v > 0.0 {
        let seed = profile
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(cycle_index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, shape.voltage_noise_sd_v).unwrap();
        for s in &mut samples {
            s.voltage_v += noise.sample(&mut rng);
        }
    }
    Ok(DischargeTrace::new("synthetic", cycle_index, samples))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    /// One sample offset.
    Spike,
    /// A short run of samples offset.
    Sag,
    /// Every sample from the location to the end offset.
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedTrace {
    pub trace: DischargeTrace,
    pub kind: AnomalyKind,
    pub magnitude_v: f64,
    pub perturbed: Range<usize>,
}

pub fn inject_anomaly(
    trace: &DischargeTrace,
    kind: AnomalyKind,
    magnitude_v: f64,
    location: usize,
) -> Result<InjectedTrace> {
    let len = trace.len();
    if location >= len {
        return Err(SynthError::Index { index: location, len });
    }
    if !magnitude_v.is_finite() {
        return Err(SynthError::Profile("anomaly magnitude must be finite".into()));
    }
    let perturbed = match kind {
        AnomalyKind::Spike => location..location + 1,
        AnomalyKind::Sag => location..(location + SAG_WIDTH).min(len),
        AnomalyKind::Step => location..len,
    };
    let mut out = trace.clone();
    for s in &mut out.samples[perturbed.clone()] {
        s.voltage_v += magnitude_v;
    }
    Ok(InjectedTrace {
        trace: out,
        kind,
        magnitude_v,
        perturbed,
    })
}
