//! Independent reference computations shared by the integration tests.
//! None of these call into the library code they check.

#![allow(dead_code)]

use lto_health::ingest::{build_features_multi, DischargeTrace, FeatureMatrix, Sample};
use lto_health::model::{loss_mse, ModelConfig, Sequence, TransformerRegressor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count written out tensor by tensor.
pub fn parameter_count_oracle(input_dim: usize, d: usize, layers: usize, d_ff: usize) -> usize {
    let embed = input_dim * d + d;
    let summary = d;
    let layer_norm = 2 * d;
    let projection = d * d + d;
    let block = layer_norm + 4 * projection + layer_norm + (d * d_ff + d_ff) + (d_ff * d + d);
    let head = d + 1;
    embed + summary + layers * block + layer_norm + head
}

/// Root of `f` on `[lo, hi]` by bisection; `f(lo)` and `f(hi)` must differ
/// in sign.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut f_lo = f(lo);
    assert!(f_lo * f(hi) <= 0.0, "no sign change on [{lo}, {hi}]");
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if (f_mid < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Straightforward two-pass MSE, MAE and R².
pub fn naive_metrics(y: &[f64], p: &[f64]) -> (f64, f64, f64) {
    let n = y.len() as f64;
    let mut mean = 0.0;
    for v in y {
        mean += v;
    }
    mean /= n;
    let mut mse = 0.0;
    let mut mae = 0.0;
    let mut tot = 0.0;
    for i in 0..y.len() {
        mse += (y[i] - p[i]).powi(2);
        mae += (y[i] - p[i]).abs();
        tot += (y[i] - mean).powi(2);
    }
    (mse / n, mae / n, 1.0 - mse / tot)
}

/// Trace sampling `q(v)` at the given voltages.
pub fn trace_from_fn(voltages: &[f64], q: impl Fn(f64) -> f64) -> DischargeTrace {
    DischargeTrace::new("oracle", 1, voltages.iter().map(|&v| Sample::new(v, q(v))).collect())
}

/// Charge delivered between `v_lo` and `v_hi` on a falling piecewise-linear
/// trace, computed by integrating the interpolant on a fine grid.
pub fn window_capacity_by_quadrature(trace: &DischargeTrace, v_lo: f64, v_hi: f64) -> f64 {
    let q_at = |v: f64| -> f64 {
        let s = &trace.samples;
        for w in s.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (hi, lo) = (a.voltage_v.max(b.voltage_v), a.voltage_v.min(b.voltage_v));
            if v <= hi && v >= lo && hi > lo {
                return a.capacity_mah + (b.capacity_mah - a.capacity_mah) * (v - a.voltage_v) / (b.voltage_v - a.voltage_v);
            }
        }
        if v > s[0].voltage_v {
            s[0].capacity_mah
        } else {
            s[s.len() - 1].capacity_mah
        }
    };
    q_at(v_lo) - q_at(v_hi)
}

/// Window and seed of the pinned training fixture.
pub const FIXTURE_WINDOW: usize = 8;
pub const FIXTURE_SEED: u64 = 0;

/// Eight noiseless default cells of 500 cycles.
pub fn training_fixture() -> FeatureMatrix {
    let cells = lto_health::synth::generate_cells(&lto_health::synth::DegradationProfile::default(), 8).unwrap();
    build_features_multi(&cells, FIXTURE_WINDOW).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, width: usize) -> Vec<Sequence> {
    (0..n)
        .map(|_| Array2::from_shape_simple_fn((len, width), || rng.random_range(-1.0..1.0)))
        .collect()
}

/// The fixed tiny model of the gradient check: d_model 8, one layer, one
/// head, batch 2, sequence length 3.
pub fn tiny_gradient_fixture() -> (TransformerRegressor, Vec<Sequence>, Vec<f64>) {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 1,
        n_layers: 1,
        d_ff: 16,
        max_seq_len: 3,
        dropout_p: 0.0,
        input_dim: 3,
    };
    let mut model = TransformerRegressor::new(config, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // perturb scales and offsets away from 1 and 0 so every path is exercised
    for p in model.params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let batch = random_batch(&mut rng, 2, 3, 3);
    (model, batch, vec![0.7, -0.4])
}

pub struct GradientCheck {
    pub max_rel_error: f64,
    pub worst: (String, usize),
    pub n_params: usize,
    /// Tensors with an entry whose gradient magnitude fell below the floor.
    pub floored: Vec<String>,
}

/// Relative-error denominator floor. Key biases have zero gradient because
/// softmax ignores a per-row shift, so their central differences are pure
/// round-off (about 1e-11 here); every other gradient of the fixtures is
/// above 1e-4.
pub const GRADIENT_REL_FLOOR: f64 = 1e-6;

impl GradientCheck {
    /// Only symmetry-zero key biases may fall back on the floor.
    pub fn floor_only_on_key_bias(&self) -> bool {
        self.floored.iter().all(|n| n.ends_with("attn.key.bias"))
    }
}

/// Central differences with step `h` over every parameter.
pub fn gradient_check(model: &TransformerRegressor, batch: &[Sequence], labels: &[f64], h: f64) -> GradientCheck {
    let (_, grads) = model.backward(batch, labels).unwrap();
    let mut probe = model.clone();
    let loss = |m: &TransformerRegressor| loss_mse(&m.predict_sequences(batch).unwrap(), labels).unwrap();
    let mut max_rel: f64 = 0.0;
    let mut worst = (String::new(), 0);
    let mut floored = Vec::new();
    let name_of = |i: usize| model.layout.specs.iter().find(|t| t.range().contains(&i)).unwrap();
    for i in 0..model.params.len() {
        let p = model.params[i];
        probe.params[i] = p + h;
        let up = loss(&probe);
        probe.params[i] = p - h;
        let down = loss(&probe);
        probe.params[i] = p;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.data[i];
        let scale = numeric.abs().max(analytic.abs());
        if scale < GRADIENT_REL_FLOOR && !floored.contains(&name_of(i).name) {
            floored.push(name_of(i).name.clone());
        }
        let rel = (numeric - analytic).abs() / scale.max(GRADIENT_REL_FLOOR);
        if rel > max_rel {
            max_rel = rel;
            worst = (name_of(i).name.clone(), i - name_of(i).offset);
        }
    }
    GradientCheck {
        max_rel_error: max_rel,
        worst,
        n_params: model.params.len(),
        floored,
    }
}

/// Run `lto-health` in-process, with the program name prepended.
pub fn cli(args: &[&str]) -> i32 {
    lto_health::cli::run(std::iter::once("lto-health").chain(args.iter().copied()))
}

/// Seeded synth → analysis → train → evaluate → report run under `root`;
/// returns the path of `report.json`.
pub fn run_pipeline(root: &std::path::Path) -> std::path::PathBuf {
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();
    let (data, runs) = (p("data"), |s: &str| p(&format!("runs/{s}")));
    let model = format!("{}/model.json", runs("train"));
    let steps: Vec<Vec<String>> = vec![
        vec!["synth", "--cells", "3", "--cycles", "120", "--seed", "7", "--noise-sd", "0.5", "--out", &data],
        vec!["soh", "--in", &data, "--out", &runs("soh")],
        vec!["dva", "--in", &data, "--out", &runs("dva")],
        vec!["rul", "--in", &data, "--out", &runs("rul")],
        vec!["anomaly", "--in", &data, "--out", &runs("anomaly")],
        vec!["train", "--in", &data, "--epochs", "2", "--seed", "3", "--out", &runs("train")],
        vec!["evaluate", "--in", &data, "--model", &model, "--out", &runs("evaluate")],
        vec![
            "report", "--in", &runs("soh"), &runs("dva"), &runs("rul"), &runs("anomaly"), &runs("train"),
            &runs("evaluate"), "--out", &runs("report"),
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(str::to_owned).collect())
    .collect();
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        assert_eq!(cli(&args), 0, "{args:?}");
    }
    root.join("runs/report/report.json")
}

/// A JSON document with every `timing` member removed, at any depth.
pub fn without_timing(mut v: serde_json::Value) -> serde_json::Value {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.remove("timing");
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    strip(&mut v);
    v
}
