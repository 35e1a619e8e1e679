//! Command-line front end.
//!
//! One binary, one subcommand per pipeline stage. Every subcommand resolves
//! its configuration as defaults, then the `--config` file, then flags, and
//! writes that resolved configuration as `<subcommand>.config.json` next to
//! its outputs under `--out`. Wall-clock measurements always sit under a
//! top-level `timing` key.
//!
//! Exit codes: 0 success, 1 domain error (one line on stderr), 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::anomaly::{detect_anomalies, feedback_refine, AnomalyReport};
use crate::dva::{compute_dva, fade_series, window_capacity, DvaCurve};
use crate::health::{compute_soh, estimate_nominal, fit_quadratic, predict_soh, solve_end_of_life, NominalSource, SohPoint};
use crate::ingest::{
    build_features_multi, build_features_with, cycles_from_table, detect_schema, detect_trace_schema,
    parse_trace_file_name, read_table, trace_file_name, trace_from_table, write_cycles, write_trace,
    CycleRecord, DischargeTrace, FeatureMatrix,
};
use crate::metrics::{comparison_table, evaluate, timeit, ComparisonRow, EvalResult, RowSource};
use crate::model::{train, AdamWConfig, Checkpoint, ModelConfig, TrainOptions, TrainReport, TransformerRegressor};
use crate::synth::{self, generate_cells, generate_trace, DegradationProfile, TraceShape};

/// Name of the measured row in comparison tables.
pub const MODEL_ROW_NAME: &str = "transformer (this run)";
pub const REPORT_FORMAT: &str = "lto-health-report/1";

#[derive(Debug)]
enum CliError {
    Usage(String),
    Domain(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Domain(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn domain(msg: impl Into<String>) -> CliError {
    CliError::Domain(msg.into())
}

fn at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| domain(format!("{}: {e}", path.display()))
}

#[derive(Parser)]
#[command(name = "lto-health", version, about = "Battery health analytics for cycling data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load cycle tables, write them in canonical form and build model features.
    Ingest(IngestArgs),
    /// Generate synthetic cells and discharge traces.
    Synth(SynthArgs),
    /// Differential voltage curves and window capacities of discharge traces.
    Dva(DvaArgs),
    /// State-of-health series per cell.
    Soh(SohArgs),
    /// Quadratic SoH fit and end-of-life estimate per cell.
    Rul(RulArgs),
    /// Flag voltage anomalies in discharge traces.
    Anomaly(AnomalyArgs),
    /// Train the transformer regressor.
    Train(TrainArgs),
    /// Predict next-cycle capacity with a trained model.
    Predict(PredictArgs),
    /// Score a trained model and tabulate it against published methods.
    Evaluate(EvaluateArgs),
    /// Bundle earlier outputs into one report.
    Report(ReportArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Serialize, Default)]
struct Common {
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Flat JSON object of flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

/// Merge defaults, the config file and explicit flags, in that order.
fn resolve<F: Serialize, C: Serialize + DeserializeOwned + Default>(flags: &F, config: Option<&Path>) -> Result<C> {
    let Value::Object(mut merged) = serde_json::to_value(C::default())? else {
        unreachable!("configs serialize as objects")
    };
    let known: Vec<String> = merged.keys().cloned().collect();
    if let Some(path) = config {
        let text = fs::read_to_string(path).map_err(at(path))?;
        let Value::Object(file) = serde_json::from_str(&text).map_err(|e| domain(format!("{}: {e}", path.display())))?
        else {
            return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
        };
        for (k, v) in file {
            let key = k.replace('_', "-");
            if !known.contains(&key) {
                return Err(CliError::Usage(format!("{}: unknown key {k:?}", path.display())));
            }
            merged.insert(key, v);
        }
    }
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            let empty = v.is_null() || v.as_array().is_some_and(Vec::is_empty) || v == Value::Bool(false);
            if !empty {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn default_out() -> PathBuf {
    PathBuf::from(".")
}

fn prepare_out<C: Serialize>(out: &Path, name: &str, config: &C) -> Result<()> {
    fs::create_dir_all(out).map_err(at(out))?;
    write_json(&out.join(format!("{name}.config.json")), config)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(at(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(at(path))?;
    serde_json::from_str(&text).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(at(path))?))
}

fn require_inputs(inputs: &[PathBuf]) -> Result<()> {
    if inputs.is_empty() {
        return Err(CliError::Usage("--in is required".into()));
    }
    Ok(())
}

/// Sort key that orders `cell2` before `cell10`.
fn natural_key(s: &str) -> (String, u64, String) {
    let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = s.split_at(s.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0), s.to_string())
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(at(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(at(dir))?;
    paths.sort_by_key(|p| (natural_key(&file_stem(p)), file_name(p)));
    Ok(paths)
}

fn file_name(path: &Path) -> String {
    path.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

fn file_stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn is_csv(path: &Path) -> bool {
    path.is_file() && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

struct CellFile {
    path: PathBuf,
    records: Vec<CycleRecord>,
    skipped: usize,
}

/// Cycle tables named directly, plus every CSV in a named directory whose
/// header carries both capacity columns. Trace files are never cycle tables.
fn load_cells(inputs: &[PathBuf]) -> Result<Vec<CellFile>> {
    require_inputs(inputs)?;
    let mut cells = Vec::new();
    for input in inputs {
        let explicit = !input.is_dir();
        let candidates = if explicit { vec![input.clone()] } else { sorted_dir(input)? };
        for path in candidates {
            if !explicit && (!is_csv(&path) || parse_trace_file_name(&file_name(&path)).is_some()) {
                continue;
            }
            let table = read_table(File::open(&path).map_err(at(&path))?)
                .map_err(|e| domain(format!("{}: {e}", path.display())))?;
            let schema = match detect_schema(&table.header) {
                Ok(s) => s,
                Err(_) if !explicit => continue,
                Err(e) => return Err(domain(format!("{}: {e}", path.display()))),
            };
            let loaded = cycles_from_table(&table, &schema, &file_stem(&path))
                .map_err(|e| domain(format!("{}: {e}", path.display())))?;
            cells.push(CellFile {
                path,
                records: loaded.records,
                skipped: loaded.skipped,
            });
        }
    }
    if cells.is_empty() {
        return Err(domain("no cycle tables found in --in"));
    }
    Ok(cells)
}

struct TraceFile {
    path: PathBuf,
    trace: DischargeTrace,
    dropped: usize,
}

fn load_trace_file(path: &Path) -> Result<TraceFile> {
    let name = file_name(path);
    let (cell, cycle) = parse_trace_file_name(&name).unwrap_or_else(|| (file_stem(path), 0));
    let ctx = |e: crate::ingest::IngestError| domain(format!("{}: {e}", path.display()));
    let table = read_table(File::open(path).map_err(at(path))?).map_err(ctx)?;
    let schema = detect_trace_schema(&table.header).map_err(ctx)?;
    let loaded = trace_from_table(&table, &schema, &cell, cycle).map_err(ctx)?;
    Ok(TraceFile {
        path: path.to_path_buf(),
        trace: loaded.trace,
        dropped: loaded.dropped,
    })
}

/// Trace files named directly, plus every `<cell>_cycle<N>_discharge.csv`
/// in a named directory, ordered by cell then cycle.
fn load_traces(inputs: &[PathBuf]) -> Result<Vec<TraceFile>> {
    require_inputs(inputs)?;
    let mut traces = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for path in sorted_dir(input)? {
                if path.is_file() && parse_trace_file_name(&file_name(&path)).is_some() {
                    traces.push(load_trace_file(&path)?);
                }
            }
        } else {
            traces.push(load_trace_file(input)?);
        }
    }
    if traces.is_empty() {
        return Err(domain("no discharge traces found in --in"));
    }
    traces.sort_by(|a, b| {
        (natural_key(&a.trace.cell_id), a.trace.cycle_index).cmp(&(natural_key(&b.trace.cell_id), b.trace.cycle_index))
    });
    Ok(traces)
}

fn nominal_for(records: &[CycleRecord], given: Option<f64>) -> Result<(f64, NominalSource)> {
    match given {
        Some(n) => Ok((n, NominalSource::Given)),
        None => estimate_nominal(records)
            .map(|n| (n, NominalSource::Heuristic))
            .ok_or_else(|| domain("cannot estimate nominal capacity; pass --nominal")),
    }
}

// ---------------------------------------------------------------- synth

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Number of cells.
    #[arg(long)]
    cells: Option<usize>,
    /// Cycles per cell.
    #[arg(long)]
    cycles: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Nominal capacity in mAh.
    #[arg(long)]
    nominal: Option<f64>,
    /// Capacity noise SD in mAh.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Voltage noise SD in V added to traces.
    #[arg(long)]
    voltage_noise_sd: Option<f64>,
    /// Quadratic fade coefficient (per cycle²).
    #[arg(long, allow_negative_numbers = true)]
    fade_a: Option<f64>,
    /// Linear fade coefficient (per cycle).
    #[arg(long, allow_negative_numbers = true)]
    fade_b: Option<f64>,
    /// Write a discharge trace every this many cycles; 0 disables traces.
    #[arg(long)]
    trace_every: Option<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct SynthConfig {
    out: PathBuf,
    cells: usize,
    cycles: u32,
    seed: u64,
    nominal: f64,
    noise_sd: f64,
    voltage_noise_sd: f64,
    fade_a: f64,
    fade_b: f64,
    trace_every: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            cells: 8,
            cycles: synth::DEFAULT_N_CYCLES,
            seed: 0,
            nominal: synth::DEFAULT_NOMINAL_MAH,
            noise_sd: 0.0,
            voltage_noise_sd: 0.0,
            fade_a: synth::DEFAULT_FADE_A,
            fade_b: synth::DEFAULT_FADE_B,
            trace_every: 50,
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg: SynthConfig = resolve(&args, args.common.config.as_deref())?;
    prepare_out(&cfg.out, "synth", &cfg)?;
    let profile = DegradationProfile {
        nominal_capacity_mah: cfg.nominal,
        fade_a: cfg.fade_a,
        fade_b: cfg.fade_b,
        noise_sd_mah: cfg.noise_sd,
        n_cycles: cfg.cycles,
        seed: cfg.seed,
    };
    let shape = TraceShape {
        voltage_noise_sd_v: cfg.voltage_noise_sd,
        ..TraceShape::default()
    };
    let cells = generate_cells(&profile, cfg.cells)?;
    let mut files = Vec::new();
    for (k, records) in cells.iter().enumerate() {
        let cell_id = &records[0].cell_id;
        let name = format!("{cell_id}.csv");
        write_cycles(records, create(&cfg.out.join(&name))?)?;
        files.push(name);
        if cfg.trace_every == 0 {
            continue;
        }
        let cell_profile = DegradationProfile {
            seed: cfg.seed.wrapping_add(k as u64 + 1),
            ..profile.clone()
        };
        for cycle in (cfg.trace_every..=cfg.cycles).step_by(cfg.trace_every as usize) {
            let mut trace = generate_trace(&cell_profile, &shape, cycle)?;
            trace.cell_id.clone_from(cell_id);
            let name = trace_file_name(cell_id, cycle);
            write_trace(&trace, create(&cfg.out.join(&name))?)?;
            files.push(name);
        }
    }
    write_json(&cfg.out.join("synth.json"), &json!({ "profile": profile, "trace_shape": shape, "files": files }))?;
    say!("wrote {} files to {}", files.len(), cfg.out.display());
    Ok(())
}

// ---------------------------------------------------------------- ingest

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct IngestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Cycle tables or directories containing them.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Cycles per model input window.
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct IngestConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    window: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            window: DEFAULT_WINDOW,
        }
    }
}

/// Model input window used when none is given.
pub const DEFAULT_WINDOW: usize = 8;

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let cfg: IngestConfig = resolve(&args, args.common.config.as_deref())?;
    let cells = load_cells(&cfg.input)?;
    prepare_out(&cfg.out, "ingest", &cfg)?;
    let mut summary = Vec::new();
    for c in &cells {
        let cell_id = &c.records[0].cell_id;
        write_cycles(&c.records, create(&cfg.out.join(format!("{cell_id}.csv")))?)?;
        summary.push(json!({
            "cell": cell_id,
            "source": file_name(&c.path),
            "records": c.records.len(),
            "skipped": c.skipped,
        }));
    }
    let all: Vec<Vec<CycleRecord>> = cells.into_iter().map(|c| c.records).collect();
    let fm = build_features_multi(&all, cfg.window)?;
    write_json(&cfg.out.join("features.json"), &fm)?;
    write_json(
        &cfg.out.join("ingest.json"),
        &json!({
            "cells": summary,
            "window": cfg.window,
            "token_width": fm.token_width,
            "use_temperature": fm.scaling.use_temperature,
            "n_rows": fm.len(),
            "n_train": fm.train_indices.len(),
            "n_test": fm.test_indices.len(),
        }),
    )?;
    say!("{} cells, {} feature rows", all.len(), fm.len());
    Ok(())
}

// ---------------------------------------------------------------- dva

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DvaArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Trace files or directories containing `<cell>_cycle<N>_discharge.csv`.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Odd moving-average width applied to dQ/dV.
    #[arg(long)]
    smoothing: Option<usize>,
    /// Lower bound of the capacity window in V.
    #[arg(long)]
    window_lo: Option<f64>,
    /// Upper bound of the capacity window in V.
    #[arg(long)]
    window_hi: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct DvaConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    smoothing: usize,
    window_lo: f64,
    window_hi: f64,
}

impl Default for DvaConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            smoothing: crate::dva::DEFAULT_SMOOTHING,
            window_lo: synth::FADE_WINDOW_V.0,
            window_hi: synth::FADE_WINDOW_V.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DvaTraceSummary {
    cell: String,
    cycle: u32,
    peak_v: Option<f64>,
    peak_dqdv: Option<f64>,
    window_capacity: f64,
    dropped_samples: usize,
    curve_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FadeSeries {
    cell: String,
    /// `(cycle, window capacity in mAh)`
    series: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DvaOutput {
    smoothing: usize,
    window_lo: f64,
    window_hi: f64,
    traces: Vec<DvaTraceSummary>,
    fade: Vec<FadeSeries>,
}

fn write_dva_curve(curve: &DvaCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["v_mid", "dq_dv"])?;
    for p in &curve.points {
        w.write_record([p.v_mid.to_string(), p.dq_dv.to_string()])?;
    }
    w.flush().map_err(at(path))
}

fn cmd_dva(args: DvaArgs) -> Result<()> {
    let cfg: DvaConfig = resolve(&args, args.common.config.as_deref())?;
    let traces = load_traces(&cfg.input)?;
    prepare_out(&cfg.out, "dva", &cfg)?;
    let mut summaries = Vec::new();
    let mut by_cell: BTreeMap<(String, u64, String), Vec<DischargeTrace>> = BTreeMap::new();
    for t in &traces {
        let curve = compute_dva(&t.trace, cfg.smoothing)
            .map_err(|e| domain(format!("{}: {e}", t.path.display())))?;
        let curve_file = format!("{}_cycle{}_dva.csv", t.trace.cell_id, t.trace.cycle_index);
        write_dva_curve(&curve, &cfg.out.join(&curve_file))?;
        let peak = curve.peak();
        summaries.push(DvaTraceSummary {
            cell: t.trace.cell_id.clone(),
            cycle: t.trace.cycle_index,
            peak_v: peak.map(|p| p.v_mid),
            peak_dqdv: peak.map(|p| p.dq_dv),
            window_capacity: window_capacity(&t.trace, cfg.window_lo, cfg.window_hi),
            dropped_samples: t.dropped,
            curve_file,
        });
        by_cell.entry(natural_key(&t.trace.cell_id)).or_default().push(t.trace.clone());
    }
    let mut fade = Vec::new();
    for ((.., cell), cell_traces) in by_cell {
        fade.push(FadeSeries {
            series: fade_series(&cell_traces, cfg.window_lo, cfg.window_hi)?,
            cell,
        });
    }
    let out = DvaOutput {
        smoothing: cfg.smoothing,
        window_lo: cfg.window_lo,
        window_hi: cfg.window_hi,
        traces: summaries,
        fade,
    };
    write_json(&cfg.out.join("dva.json"), &out)?;
    for s in &out.traces {
        say!(
            "{} cycle {}: window capacity {:.3} mAh, peak {}",
            s.cell,
            s.cycle,
            s.window_capacity,
            s.peak_v.map_or("none".to_string(), |v| format!("at {v:.4} V"))
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- soh

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct SohArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Cycle tables or directories containing them.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Nominal capacity in mAh; estimated from the first cycles when absent.
    #[arg(long)]
    nominal: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct SohConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    nominal: Option<f64>,
}

impl Default for SohConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            nominal: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SohCell {
    cell: String,
    nominal: f64,
    nominal_source: NominalSource,
    overshoot: bool,
    points: Vec<SohPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SohOutput {
    cells: Vec<SohCell>,
}

fn cmd_soh(args: SohArgs) -> Result<()> {
    let cfg: SohConfig = resolve(&args, args.common.config.as_deref())?;
    let cells = load_cells(&cfg.input)?;
    prepare_out(&cfg.out, "soh", &cfg)?;
    let mut out = Vec::new();
    for c in &cells {
        let (nominal, source) = nominal_for(&c.records, cfg.nominal)?;
        let series = compute_soh(&c.records, nominal)?;
        let mut w = csv::Writer::from_writer(create(&cfg.out.join(format!("soh_{}.csv", series.cell_id)))?);
        w.write_record(["cycle", "soh_pct"])?;
        for p in &series.points {
            w.write_record([p.cycle.to_string(), p.soh_pct.to_string()])?;
        }
        w.flush()?;
        out.push(SohCell {
            cell: series.cell_id,
            nominal,
            nominal_source: source,
            overshoot: series.overshoot,
            points: series.points,
        });
    }
    let out = SohOutput { cells: out };
    write_json(&cfg.out.join("soh.json"), &out)?;
    for c in &out.cells {
        let (first, last) = (&c.points[0], &c.points[c.points.len() - 1]);
        say!("{}: SoH {:.3}% -> {:.3}% over {} cycles", c.cell, first.soh_pct, last.soh_pct, c.points.len());
    }
    Ok(())
}

// ---------------------------------------------------------------- rul

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct RulArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Cycle tables or directories containing them.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Nominal capacity in mAh; estimated from the first cycles when absent.
    #[arg(long)]
    nominal: Option<f64>,
    /// End-of-life SoH threshold in percent.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct RulConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    nominal: Option<f64>,
    threshold: f64,
}

impl Default for RulConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            nominal: None,
            threshold: crate::health::DEFAULT_EOL_THRESHOLD_PCT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitSummary {
    a: f64,
    b: f64,
    c: f64,
    /// In SoH percentage points.
    rmse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RulCell {
    cell: String,
    nominal: f64,
    nominal_source: NominalSource,
    fit: FitSummary,
    current_cycle: u32,
    status: RulStatus,
    /// `null` when the fitted curve does not reach the threshold.
    eol_cycle: Option<f64>,
    rul: Option<f64>,
    threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RulStatus {
    /// The fit crosses the threshold after the last observed cycle.
    Projected,
    /// The fit already crossed within the observed cycles; RUL is 0.
    AlreadyReached,
    NotReached,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RulOutput {
    threshold: f64,
    cells: Vec<RulCell>,
}

fn cmd_rul(args: RulArgs) -> Result<()> {
    let cfg: RulConfig = resolve(&args, args.common.config.as_deref())?;
    let cells = load_cells(&cfg.input)?;
    prepare_out(&cfg.out, "rul", &cfg)?;
    let mut out = Vec::new();
    for c in &cells {
        let (nominal, source) = nominal_for(&c.records, cfg.nominal)?;
        let series = compute_soh(&c.records, nominal)?;
        let fit = fit_quadratic(&series)?;
        let current = series.points[series.points.len() - 1].cycle;
        let est = solve_end_of_life(&fit, current, cfg.threshold);
        let (status, eol, rul) = match est.end_of_life_cycle {
            Some(eol) => (RulStatus::Projected, Some(eol), est.rul_cycles),
            None if predict_soh(&fit, current as f64) <= cfg.threshold => {
                let start = series.points[0].cycle.saturating_sub(1);
                match solve_end_of_life(&fit, start, cfg.threshold).end_of_life_cycle {
                    Some(eol) if eol <= current as f64 => (RulStatus::AlreadyReached, Some(eol), Some(0.0)),
                    _ => (RulStatus::NotReached, None, None),
                }
            }
            None => (RulStatus::NotReached, None, None),
        };
        out.push(RulCell {
            cell: series.cell_id,
            nominal,
            nominal_source: source,
            fit: FitSummary {
                a: fit.a,
                b: fit.b,
                c: fit.c,
                rmse: fit.rmse_pct,
            },
            current_cycle: current,
            status,
            eol_cycle: eol,
            rul,
            threshold: cfg.threshold,
        });
    }
    let out = RulOutput {
        threshold: cfg.threshold,
        cells: out,
    };
    write_json(&cfg.out.join("rul.json"), &out)?;
    for c in &out.cells {
        match c.eol_cycle {
            Some(eol) => say!("{}: end of life at cycle {eol:.2}, RUL {:.2}", c.cell, c.rul.unwrap_or(0.0)),
            None => say!("{}: threshold not reached", c.cell),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- anomaly

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct AnomalyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Trace files or directories containing `<cell>_cycle<N>_discharge.csv`.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Reference trace; a running median of each trace is used when absent.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Robust z-score at or above which a sample is flagged.
    #[arg(long)]
    threshold_z: Option<f64>,
    /// Also write each trace with flagged samples interpolated.
    #[arg(long)]
    refine: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct AnomalyConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    baseline: Option<PathBuf>,
    threshold_z: f64,
    refine: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            baseline: None,
            threshold_z: crate::anomaly::DEFAULT_THRESHOLD_Z,
            refine: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnomalyOutput {
    threshold_z: f64,
    reports: Vec<AnomalyReport>,
}

fn cmd_anomaly(args: AnomalyArgs) -> Result<()> {
    let cfg: AnomalyConfig = resolve(&args, args.common.config.as_deref())?;
    let traces = load_traces(&cfg.input)?;
    let baseline = cfg.baseline.as_deref().map(load_trace_file).transpose()?;
    prepare_out(&cfg.out, "anomaly", &cfg)?;
    let mut reports = Vec::new();
    for t in &traces {
        let report = detect_anomalies(&t.trace, baseline.as_ref().map(|b| &b.trace), cfg.threshold_z)?;
        say!("{} cycle {}: {} flagged", report.cell_id, report.cycle_index, report.flagged.len());
        if cfg.refine {
            let refined = feedback_refine(&report, &t.trace)?;
            let name = format!("{}_cycle{}_refined.csv", refined.cell_id, refined.cycle_index);
            write_trace(&refined, create(&cfg.out.join(name))?)?;
        }
        reports.push(report);
    }
    write_json(
        &cfg.out.join("anomaly.json"),
        &AnomalyOutput {
            threshold_z: cfg.threshold_z,
            reports,
        },
    )
}

// ---------------------------------------------------------------- train

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Cycle tables or directories containing them.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Cycles per model input window.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Seeds initialization, batch order and dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// Compute per-example gradients on all cores; results are unchanged.
    #[arg(long)]
    parallel: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct TrainConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    window: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    seed: u64,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    d_ff: usize,
    max_seq_len: usize,
    dropout: f64,
    parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::new(1);
        let t = TrainOptions::default();
        Self {
            out: default_out(),
            input: Vec::new(),
            window: DEFAULT_WINDOW,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            seed: t.seed,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            dropout: m.dropout_p,
            parallel: false,
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<TransformerRegressor> {
    let ckpt = Checkpoint::read(File::open(path).map_err(at(path))?)
        .map_err(|e| domain(format!("{}: {e}", path.display())))?;
    Ok(ckpt.into_model()?)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg: TrainConfig = resolve(&args, args.common.config.as_deref())?;
    let cells = load_cells(&cfg.input)?;
    let all: Vec<Vec<CycleRecord>> = cells.into_iter().map(|c| c.records).collect();
    let fm = build_features_multi(&all, cfg.window)?;
    let config = ModelConfig {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        d_ff: cfg.d_ff,
        max_seq_len: cfg.max_seq_len,
        dropout_p: cfg.dropout,
        input_dim: fm.token_width,
    };
    let mut model = TransformerRegressor::new(config, cfg.seed)?;
    let options = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        seed: cfg.seed,
        parallel: cfg.parallel,
    };
    prepare_out(&cfg.out, "train", &cfg)?;
    let report = train(&mut model, &fm, &options)?;
    for e in &report.epochs {
        say!("epoch {}: train MSE {:.4}, test MSE {:.4}", e.epoch, e.train_mse, e.test_mse);
    }
    Checkpoint::from_model(&model).write(create(&cfg.out.join("model.json"))?)?;
    write_json(&cfg.out.join("train_report.json"), &report)
}

// ---------------------------------------------------------------- predict

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct PredictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Cycle tables or directories containing them.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct PredictConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    model: Option<PathBuf>,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            model: None,
        }
    }
}

/// Features for `inputs` under the scaling the model was trained with.
fn model_features(model_path: Option<&Path>, inputs: &[PathBuf]) -> Result<(TransformerRegressor, FeatureMatrix, Vec<Vec<CycleRecord>>)> {
    let path = model_path.ok_or_else(|| CliError::Usage("--model is required".into()))?;
    let model = load_checkpoint(path)?;
    let scaling = model
        .scaling
        .clone()
        .ok_or_else(|| domain(format!("{}: checkpoint has no feature scaling", path.display())))?;
    let cells: Vec<Vec<CycleRecord>> = load_cells(inputs)?.into_iter().map(|c| c.records).collect();
    let fm = build_features_with(&cells, &scaling)?;
    Ok((model, fm, cells))
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let cfg: PredictConfig = resolve(&args, args.common.config.as_deref())?;
    let (model, fm, _) = model_features(cfg.model.as_deref(), &cfg.input)?;
    prepare_out(&cfg.out, "predict", &cfg)?;
    let (preds, seconds) = timeit(|| model.predict(&fm));
    let preds = preds?;
    let test: std::collections::HashSet<usize> = fm.test_indices.iter().copied().collect();
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("predictions.csv"))?);
    w.write_record(["cell", "label_cycle", "split", "actual_mah", "predicted_mah"])?;
    for (i, p) in preds.iter().enumerate() {
        let o = &fm.origins[i];
        w.write_record([
            o.cell_id.clone(),
            o.label_cycle.to_string(),
            (if test.contains(&i) { "test" } else { "train" }).to_string(),
            fm.labels[i].to_string(),
            p.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(
        &cfg.out.join("predict.json"),
        &json!({ "n_rows": preds.len(), "timing": { "inference_seconds": seconds } }),
    )?;
    say!("{} predictions", preds.len());
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Cycle tables or directories containing them.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Nominal capacity in mAh for MAE(%); estimated when absent.
    #[arg(long)]
    nominal: Option<f64>,
    /// Rows to score: `test` (held-out 20 %) or `all`.
    #[arg(long)]
    split: Option<String>,
    /// Sequences per inference batch.
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct EvaluateConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
    model: Option<PathBuf>,
    nominal: Option<f64>,
    split: String,
    batch_size: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
            model: None,
            nominal: None,
            split: "test".into(),
            batch_size: TrainOptions::default().batch_size,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvalSection {
    split: String,
    nominal: f64,
    nominal_source: NominalSource,
    /// An `EvalResult` without its timing, which sits under `timing`.
    metrics: Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetricsOutput {
    evaluation: EvalSection,
    timing: Value,
}

/// Split an `EvalResult` into its deterministic part and its timing.
fn split_timing(result: &EvalResult) -> Result<(Value, Value)> {
    let mut v = serde_json::to_value(result)?;
    let timing = v.as_object_mut().and_then(|m| m.remove("timing")).unwrap_or(Value::Null);
    Ok((v, timing))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg: EvaluateConfig = resolve(&args, args.common.config.as_deref())?;
    if cfg.split != "test" && cfg.split != "all" {
        return Err(CliError::Usage(format!("--split must be test or all, got {:?}", cfg.split)));
    }
    if cfg.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let (model, fm, cells) = model_features(cfg.model.as_deref(), &cfg.input)?;
    let rows: Vec<usize> = if cfg.split == "test" { fm.test_indices.clone() } else { (0..fm.len()).collect() };
    if rows.is_empty() {
        return Err(domain("no rows to evaluate"));
    }
    let (nominal, nominal_source) = match cfg.nominal {
        Some(n) => (n, NominalSource::Given),
        None => (
            cells
                .iter()
                .filter_map(|c| estimate_nominal(c))
                .reduce(f64::max)
                .ok_or_else(|| domain("cannot estimate nominal capacity; pass --nominal"))?,
            NominalSource::Heuristic,
        ),
    };
    prepare_out(&cfg.out, "evaluate", &cfg)?;
    let (preds, seconds) = timeit(|| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(cfg.batch_size) {
            out.extend(model.predict_rows(&fm, chunk)?);
        }
        Ok(out)
    });
    let preds = preds?;
    let truth: Vec<f64> = rows.iter().map(|&i| fm.labels[i]).collect();
    let n_batches = rows.len().div_ceil(cfg.batch_size);
    let result = evaluate(&truth, &preds, (seconds, n_batches), model.parameter_count(), Some(nominal))?;
    let (metrics, timing) = split_timing(&result)?;
    write_json(
        &cfg.out.join("metrics.json"),
        &MetricsOutput {
            evaluation: EvalSection {
                split: cfg.split.clone(),
                nominal,
                nominal_source,
                metrics,
            },
            timing,
        },
    )?;
    let table = comparison_table(&[ComparisonRow::measured(MODEL_ROW_NAME, result.mae_pct, seconds)], true)?;
    let text = table.render();
    fs::write(cfg.out.join("comparison.txt"), &text).map_err(at(&cfg.out))?;
    say!("MSE {:.4} mAh², MAE {:.4} mAh ({:.4}%), R² {:.4}", result.mse, result.mae, result.mae_pct, result.r2);
    say!("{}", text.trim_end());
    Ok(())
}

// ---------------------------------------------------------------- report

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: Common,
    /// Directories holding earlier outputs; searched recursively.
    #[arg(long = "in", num_args = 1..)]
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct ReportConfig {
    out: PathBuf,
    #[serde(rename = "in")]
    input: Vec<PathBuf>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            out: default_out(),
            input: Vec::new(),
        }
    }
}

/// Output files `report` understands.
const REPORT_INPUTS: [&str; 6] = ["soh.json", "dva.json", "rul.json", "anomaly.json", "train_report.json", "metrics.json"];

/// Every file under `dir`, depth first in name order, skipping `skip`.
fn walk(dir: &Path, skip: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for path in sorted_dir(dir)? {
        if path.is_dir() {
            if fs::canonicalize(&path).ok() != fs::canonicalize(skip).ok() {
                walk(&path, skip, out)?;
            }
        } else {
            out.push(path);
        }
    }
    Ok(())
}

fn absent() -> Value {
    json!({ "status": "absent" })
}

fn present(mut body: Map<String, Value>) -> Value {
    body.insert("status".into(), json!("present"));
    Value::Object(body)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let cfg: ReportConfig = resolve(&args, args.common.config.as_deref())?;
    require_inputs(&cfg.input)?;
    let mut files = Vec::new();
    for dir in &cfg.input {
        if !dir.is_dir() {
            return Err(domain(format!("{}: not a directory", dir.display())));
        }
        walk(dir, &cfg.out, &mut files)?;
    }
    let named = |name: &str| -> Vec<&PathBuf> { files.iter().filter(|p| file_name(p) == name).collect() };
    if REPORT_INPUTS.iter().all(|n| named(n).is_empty()) {
        return Err(domain("no run outputs found in --in"));
    }

    let soh: Vec<SohCell> = named("soh.json")
        .into_iter()
        .map(|p| read_json::<SohOutput>(p).map(|o| o.cells))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let dva: Vec<DvaOutput> = named("dva.json").into_iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let rul: Vec<RulCell> = named("rul.json")
        .into_iter()
        .map(|p| read_json::<RulOutput>(p).map(|o| o.cells))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let anomaly: Vec<AnomalyReport> = named("anomaly.json")
        .into_iter()
        .map(|p| read_json::<AnomalyOutput>(p).map(|o| o.reports))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let training: Option<TrainReport> = named("train_report.json").first().map(|p| read_json(p)).transpose()?;
    let metrics: Option<MetricsOutput> = named("metrics.json").first().map(|p| read_json(p)).transpose()?;

    let mut timing = Map::new();
    let mut text = String::new();
    let _ = writeln!(text, "Battery health report\n");

    let soh_section = if soh.is_empty() {
        let _ = writeln!(text, "SoH: absent\n");
        absent()
    } else {
        let _ = writeln!(text, "SoH");
        let cells: Vec<Value> = soh
            .iter()
            .map(|c| {
                let first = c.points.first().map(|p| p.soh_pct);
                let last = c.points.last().map(|p| p.soh_pct);
                let _ = writeln!(
                    text,
                    "  {:<10} nominal {:.1} mAh  SoH {} % -> {} %",
                    c.cell,
                    c.nominal,
                    fmt_opt(first, 3),
                    fmt_opt(last, 3)
                );
                json!({
                    "cell": c.cell,
                    "nominal": c.nominal,
                    "nominal_source": c.nominal_source,
                    "n_points": c.points.len(),
                    "first_soh_pct": first,
                    "last_soh_pct": last,
                    "overshoot": c.overshoot,
                    "curve_file": "soh_curves.csv",
                })
            })
            .collect();
        text.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "cycle", "soh_pct"])?;
        for c in &soh {
            for p in &c.points {
                w.write_record([c.cell.clone(), p.cycle.to_string(), p.soh_pct.to_string()])?;
            }
        }
        fs::create_dir_all(&cfg.out).map_err(at(&cfg.out))?;
        fs::write(cfg.out.join("soh_curves.csv"), w.into_inner().map_err(|e| domain(e.to_string()))?)
            .map_err(at(&cfg.out))?;
        present(Map::from_iter([("cells".to_string(), json!(cells))]))
    };

    let dva_section = if dva.is_empty() {
        let _ = writeln!(text, "DVA window capacity: absent\n");
        absent()
    } else {
        let fade: Vec<&FadeSeries> = dva.iter().flat_map(|d| &d.fade).collect();
        let traces: Vec<&DvaTraceSummary> = dva.iter().flat_map(|d| &d.traces).collect();
        let (lo, hi) = (dva[0].window_lo, dva[0].window_hi);
        let _ = writeln!(text, "DVA window capacity in [{lo}, {hi}] V");
        for f in &fade {
            let series: Vec<String> = f.series.iter().map(|(c, q)| format!("{c}:{q:.2}")).collect();
            let _ = writeln!(text, "  {:<10} {}", f.cell, series.join(" "));
        }
        text.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "cycle", "v_mid", "dq_dv"])?;
        for t in &traces {
            let Some(path) = files.iter().find(|p| file_name(p) == t.curve_file) else {
                continue;
            };
            let table = read_table(File::open(path).map_err(at(path))?)?;
            for row in &table.rows {
                let mut rec = vec![t.cell.clone(), t.cycle.to_string()];
                rec.extend(row.iter().cloned());
                w.write_record(rec)?;
            }
        }
        fs::create_dir_all(&cfg.out).map_err(at(&cfg.out))?;
        fs::write(cfg.out.join("dva_curves.csv"), w.into_inner().map_err(|e| domain(e.to_string()))?)
            .map_err(at(&cfg.out))?;
        let peaks: Vec<Value> = traces
            .iter()
            .map(|t| json!({ "cell": t.cell, "cycle": t.cycle, "peak_v": t.peak_v, "peak_dqdv": t.peak_dqdv }))
            .collect();
        present(Map::from_iter([
            ("window_lo".to_string(), json!(lo)),
            ("window_hi".to_string(), json!(hi)),
            ("fade".to_string(), json!(fade)),
            ("peaks".to_string(), json!(peaks)),
            ("curve_file".to_string(), json!("dva_curves.csv")),
        ]))
    };

    let rul_section = if rul.is_empty() {
        let _ = writeln!(text, "RUL: absent\n");
        absent()
    } else {
        let _ = writeln!(text, "RUL");
        for r in &rul {
            let _ = writeln!(
                text,
                "  {:<10} end of life {}  RUL {} cycles  ({:?}, threshold {} %)",
                r.cell,
                fmt_opt(r.eol_cycle, 2),
                fmt_opt(r.rul, 2),
                r.status,
                r.threshold
            );
        }
        text.push('\n');
        present(Map::from_iter([("cells".to_string(), json!(rul))]))
    };

    let anomaly_section = if anomaly.is_empty() {
        let _ = writeln!(text, "Anomalies: absent\n");
        absent()
    } else {
        let total: usize = anomaly.iter().map(|r| r.flagged.len()).sum();
        let _ = writeln!(text, "Anomalies: {total} flagged samples in {} traces\n", anomaly.len());
        let counts: Vec<Value> = anomaly
            .iter()
            .map(|r| {
                json!({
                    "cell": r.cell_id,
                    "cycle": r.cycle_index,
                    "n_flagged": r.flagged.len(),
                    "degenerate_scale": r.degenerate_scale,
                })
            })
            .collect();
        present(Map::from_iter([
            ("total_flagged".to_string(), json!(total)),
            ("traces".to_string(), json!(counts)),
        ]))
    };

    let training_section = match &training {
        None => {
            let _ = writeln!(text, "Training: absent\n");
            absent()
        }
        Some(t) => {
            let _ = writeln!(text, "Training ({} parameters)", t.parameter_count);
            for e in &t.epochs {
                let _ = writeln!(text, "  epoch {}  train MSE {:.4}  test MSE {:.4}", e.epoch, e.train_mse, e.test_mse);
            }
            text.push('\n');
            timing.insert("training".into(), json!(t.timing));
            let mut v = serde_json::to_value(t)?;
            if let Some(m) = v.as_object_mut() {
                m.remove("timing");
            }
            let Value::Object(m) = v else { unreachable!() };
            present(m)
        }
    };

    let (metrics_section, comparison_section) = match &metrics {
        None => {
            let _ = writeln!(text, "Metrics: absent\n");
            (absent(), absent())
        }
        Some(m) => {
            let e = &m.evaluation;
            let get = |k: &str| e.metrics.get(k).and_then(Value::as_f64);
            let _ = writeln!(
                text,
                "Metrics ({} split)\n  MSE {} mAh²  MAE {} mAh  MAE {} % of nominal  R² {}\n",
                e.split,
                fmt_opt(get("mse"), 4),
                fmt_opt(get("mae"), 4),
                fmt_opt(get("mae_pct"), 4),
                fmt_opt(get("r2"), 4)
            );
            timing.insert("evaluation".into(), m.timing.clone());
            let measured_time = m.timing.get("inference_seconds").and_then(Value::as_f64).unwrap_or(0.0);
            let mut rows = Vec::new();
            if let Some(mae_pct) = get("mae_pct") {
                rows.push(ComparisonRow::measured(MODEL_ROW_NAME, mae_pct, measured_time));
            }
            let table = comparison_table(&rows, true)?;
            let _ = writeln!(text, "Comparison ({}, time in seconds)", table.mae_basis);
            text.push_str(&table.render());
            let json_rows: Vec<Value> = table
                .rows
                .iter()
                .map(|r| {
                    let time = (r.source == RowSource::Published).then_some(r.time_seconds);
                    json!({ "method": r.method_name, "mae_pct": r.mae_pct, "time_seconds": time, "source": r.source })
                })
                .collect();
            timing.insert("comparison_measured_seconds".into(), json!(measured_time));
            let mut body = Map::new();
            body.insert("split".into(), json!(e.split));
            body.insert("nominal".into(), json!(e.nominal));
            body.insert("nominal_source".into(), json!(e.nominal_source));
            body.insert("result".into(), e.metrics.clone());
            (
                present(body),
                present(Map::from_iter([
                    ("mae_basis".to_string(), json!(table.mae_basis)),
                    ("time_unit".to_string(), json!("seconds")),
                    ("rows".to_string(), json!(json_rows)),
                ])),
            )
        }
    };

    let report = json!({
        "format": REPORT_FORMAT,
        "sections": {
            "soh": soh_section,
            "dva": dva_section,
            "rul": rul_section,
            "anomaly": anomaly_section,
            "training": training_section,
            "metrics": metrics_section,
            "comparison": comparison_section,
        },
        "timing": timing,
    });
    fs::create_dir_all(&cfg.out).map_err(at(&cfg.out))?;
    write_json(&cfg.out.join("report.config.json"), &cfg)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    fs::write(cfg.out.join("report.txt"), &text).map_err(at(&cfg.out))?;
    say!("{}", text.trim_end());
    Ok(())
}

// ---------------------------------------------------------------- entry

/// Parse `args` (including the program name) and run the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Dva(a) => cmd_dva(a),
        Command::Soh(a) => cmd_soh(a),
        Command::Rul(a) => cmd_rul(a),
        Command::Anomaly(a) => cmd_anomaly(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            2
        }
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            1
        }
    }
}
