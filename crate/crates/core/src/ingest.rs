//! Delimited-text ingestion of cycle logs and discharge traces.
//!
//! Column roles are detected from the header by canonical form: the cell is
//! lowercased and every non-alphanumeric character is removed, so
//! `Cap_Chg(mAh)`, `cap chg mah` and `CAP-CHG-MAH` all become `capchgmah`.
//!
//! | role               | canonical form must ...                                   |
//! |--------------------|-----------------------------------------------------------|
//! | charge capacity    | contain `cap`, contain `chg` or `charge`, not be discharge |
//! | discharge capacity | contain `cap`, contain `dchg` or `discharge`              |
//! | voltage            | contain `voltage`, or be exactly `v`                      |
//! | cycle              | contain `cycle`                                           |
//! | temperature        | contain `temp`                                            |
//! | energy             | contain `energy`                                          |
//! | current            | contain `current`, or be exactly `i`                      |
//!
//! The first matching column wins. Two columns with the same canonical form
//! competing for one role is an [`IngestError::Ambiguity`].

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of skipped rows above which a cycle load is rejected.
pub const MAX_SKIP_FRACTION: f64 = 0.5;

/// Fraction of each cell's feature rows assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("ambiguous header: columns {first} and {second} both canonicalize to `{canonical}` for role {role}")]
    Ambiguity {
        role: &'static str,
        canonical: String,
        first: usize,
        second: usize,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("insufficient data: need at least {needed} records, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Lowercase and strip every non-alphanumeric character.
pub fn canonicalize(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Charge,
    Discharge,
    Voltage,
    Cycle,
    Temperature,
    Energy,
    Current,
}

impl Role {
    const ALL: [Role; 7] = [
        Role::Charge,
        Role::Discharge,
        Role::Voltage,
        Role::Cycle,
        Role::Temperature,
        Role::Energy,
        Role::Current,
    ];

    fn name(self) -> &'static str {
        match self {
            Role::Charge => "charge_capacity",
            Role::Discharge => "discharge_capacity",
            Role::Voltage => "voltage",
            Role::Cycle => "cycle",
            Role::Temperature => "temperature",
            Role::Energy => "energy",
            Role::Current => "current",
        }
    }

    fn matches(self, canon: &str) -> bool {
        let is_discharge = canon.contains("dchg") || canon.contains("discharge");
        let is_capacity = canon.contains("cap");
        match self {
            Role::Charge => {
                is_capacity
                    && !is_discharge
                    && (canon.contains("chg") || canon.contains("charge"))
            }
            Role::Discharge => is_capacity && is_discharge,
            Role::Voltage => canon.contains("voltage") || canon == "v",
            Role::Cycle => canon.contains("cycle"),
            Role::Temperature => canon.contains("temp"),
            Role::Energy => canon.contains("energy"),
            Role::Current => canon.contains("current") || canon == "i",
        }
    }
}

/// Resolves each role to the first matching column, failing on identical
/// canonical forms racing for the same role.
fn resolve_roles(header: &[String]) -> Result<Vec<(Role, usize)>> {
    let canon: Vec<String> = header.iter().map(|h| canonicalize(h)).collect();
    let mut taken = vec![false; header.len()];
    let mut resolved = Vec::new();
    for role in Role::ALL {
        let hits: Vec<usize> = (0..canon.len())
            .filter(|&i| !taken[i] && role.matches(&canon[i]))
            .collect();
        let Some(&first) = hits.first() else { continue };
        if let Some(&second) = hits[1..].iter().find(|&&j| canon[j] == canon[first]) {
            return Err(IngestError::Ambiguity {
                role: role.name(),
                canonical: canon[first].clone(),
                first,
                second,
            });
        }
        taken[first] = true;
        resolved.push((role, first));
    }
    Ok(resolved)
}

/// Column layout of a cycle log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub charge_capacity_col: usize,
    pub discharge_capacity_col: usize,
    pub voltage_col: Option<usize>,
    pub cycle_col: Option<usize>,
    /// Metadata columns. Recognized roles use their role name
    /// (`temperature`, `energy`, `current`); anything else keeps its header.
    pub extras: Vec<(String, usize)>,
}

impl ColumnSchema {
    pub fn extra(&self, name: &str) -> Option<usize> {
        self.extras.iter().find(|(n, _)| n == name).map(|&(_, i)| i)
    }

    fn width(&self) -> usize {
        let mut w = self.charge_capacity_col.max(self.discharge_capacity_col);
        for i in self.voltage_col.iter().chain(self.cycle_col.iter()) {
            w = w.max(*i);
        }
        w + 1
    }
}

/// Detect the cycle-log schema from a header row.
pub fn detect_schema<S: AsRef<str>>(header: &[S]) -> Result<ColumnSchema> {
    if header.is_empty() {
        return Err(IngestError::Schema("empty header".into()));
    }
    let header: Vec<String> = header.iter().map(|s| s.as_ref().to_string()).collect();
    let resolved = resolve_roles(&header)?;
    let find = |role: Role| resolved.iter().find(|(r, _)| *r == role).map(|&(_, i)| i);

    let charge = find(Role::Charge)
        .ok_or_else(|| IngestError::Schema("no charge-capacity column".into()))?;
    let discharge = find(Role::Discharge)
        .ok_or_else(|| IngestError::Schema("no discharge-capacity column".into()))?;

    let mut extras = Vec::new();
    for (i, name) in header.iter().enumerate() {
        if let Some(&(role, _)) = resolved.iter().find(|&&(_, j)| j == i) {
            if matches!(role, Role::Temperature | Role::Energy | Role::Current) {
                extras.push((role.name().to_string(), i));
            }
        } else {
            extras.push((name.clone(), i));
        }
    }

    Ok(ColumnSchema {
        charge_capacity_col: charge,
        discharge_capacity_col: discharge,
        voltage_col: find(Role::Voltage),
        cycle_col: find(Role::Cycle),
        extras,
    })
}

/// Column layout of a discharge trace: a voltage column plus one capacity
/// column (discharge capacity preferred over charge capacity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSchema {
    pub voltage_col: usize,
    pub capacity_col: usize,
}

pub fn detect_trace_schema<S: AsRef<str>>(header: &[S]) -> Result<TraceSchema> {
    let header: Vec<String> = header.iter().map(|s| s.as_ref().to_string()).collect();
    let resolved = resolve_roles(&header)?;
    let find = |role: Role| resolved.iter().find(|(r, _)| *r == role).map(|&(_, i)| i);
    let voltage_col =
        find(Role::Voltage).ok_or_else(|| IngestError::Schema("no voltage column".into()))?;
    let capacity_col = find(Role::Discharge)
        .or_else(|| find(Role::Charge))
        .ok_or_else(|| IngestError::Schema("no capacity column".into()))?;
    Ok(TraceSchema {
        voltage_col,
        capacity_col,
    })
}

/// One charge/discharge cycle of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cell_id: String,
    pub cycle_index: u32,
    pub cap_chg_mah: f64,
    pub cap_dchg_mah: f64,
    pub energy_mwh: Option<f64>,
    pub temperature_c: Option<f64>,
}

/// Instantaneous (voltage, cumulative capacity) samples of one discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DischargeTrace {
    pub cell_id: String,
    pub cycle_index: u32,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub voltage_v: f64,
    pub capacity_mah: f64,
}

impl Sample {
    pub fn new(voltage_v: f64, capacity_mah: f64) -> Self {
        Self {
            voltage_v,
            capacity_mah,
        }
    }
}

impl DischargeTrace {
    pub fn new(cell_id: impl Into<String>, cycle_index: u32, samples: Vec<Sample>) -> Self {
        Self {
            cell_id: cell_id.into(),
            cycle_index,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_capacity(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => (b.capacity_mah - a.capacity_mah).abs(),
            _ => 0.0,
        }
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.voltage_v).collect()
    }
}

/// Records loaded from one file, with the number of rejected rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCycles {
    pub records: Vec<CycleRecord>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub trace: DischargeTrace,
    pub dropped: usize,
}

/// A parsed delimited table. Lines starting with `#` are comments; the
/// delimiter is a tab when the header has tabs and no commas, else a comma.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table<R: Read>(mut source: R) -> Result<Table> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| IngestError::Schema("no header row".into()))?;
    let delimiter = if first.contains('\t') && !first.contains(',') {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn finite_field(row: &[String], col: usize) -> Option<f64> {
    row.get(col)?.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn capacity_field(row: &[String], col: usize) -> Option<f64> {
    finite_field(row, col).filter(|v| *v >= 0.0)
}

/// Load cycle records from a delimited stream whose header matches `schema`.
///
/// Rows with a missing or non-numeric mandatory field, a negative capacity,
/// or a cycle index that does not advance are skipped. More than half the
/// rows skipped is treated as a wrong schema.
pub fn load_cycles<R: Read>(source: R, schema: &ColumnSchema, cell_id: &str) -> Result<LoadedCycles> {
    let table = read_table(source)?;
    cycles_from_table(&table, schema, cell_id)
}

pub fn cycles_from_table(table: &Table, schema: &ColumnSchema, cell_id: &str) -> Result<LoadedCycles> {
    let width = schema.width();
    let temp_col = schema.extra("temperature");
    let energy_col = schema.extra("energy");
    let mut records: Vec<CycleRecord> = Vec::with_capacity(table.rows.len());
    let mut skipped = 0;
    for row in &table.rows {
        let parsed = (|| {
            if row.len() < width {
                return None;
            }
            let chg = capacity_field(row, schema.charge_capacity_col)?;
            let dchg = capacity_field(row, schema.discharge_capacity_col)?;
            let cycle = match schema.cycle_col {
                Some(c) => {
                    let v = finite_field(row, c)?;
                    if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                        return None;
                    }
                    v as u32
                }
                None => records.last().map_or(1, |r| r.cycle_index + 1),
            };
            if records.last().is_some_and(|r| cycle <= r.cycle_index) {
                return None;
            }
            Some(CycleRecord {
                cell_id: cell_id.to_string(),
                cycle_index: cycle,
                cap_chg_mah: chg,
                cap_dchg_mah: dchg,
                energy_mwh: energy_col.and_then(|c| capacity_field(row, c)),
                temperature_c: temp_col.and_then(|c| finite_field(row, c)),
            })
        })();
        match parsed {
            Some(r) => records.push(r),
            None => skipped += 1,
        }
    }
    let total = table.rows.len();
    if total > 0 && skipped as f64 > MAX_SKIP_FRACTION * total as f64 {
        return Err(IngestError::Parse(format!(
            "{skipped} of {total} rows rejected; the column schema is probably wrong"
        )));
    }
    Ok(LoadedCycles { records, skipped })
}

/// Load a discharge trace. Samples whose capacity falls below the running
/// maximum are dropped so capacity is non-decreasing along the trace.
pub fn load_trace<R: Read>(
    source: R,
    schema: &TraceSchema,
    cell_id: &str,
    cycle_index: u32,
) -> Result<LoadedTrace> {
    let table = read_table(source)?;
    trace_from_table(&table, schema, cell_id, cycle_index)
}

pub fn trace_from_table(
    table: &Table,
    schema: &TraceSchema,
    cell_id: &str,
    cycle_index: u32,
) -> Result<LoadedTrace> {
    let mut samples: Vec<Sample> = Vec::with_capacity(table.rows.len());
    let mut dropped = 0;
    for row in &table.rows {
        let (Some(v), Some(q)) = (
            finite_field(row, schema.voltage_col),
            capacity_field(row, schema.capacity_col),
        ) else {
            dropped += 1;
            continue;
        };
        if samples.last().is_some_and(|s| q < s.capacity_mah) {
            dropped += 1;
            continue;
        }
        samples.push(Sample::new(v, q));
    }
    if samples.len() < 2 {
        return Err(IngestError::Parse(format!(
            "trace has {} valid samples, need at least 2",
            samples.len()
        )));
    }
    Ok(LoadedTrace {
        trace: DischargeTrace::new(cell_id, cycle_index, samples),
        dropped,
    })
}

pub const CYCLE_HEADER: [&str; 5] = [
    "Cycle",
    "Cap_Chg(mAh)",
    "Cap_DChg(mAh)",
    "Energy(mWh)",
    "Temperature(C)",
];

pub const TRACE_HEADER: [&str; 2] = ["Voltage(V)", "Cap_DChg(mAh)"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write records in the format [`load_cycles`] reads back losslessly.
pub fn write_cycles<W: Write>(records: &[CycleRecord], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CYCLE_HEADER)?;
    for r in records {
        w.write_record([
            r.cycle_index.to_string(),
            r.cap_chg_mah.to_string(),
            r.cap_dchg_mah.to_string(),
            opt(r.energy_mwh),
            opt(r.temperature_c),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<W: Write>(trace: &DischargeTrace, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRACE_HEADER)?;
    for s in &trace.samples {
        w.write_record([s.voltage_v.to_string(), s.capacity_mah.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// File name used for trace files: `<cell_id>_cycle<N>_discharge.csv`.
pub fn trace_file_name(cell_id: &str, cycle_index: u32) -> String {
    format!("{cell_id}_cycle{cycle_index}_discharge.csv")
}

/// Inverse of [`trace_file_name`].
pub fn parse_trace_file_name(name: &str) -> Option<(String, u32)> {
    let stem = name.strip_suffix("_discharge.csv")?;
    let pos = stem.rfind("_cycle")?;
    let cycle = stem[pos + "_cycle".len()..].parse().ok()?;
    Some((stem[..pos].to_string(), cycle))
}

/// Closed interval used for min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for v in values {
            min = min.min(v);
            max = max.max(v);
        }
        Self { min, max }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Maps into `[0, 1]`; a zero-width range maps everything to 0.
    pub fn normalize(&self, x: f64) -> f64 {
        let r = self.range();
        if r > 0.0 {
            (x - self.min) / r
        } else {
            0.0
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.min + y * self.range().max(0.0)
    }
}

/// Feature scaling fitted on one dataset and reusable on another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub window: usize,
    pub use_temperature: bool,
    /// One entry per token feature: chg, dchg, [temperature], cycle.
    pub features: Vec<MinMax>,
    pub label: MinMax,
}

/// Where a feature row came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowOrigin {
    pub cell_id: String,
    /// Cycle index whose charge capacity is the label.
    pub label_cycle: u32,
}

/// Windowed, normalized model inputs with capacity labels.
///
/// Each row is `window` tokens of `token_width` features laid out
/// token-major. Token features are normalized charge capacity, discharge
/// capacity, temperature (only when every record has one) and cycle index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    /// Charge capacity of the cycle after each window, in mAh.
    pub labels: Vec<f64>,
    pub scaling: Scaling,
    pub token_width: usize,
    pub origins: Vec<RowOrigin>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl FeatureMatrix {
    pub fn window(&self) -> usize {
        self.scaling.window
    }

    /// Row `i` as a token sequence.
    pub fn sequence(&self, i: usize) -> Vec<Vec<f64>> {
        self.rows[i]
            .chunks(self.token_width)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Label mapped onto the charge-capacity feature's scale.
    pub fn normalized_label(&self, i: usize) -> f64 {
        self.scaling.label.normalize(self.labels[i])
    }

    /// Undo normalization of a full row back to physical units.
    pub fn denormalize_row(&self, i: usize) -> Vec<f64> {
        self.rows[i]
            .iter()
            .enumerate()
            .map(|(j, &y)| self.scaling.features[j % self.token_width].denormalize(y))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Build windowed features for a single cell.
pub fn build_features(records: &[CycleRecord], window: usize) -> Result<FeatureMatrix> {
    build_features_multi(std::slice::from_ref(&records.to_vec()), window)
}

/// Build windowed features over several cells with one shared scaling.
/// The 80/20 split is chronological within each cell.
pub fn build_features_multi(cells: &[Vec<CycleRecord>], window: usize) -> Result<FeatureMatrix> {
    if window == 0 {
        return Err(IngestError::Schema("window must be at least 1".into()));
    }
    for cell in cells {
        if cell.len() < window + 1 {
            return Err(IngestError::InsufficientData {
                needed: window + 1,
                got: cell.len(),
            });
        }
    }
    if cells.is_empty() {
        return Err(IngestError::InsufficientData {
            needed: window + 1,
            got: 0,
        });
    }
    let all = || cells.iter().flatten();
    let use_temperature = all().all(|r| r.temperature_c.is_some());
    let chg = MinMax::fit(all().map(|r| r.cap_chg_mah));
    let mut features = vec![chg, MinMax::fit(all().map(|r| r.cap_dchg_mah))];
    if use_temperature {
        features.push(MinMax::fit(all().filter_map(|r| r.temperature_c)));
    }
    features.push(MinMax::fit(all().map(|r| r.cycle_index as f64)));
    let scaling = Scaling {
        window,
        use_temperature,
        features,
        label: chg,
    };
    build_features_with(cells, &scaling)
}

/// Build features reusing a previously fitted scaling.
pub fn build_features_with(cells: &[Vec<CycleRecord>], scaling: &Scaling) -> Result<FeatureMatrix> {
    let window = scaling.window;
    let token_width = scaling.features.len();
    let mut fm = FeatureMatrix {
        rows: Vec::new(),
        labels: Vec::new(),
        scaling: scaling.clone(),
        token_width,
        origins: Vec::new(),
        train_indices: Vec::new(),
        test_indices: Vec::new(),
    };
    for cell in cells {
        if cell.len() < window + 1 {
            return Err(IngestError::InsufficientData {
                needed: window + 1,
                got: cell.len(),
            });
        }
        if scaling.use_temperature && cell.iter().any(|r| r.temperature_c.is_none()) {
            return Err(IngestError::Schema(
                "scaling expects temperature but a record has none".into(),
            ));
        }
        let n_rows = cell.len() - window;
        let n_train = (n_rows as f64 * TRAIN_FRACTION).floor() as usize;
        for i in 0..n_rows {
            let mut row = Vec::with_capacity(window * token_width);
            for r in &cell[i..i + window] {
                let mut raw = vec![r.cap_chg_mah, r.cap_dchg_mah];
                if scaling.use_temperature {
                    raw.extend(r.temperature_c);
                }
                raw.push(r.cycle_index as f64);
                row.extend(raw.iter().zip(&scaling.features).map(|(&x, s)| s.normalize(x)));
            }
            let target = &cell[i + window];
            let idx = fm.rows.len();
            if i < n_train {
                fm.train_indices.push(idx);
            } else {
                fm.test_indices.push(idx);
            }
            fm.rows.push(row);
            fm.labels.push(target.cap_chg_mah);
            fm.origins.push(RowOrigin {
                cell_id: target.cell_id.clone(),
                label_cycle: target.cycle_index,
            });
        }
    }
    Ok(fm)
}
