//! Run report: versioned JSON written atomically. Everything outside `meta` is a
//! deterministic function of the config.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mfc_lab::ensemble::LatticeSampling;
use mfc_lab::value::ResidualReport;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Passed,
    CheckFailed,
    SolverFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Passed => crate::EXIT_OK,
            Status::CheckFailed => crate::EXIT_CHECK_FAILED,
            Status::SolverFailed => crate::EXIT_SOLVER_FAILED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    /// "solve" or the name of the check that failed.
    pub stage: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub iterations: usize,
    pub final_gap: f64,
    pub failure: Option<Failure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSection {
    pub value: f64,
    pub standard_error: f64,
    pub gradient_norm: f64,
    pub x_norm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Measured quantities by name; `null` when not finite.
    pub metrics: BTreeMap<String, Option<f64>>,
    /// Threshold applied to the metric of the same name. Lower bounds end in `_min`.
    pub thresholds: BTreeMap<String, f64>,
    #[serde(default)]
    pub residuals: Vec<ResidualReport>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl CheckOutcome {
    pub fn new(name: &str) -> Self {
        CheckOutcome { name: name.into(), passed: true, metrics: BTreeMap::new(), thresholds: BTreeMap::new(), residuals: vec![], notes: vec![] }
    }

    /// Record `value ≤ bound`.
    pub fn at_most(&mut self, metric: &str, value: f64, bound: f64) {
        self.record(metric, value);
        self.thresholds.insert(metric.into(), bound);
        if !(value <= bound) {
            self.passed = false;
        }
    }

    /// Record `value ≥ bound`.
    pub fn at_least(&mut self, metric: &str, value: f64, bound: f64) {
        self.record(metric, value);
        self.thresholds.insert(format!("{metric}_min"), bound);
        if !(value >= bound) {
            self.passed = false;
        }
    }

    pub fn record(&mut self, metric: &str, value: f64) {
        self.metrics.insert(metric.into(), value.is_finite().then_some(value));
    }

    pub fn fail(&mut self, note: impl Into<String>) {
        self.passed = false;
        self.notes.push(note.into());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub mfc_lab_version: String,
    pub cli_version: String,
    pub lattice: LatticeSampling,
    /// Wall-clock milliseconds per stage. Not reproducible.
    pub timings_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema_version: u32,
    pub name: String,
    /// The config as run, with command-line overrides applied.
    pub config: RunConfig,
    /// Admission constant λ − c′T − c′_T T²/2 of the configured problem.
    pub lambda_t: Option<f64>,
    pub status: Status,
    pub solver: SolverSection,
    pub value: Option<ValueSection>,
    pub checks: Vec<CheckOutcome>,
    pub meta: Meta,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let r: RunReport = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(format!("unsupported schema version {}", r.schema_version));
        }
        Ok(r)
    }
}

/// Write `bytes` to `path` through a temporary file in the same directory, so the
/// final path only ever holds a complete file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// `check,kind,h,residual` rows for every residual sample of every check.
pub fn residual_table(report: &RunReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "kind", "h", "residual"]).expect("in-memory csv");
    for c in &report.checks {
        for r in &c.residuals {
            let kind = serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            for s in &r.samples {
                w.write_record([c.name.as_str(), kind.as_str(), &format!("{:.17e}", s.h), &format!("{:.17e}", s.residual)]).expect("in-memory csv");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

/// Numeric differences between two reports outside `meta`, as (path, a, b) rows.
/// Values within `rel_tol` relative difference count as equal.
pub fn diff(a: &RunReport, b: &RunReport, rel_tol: f64) -> Vec<(String, String, String)> {
    let mut va = serde_json::to_value(a).expect("report serializes");
    let mut vb = serde_json::to_value(b).expect("report serializes");
    for v in [&mut va, &mut vb] {
        if let Some(o) = v.as_object_mut() {
            o.remove("meta");
        }
    }
    let mut out = Vec::new();
    diff_values("", &va, &vb, rel_tol, &mut out);
    out
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, tol: f64, out: &mut Vec<(String, String, String)>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let p = format!("{path}/{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_values(&p, u, v, tol, out),
                    (u, v) => out.push((p, show(u), show(v))),
                }
            }
        }
        (Value::Array(x), Value::Array(y)) => {
            for i in 0..x.len().max(y.len()) {
                let p = format!("{path}/{i}");
                match (x.get(i), y.get(i)) {
                    (Some(u), Some(v)) => diff_values(&p, u, v, tol, out),
                    (u, v) => out.push((p, show(u), show(v))),
                }
            }
        }
        (Value::Number(x), Value::Number(y)) => {
            let (u, v) = (x.as_f64().unwrap_or(f64::NAN), y.as_f64().unwrap_or(f64::NAN));
            let equal = x == y || (u - v).abs() <= tol * u.abs().max(v.abs());
            if !equal {
                out.push((path.into(), x.to_string(), y.to_string()));
            }
        }
        _ if a == b => {}
        _ => out.push((path.into(), a.to_string(), b.to_string())),
    }
}

fn show(v: Option<&serde_json::Value>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "<missing>".into())
}
