//! Suite manifest: a list of run configs executed in parallel, summarized as CSV and JSON.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::RunOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Summary directory, resolved against the manifest directory. Overridden by
    /// `MFC_LAB_OUTPUT_DIR`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default, rename = "run")]
    pub runs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Config path, resolved against the manifest directory.
    pub config: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Report name; required to tell apart entries that share a config.
    #[serde(default)]
    pub name: Option<String>,
}

pub fn parse_manifest(text: &str) -> Result<Manifest, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub name: Option<String>,
    pub exit_code: i32,
    pub passed: bool,
    /// Names of failed checks, `;`-separated.
    pub failed_checks: String,
    pub value: Option<f64>,
    pub report: Option<String>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub manifest: String,
    pub exit_code: i32,
    pub runs: Vec<SummaryRow>,
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config", "name", "exit_code", "passed", "failed_checks", "value", "report", "message"]).expect("in-memory csv");
        for r in &self.runs {
            w.write_record([
                r.config.clone(),
                r.name.clone().unwrap_or_default(),
                r.exit_code.to_string(),
                r.passed.to_string(),
                r.failed_checks.clone(),
                r.value.map(|v| format!("{v:.17e}")).unwrap_or_default(),
                r.report.clone().unwrap_or_default(),
                r.message.clone().unwrap_or_default(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }
}

/// Run every entry and write `<stem>.summary.csv` and `<stem>.summary.json`.
/// The exit code is the largest of the run exit codes (0 for an empty manifest).
pub fn run_suite(path: &Path) -> (i32, Option<Summary>, Option<String>) {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return (crate::EXIT_CONFIG_INVALID, None, Some(format!("cannot read {}: {e}", path.display()))),
    };
    let manifest = match parse_manifest(&text) {
        Ok(m) => m,
        Err(e) => return (crate::EXIT_CONFIG_INVALID, None, Some(format!("manifest: {e}"))),
    };
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Err(msg) = distinct_names(&manifest, &base) {
        return (crate::EXIT_CONFIG_INVALID, None, Some(msg));
    }
    let runs: Vec<SummaryRow> = manifest
        .runs
        .par_iter()
        .map(|entry| {
            let cfg = base.join(&entry.config);
            let r = crate::run_config(&cfg, &RunOptions { seed: entry.seed, name: entry.name.clone(), out_dir: None });
            let failed: Vec<&str> = r.report.iter().flat_map(|rep| rep.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str())).collect();
            SummaryRow {
                config: entry.config.display().to_string(),
                name: r.report.as_ref().map(|rep| rep.name.clone()),
                exit_code: r.exit_code,
                passed: r.exit_code == crate::EXIT_OK,
                failed_checks: failed.join(";"),
                value: r.report.as_ref().and_then(|rep| rep.value.as_ref()).map(|v| v.value),
                report: r.report_path.as_ref().map(|p| p.display().to_string()),
                message: r.message,
            }
        })
        .collect();
    let exit_code = runs.iter().map(|r| r.exit_code).max().unwrap_or(crate::EXIT_OK);
    let summary = Summary { manifest: path.display().to_string(), exit_code, runs };
    let dir = match std::env::var_os(crate::OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        Some(d) => PathBuf::from(d),
        None => manifest.output.as_ref().map(|o| base.join(o)).unwrap_or(base),
    };
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "suite".into());
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    let written = crate::report::write_atomic(&dir.join(format!("{stem}.summary.csv")), summary.to_csv().as_bytes())
        .and_then(|_| crate::report::write_atomic(&dir.join(format!("{stem}.summary.json")), json.as_bytes()));
    if let Err(e) = written {
        return (crate::EXIT_IO, Some(summary), Some(format!("cannot write summary to {}: {e}", dir.display())));
    }
    (exit_code, Some(summary), None)
}

/// Runs writing to the same report name would overwrite each other. Configs that
/// fail to load are left for the run itself to report.
fn distinct_names(manifest: &Manifest, base: &Path) -> Result<(), String> {
    let mut seen = std::collections::BTreeMap::new();
    for (i, entry) in manifest.runs.iter().enumerate() {
        let name = match &entry.name {
            Some(n) => n.clone(),
            None => match crate::config::load(&base.join(&entry.config)) {
                Ok(l) => l.config.name.unwrap_or(l.stem),
                Err(_) => continue,
            },
        };
        if let Some(j) = seen.insert(name.clone(), i) {
            return Err(format!("manifest entries {j} and {i} both write report {name:?}; give them distinct names"));
        }
    }
    Ok(())
}
