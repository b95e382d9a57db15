//! Config-driven runner: `run`, `suite`, `oracle riccati` and `report diff`.

pub mod config;
pub mod fuzzing;
pub mod pipeline;
pub mod report;
pub mod suite;

use std::path::{Path, PathBuf};

use report::RunReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG_INVALID: i32 = 2;
pub const EXIT_SOLVER_FAILED: i32 = 3;
/// The run finished but its outputs could not be written.
pub const EXIT_IO: i32 = 4;

/// Environment variable overriding every report directory.
pub const OUTPUT_DIR_ENV: &str = "MFC_LAB_OUTPUT_DIR";

/// Outcome of one `run`.
#[derive(Debug)]
pub struct RunResult {
    pub exit_code: i32,
    pub report_path: Option<PathBuf>,
    pub report: Option<RunReport>,
    /// Human-readable reason for a non-zero exit without a report.
    pub message: Option<String>,
}

/// Command-line and manifest overrides of a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub name: Option<String>,
    /// Report directory; takes precedence over the environment and the config.
    pub out_dir: Option<PathBuf>,
}

/// Load, validate, execute and write the report of one config.
pub fn run_config(path: &Path, opts: &RunOptions) -> RunResult {
    let fail = |code, msg: String| RunResult { exit_code: code, report_path: None, report: None, message: Some(msg) };
    let mut loaded = match config::load(path) {
        Ok(l) => l,
        Err(e) => return fail(EXIT_CONFIG_INVALID, e.to_string()),
    };
    if let Some(s) = opts.seed {
        loaded.config.discretization.seed = s;
    }
    if let Some(n) = &opts.name {
        loaded.config.name = Some(n.clone());
    }
    let prepared = match loaded.config.prepare(&loaded.base_dir) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG_INVALID, e.to_string()),
    };
    let out = pipeline::execute(&loaded, prepared);
    let dir = opts.out_dir.clone().unwrap_or_else(|| pipeline::output_dir(&loaded));
    let report_path = dir.join(format!("{}.report.json", out.report.name));
    let written = report::write_atomic(&report_path, out.report.to_json().as_bytes()).and_then(|_| {
        for (suffix, text) in &out.side.tables {
            report::write_atomic(&dir.join(format!("{}.{suffix}", out.report.name)), text.as_bytes())?;
        }
        Ok(())
    });
    if let Err(e) = written {
        return RunResult {
            exit_code: EXIT_IO,
            report_path: None,
            report: Some(out.report),
            message: Some(format!("cannot write outputs to {}: {e}", dir.display())),
        };
    }
    let message = out.report.solver.failure.as_ref().map(|f| format!("{} failed: {}: {}", f.stage, f.kind, f.message));
    RunResult { exit_code: out.report.status.exit_code(), report_path: Some(report_path), report: Some(out.report), message }
}
