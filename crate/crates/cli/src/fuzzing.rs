//! Entry points shared by the fuzz targets and the corpus replay test. Each one
//! must return or error on any input; a panic is a bug.

use std::path::Path;

use mfc_lab::ensemble::ParticleEnsemble;

use crate::config::{self, ConfigError, InitialConfig};
use crate::report::RunReport;

/// Largest particle count × dimension the config target will materialize.
pub const MAX_FUZZ_SAMPLES: usize = 1 << 16;
/// Largest dimension it will build (the noise matrix has dim² entries).
pub const MAX_FUZZ_DIM: usize = 16;

/// Parse a run config and, when small enough, validate and build it.
pub fn run_config_text(text: &str, base_dir: &Path) -> Result<(), ConfigError> {
    let cfg = config::parse(text)?;
    let samples = cfg.discretization.n_particles.saturating_mul(cfg.problem.dim);
    if samples <= MAX_FUZZ_SAMPLES && cfg.problem.dim <= MAX_FUZZ_DIM && matches!(cfg.initial, InitialConfig::Gaussian { .. }) {
        cfg.prepare(base_dir)?;
    }
    Ok(())
}

/// Read an ensemble; a successful read must write back and re-read identically.
pub fn ensemble_csv(data: &[u8]) {
    if let Ok(x) = ParticleEnsemble::read_csv(data) {
        let mut buf = Vec::new();
        x.write_csv(&mut buf).expect("in-memory write");
        let y = ParticleEnsemble::read_csv(buf.as_slice()).expect("own output parses");
        assert!(x.samples().iter().zip(y.samples()).all(|(a, b)| a == b || (a.is_nan() && b.is_nan())));
        assert_eq!((x.n_particles(), x.dim()), (y.n_particles(), y.dim()));
    }
}

/// Decode a report; a successful decode must re-encode to a decodable report.
pub fn run_report_text(text: &str) {
    if let Ok(r) = RunReport::from_json(text) {
        RunReport::from_json(&r.to_json()).expect("own output decodes");
    }
}
