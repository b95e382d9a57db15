#![no_main]
use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let _ = mfc_lab_cli::fuzzing::run_config_text(s, Path::new("/nonexistent"));
    }
});
