#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    mfc_lab_cli::fuzzing::ensemble_csv(data);
});
