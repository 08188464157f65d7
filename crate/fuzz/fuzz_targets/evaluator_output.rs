#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::dialogue::parse_evaluator_output;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(out) = parse_evaluator_output(s) {
            assert!(out.symptoms_detected.values().all(|v| *v <= 3));
        }
    }
});
