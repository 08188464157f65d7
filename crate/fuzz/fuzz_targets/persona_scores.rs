#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::bdi::{bdi_total, parse_persona_scores};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(list) = parse_persona_scores(s) {
            for p in list {
                assert!(bdi_total(&p.scores) <= 63);
            }
        }
    }
});
