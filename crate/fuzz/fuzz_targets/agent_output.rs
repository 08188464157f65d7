#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::dialogue::{parse_agent_output, StrategyKind};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        for strategy in StrategyKind::ALL {
            if let Ok(parsed) = parse_agent_output(s, strategy) {
                assert!(parsed.question.is_some());
                let _ = parsed.outgoing();
            }
        }
    }
});
