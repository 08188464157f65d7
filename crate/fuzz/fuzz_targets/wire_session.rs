#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::stream::{wire, StreamSimulator};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        for line in s.lines() {
            let _ = wire::parse_reply(line);
            let _ = wire::parse_server_message(line);
        }
    }
    let mut sim = StreamSimulator::new([
        ("a".to_string(), vec!["one".to_string(), "two".to_string()]),
        ("b".to_string(), vec!["three".to_string()]),
    ])
    .expect("valid corpus");
    let mut out = Vec::new();
    if let Ok(log) = wire::serve(&mut sim, data, &mut out) {
        assert!(sim.is_finished());
        assert_eq!(log.len(), 3);
    }
});
