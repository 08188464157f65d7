#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::stream::DecisionLog;

fuzz_target!(|data: &[u8]| {
    if let Ok(log) = DecisionLog::read_jsonl(data) {
        let mut out = Vec::new();
        log.write_jsonl(&mut out).expect("in-memory write");
        let again = DecisionLog::read_jsonl(out.as_slice()).expect("written log must read back");
        assert_eq!(log.len(), again.len());
        let _ = log.first_positive();
    }
});
