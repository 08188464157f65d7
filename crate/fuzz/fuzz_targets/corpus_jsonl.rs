#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::corpus::{read_corpus, write_corpus};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_corpus(data) {
        let mut out = Vec::new();
        write_corpus(&records, &mut out).expect("in-memory write");
        let again = read_corpus(out.as_slice()).expect("written corpus must read back");
        assert_eq!(records, again);
    }
});
