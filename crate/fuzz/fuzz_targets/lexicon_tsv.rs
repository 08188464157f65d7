#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::scoring::{score_lexicon, Lexicon};

fuzz_target!(|data: &[u8]| {
    if let Ok(lexicon) = Lexicon::parse_tsv(data) {
        let text = String::from_utf8_lossy(data);
        let score = score_lexicon(&text, &lexicon);
        assert!((0.0..=1.0).contains(&score));
    }
});
