#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::conversation::clean_text;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        let cleaned = clean_text(s);
        assert!(!cleaned.contains('\n'));
        assert!(!cleaned.contains("  "));
        assert_eq!(cleaned.trim(), cleaned);
    }
});
