#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::conversation::{extract_relevant, serialize};
use riskloom_core::corpus::parse_thread_dump;

fuzz_target!(|data: &[u8]| {
    if let Ok(trees) = parse_thread_dump(data) {
        for tree in trees {
            if let Ok(kept) = extract_relevant(&tree) {
                assert!(kept.len() <= tree.len());
                let text = serialize(&kept);
                assert_eq!(text.matches("[MSG] [USER] ").count(), kept.len());
            }
        }
    }
});
