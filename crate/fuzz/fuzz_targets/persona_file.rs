#![no_main]
use libfuzzer_sys::fuzz_target;
use riskloom_core::gateway::PersonaScript;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(script) = PersonaScript::from_json(s) {
            for q in ["Are you depressed?", "How is your sleep?", "Nice weather today."] {
                assert!(!script.reply(q).is_empty());
            }
        }
    }
});
