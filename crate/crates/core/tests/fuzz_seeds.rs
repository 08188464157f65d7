//! Replays the checked-in fuzz seeds through the same entry points and
//! checks that none of them panics.

use std::path::{Path, PathBuf};

use riskloom_core::bdi::{bdi_total, parse_persona_scores};
use riskloom_core::conversation::{clean_text, extract_relevant, serialize};
use riskloom_core::corpus::{parse_thread_dump, read_corpus, write_corpus};
use riskloom_core::dialogue::{parse_agent_output, parse_evaluator_output, StrategyKind};
use riskloom_core::gateway::PersonaScript;
use riskloom_core::scoring::{score_lexicon, Lexicon};
use riskloom_core::stream::{wire, DecisionLog, StreamSimulator};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

#[test]
fn agent_output_seeds() {
    let mut parsed = 0;
    for (_, data) in seeds("agent_output") {
        let s = text(&data).unwrap();
        for strategy in StrategyKind::ALL {
            if let Ok(p) = parse_agent_output(s, strategy) {
                assert!(p.question.is_some());
                parsed += 1;
            }
        }
    }
    assert!(parsed > 0);
}

#[test]
fn evaluator_output_seeds() {
    for (_, data) in seeds("evaluator_output") {
        if let Ok(out) = parse_evaluator_output(text(&data).unwrap()) {
            assert!(out.symptoms_detected.values().all(|v| *v <= 3));
        }
    }
}

#[test]
fn thread_dump_seeds() {
    for (path, data) in seeds("thread_dump") {
        let Ok(trees) = parse_thread_dump(data.as_slice()) else {
            continue;
        };
        for tree in trees {
            if let Ok(kept) = extract_relevant(&tree) {
                assert_eq!(serialize(&kept).matches("[MSG] [USER] ").count(), kept.len(), "{}", path.display());
            }
        }
    }
}

#[test]
fn corpus_seeds_round_trip() {
    for (_, data) in seeds("corpus_jsonl") {
        if let Ok(records) = read_corpus(data.as_slice()) {
            let mut out = Vec::new();
            write_corpus(&records, &mut out).unwrap();
            assert_eq!(read_corpus(out.as_slice()).unwrap(), records);
        }
    }
}

#[test]
fn decision_log_seeds_round_trip() {
    for (_, data) in seeds("decision_log") {
        if let Ok(log) = DecisionLog::read_jsonl(data.as_slice()) {
            let mut out = Vec::new();
            log.write_jsonl(&mut out).unwrap();
            assert_eq!(DecisionLog::read_jsonl(out.as_slice()).unwrap(), log);
        }
    }
}

#[test]
fn wire_session_seeds() {
    let mut completed = 0;
    for (_, data) in seeds("wire_session") {
        if let Some(s) = text(&data) {
            for line in s.lines() {
                let _ = wire::parse_reply(line);
                let _ = wire::parse_server_message(line);
            }
        }
        let mut sim = StreamSimulator::new([
            ("a".to_string(), vec!["one".to_string(), "two".to_string()]),
            ("b".to_string(), vec!["three".to_string()]),
        ])
        .unwrap();
        if let Ok(log) = wire::serve(&mut sim, data.as_slice(), Vec::new()) {
            assert_eq!(log.len(), 3);
            completed += 1;
        }
    }
    assert!(completed > 0);
}

#[test]
fn lexicon_seeds() {
    for (_, data) in seeds("lexicon_tsv") {
        if let Ok(lexicon) = Lexicon::parse_tsv(data.as_slice()) {
            let score = score_lexicon(&String::from_utf8_lossy(&data), &lexicon);
            assert!((0.0..=1.0).contains(&score));
        }
    }
}

#[test]
fn clean_text_seeds() {
    for (_, data) in seeds("clean_text") {
        if let Some(s) = text(&data) {
            let cleaned = clean_text(s);
            assert!(!cleaned.contains('\n') && !cleaned.contains("  "));
            assert_eq!(cleaned.trim(), cleaned);
        }
    }
}

#[test]
fn persona_seeds() {
    for (path, data) in seeds("persona_file") {
        let script = PersonaScript::from_json(text(&data).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        for q in ["Are you depressed?", "How is your sleep?", "Nice weather today."] {
            assert!(!script.reply(q).is_empty());
        }
    }
    for (_, data) in seeds("persona_scores") {
        for p in parse_persona_scores(text(&data).unwrap()).unwrap() {
            assert!(bdi_total(&p.scores) <= 63);
        }
    }
}
