//! Round-based replay of a labeled corpus.
//!
//! Each round delivers the next writing of every subject that still has
//! writings left. The client must answer every delivered subject before the
//! next round is released. A positive decision is sticky: later decisions
//! for that subject are stored as positive whatever the client sends.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SubjectRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub subject_id: String,
    pub k: u32,
    pub decision: u8,
    pub score: f64,
}

impl DecisionRecord {
    pub fn new(subject_id: impl Into<String>, k: u32, decision: u8, score: f64) -> Self {
        Self {
            subject_id: subject_id.into(),
            k,
            decision,
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundItem {
    pub subject_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub k: u32,
    pub items: Vec<RoundItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Round(Round),
    End,
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("no decision for active subject {0}")]
    MissingSubject(String),
    #[error("decision for subject {0} which is not in the current round")]
    UnknownSubject(String),
    #[error("more than one decision for subject {0}")]
    DuplicateSubject(String),
    #[error("subject {subject}: {reason}")]
    InvalidDecision { subject: String, reason: String },
    #[error("subject {0} appears twice in the corpus")]
    DuplicateCorpusSubject(String),
    #[error("run has not finished")]
    RunNotFinished,
    #[error("client failed: {0}")]
    Client(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error("wire line {line}: {message}")]
    Wire { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
struct SubjectStream {
    id: String,
    writings: Vec<String>,
    cursor: usize,
    finalized: bool,
}

/// In-process simulator; the canonical implementation of the round protocol.
#[derive(Debug, Clone)]
pub struct StreamSimulator {
    subjects: Vec<SubjectStream>,
    k: u32,
    pending: Option<Vec<usize>>,
    log: Vec<DecisionRecord>,
    ended: bool,
}

impl StreamSimulator {
    /// Subjects are served in ascending id order.
    pub fn new(
        subjects: impl IntoIterator<Item = (String, Vec<String>)>,
    ) -> Result<Self, StreamError> {
        let mut seen = HashSet::new();
        let mut streams = Vec::new();
        for (id, writings) in subjects {
            if !seen.insert(id.clone()) {
                return Err(StreamError::DuplicateCorpusSubject(id));
            }
            streams.push(SubjectStream {
                id,
                writings,
                cursor: 0,
                finalized: false,
            });
        }
        streams.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Self {
            subjects: streams,
            k: 0,
            pending: None,
            log: Vec::new(),
            ended: false,
        })
    }

    pub fn from_records(records: &[SubjectRecord]) -> Result<Self, StreamError> {
        Self::new(
            records
                .iter()
                .map(|r| (r.subject_id.clone(), r.writings.clone())),
        )
    }

    pub fn current_round(&self) -> u32 {
        self.k
    }

    pub fn is_finished(&self) -> bool {
        self.ended
    }

    pub fn finalized(&self) -> impl Iterator<Item = &str> {
        self.subjects
            .iter()
            .filter(|s| s.finalized)
            .map(|s| s.id.as_str())
    }

    pub fn next_round(&mut self) -> Result<Step, StreamError> {
        if self.pending.is_some() {
            return Err(StreamError::Protocol(format!(
                "decisions for round {} were not submitted",
                self.k
            )));
        }
        if self.ended {
            return Ok(Step::End);
        }
        let active: Vec<usize> = self
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.cursor < s.writings.len())
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            self.ended = true;
            return Ok(Step::End);
        }
        self.k += 1;
        let items = active
            .iter()
            .map(|&i| {
                let s = &mut self.subjects[i];
                let text = s.writings[s.cursor].clone();
                s.cursor += 1;
                RoundItem {
                    subject_id: s.id.clone(),
                    text,
                }
            })
            .collect();
        self.pending = Some(active);
        Ok(Step::Round(Round { k: self.k, items }))
    }

    pub fn submit_decisions(&mut self, decisions: Vec<DecisionRecord>) -> Result<(), StreamError> {
        let Some(pending) = self.pending.as_ref() else {
            return Err(StreamError::Protocol("no round is awaiting decisions".into()));
        };
        let slot: HashMap<&str, usize> = pending
            .iter()
            .map(|&i| (self.subjects[i].id.as_str(), i))
            .collect();
        let mut by_subject: HashMap<usize, DecisionRecord> = HashMap::new();
        for d in decisions {
            let Some(&i) = slot.get(d.subject_id.as_str()) else {
                return Err(StreamError::UnknownSubject(d.subject_id));
            };
            if d.k != self.k {
                return Err(StreamError::Protocol(format!(
                    "decision for {} is for round {}, current round is {}",
                    d.subject_id, d.k, self.k
                )));
            }
            if d.decision > 1 {
                return Err(StreamError::InvalidDecision {
                    subject: d.subject_id,
                    reason: format!("decision must be 0 or 1, got {}", d.decision),
                });
            }
            if !(d.score.is_finite() && (0.0..=1.0).contains(&d.score)) {
                return Err(StreamError::InvalidDecision {
                    subject: d.subject_id,
                    reason: format!("score {} outside [0, 1]", d.score),
                });
            }
            if by_subject.contains_key(&i) {
                return Err(StreamError::DuplicateSubject(d.subject_id));
            }
            by_subject.insert(i, d);
        }
        if let Some(&missing) = pending.iter().find(|i| !by_subject.contains_key(i)) {
            return Err(StreamError::MissingSubject(self.subjects[missing].id.clone()));
        }

        let pending = self.pending.take().unwrap_or_default();
        for i in pending {
            let mut d = by_subject.remove(&i).expect("checked above");
            let s = &mut self.subjects[i];
            if s.finalized {
                d.decision = 1;
            } else if d.decision == 1 {
                s.finalized = true;
            }
            self.log.push(d);
        }
        Ok(())
    }

    pub fn transcript(&self) -> Result<DecisionLog, StreamError> {
        if !self.ended {
            return Err(StreamError::RunNotFinished);
        }
        Ok(DecisionLog {
            records: self.log.clone(),
        })
    }
}

/// Something that answers rounds.
pub trait StreamClient {
    fn respond(
        &mut self,
        round: &Round,
    ) -> Result<Vec<DecisionRecord>, Box<dyn std::error::Error + Send + Sync>>;
}

/// Drives `sim` to completion with `client`.
pub fn run_stream(
    sim: &mut StreamSimulator,
    client: &mut dyn StreamClient,
) -> Result<DecisionLog, StreamError> {
    while let Step::Round(round) = sim.next_round()? {
        let decisions = client.respond(&round).map_err(StreamError::Client)?;
        sim.submit_decisions(decisions)?;
    }
    sim.transcript()
}

/// Complete per-subject decision history of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionLog {
    records: Vec<DecisionRecord>,
}

impl DecisionLog {
    pub fn from_records(records: Vec<DecisionRecord>) -> Self {
        Self { records }
    }

    pub fn records(&self) -> &[DecisionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Earliest round with a positive decision per subject.
    pub fn first_positive(&self) -> BTreeMap<String, Option<u32>> {
        let mut out: BTreeMap<String, Option<u32>> = BTreeMap::new();
        for r in &self.records {
            let entry = out.entry(r.subject_id.clone()).or_insert(None);
            if r.decision == 1 {
                *entry = Some(entry.map_or(r.k, |k| k.min(r.k)));
            }
        }
        out
    }

    /// Latest score of each subject at or before round `checkpoint`.
    pub fn scores_at(&self, checkpoint: u32) -> BTreeMap<String, f64> {
        let mut best: BTreeMap<String, (u32, f64)> = BTreeMap::new();
        for r in &self.records {
            if r.k > checkpoint {
                continue;
            }
            let e = best.entry(r.subject_id.clone()).or_insert((r.k, r.score));
            if r.k >= e.0 {
                *e = (r.k, r.score);
            }
        }
        best.into_iter().map(|(s, (_, v))| (s, v)).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, StreamError> {
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DecisionRecord = serde_json::from_str(&line).map_err(|e| StreamError::Wire {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if r.decision > 1 || !r.score.is_finite() {
                return Err(StreamError::Wire {
                    line: idx + 1,
                    message: "decision must be 0/1 and score finite".into(),
                });
            }
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Line-delimited JSON version of the round protocol.
pub mod wire {
    use super::*;

    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    pub struct WireItem {
        pub subject: String,
        pub text: String,
    }

    /// Sent by the server: a round, or `{"end": true, "rounds": n}`.
    #[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(untagged)]
    pub enum ServerMessage {
        Round { k: u32, items: Vec<WireItem> },
        End { end: bool, rounds: u32 },
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct WireDecision {
        pub subject: String,
        pub decision: u8,
        pub score: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct ClientReply {
        pub k: u32,
        pub decisions: Vec<WireDecision>,
    }

    impl From<&Round> for ServerMessage {
        fn from(r: &Round) -> Self {
            ServerMessage::Round {
                k: r.k,
                items: r
                    .items
                    .iter()
                    .map(|i| WireItem {
                        subject: i.subject_id.clone(),
                        text: i.text.clone(),
                    })
                    .collect(),
            }
        }
    }

    impl ClientReply {
        pub fn into_records(self) -> Vec<DecisionRecord> {
            let k = self.k;
            self.decisions
                .into_iter()
                .map(|d| DecisionRecord::new(d.subject, k, d.decision, d.score))
                .collect()
        }
    }

    pub fn parse_reply(line: &str) -> Result<ClientReply, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn parse_server_message(line: &str) -> Result<ServerMessage, serde_json::Error> {
        serde_json::from_str(line)
    }

    /// Serves `sim` over a line protocol until the corpus is exhausted.
    pub fn serve(
        sim: &mut StreamSimulator,
        input: impl BufRead,
        mut output: impl Write,
    ) -> Result<DecisionLog, StreamError> {
        let mut lines = input.lines();
        let mut line_no = 0usize;
        loop {
            match sim.next_round()? {
                Step::End => {
                    let end = ServerMessage::End {
                        end: true,
                        rounds: sim.current_round(),
                    };
                    serde_json::to_writer(&mut output, &end).map_err(io::Error::from)?;
                    output.write_all(b"\n")?;
                    output.flush()?;
                    return sim.transcript();
                }
                Step::Round(round) => {
                    serde_json::to_writer(&mut output, &ServerMessage::from(&round))
                        .map_err(io::Error::from)?;
                    output.write_all(b"\n")?;
                    output.flush()?;
                    let reply = loop {
                        line_no += 1;
                        match lines.next() {
                            None => {
                                return Err(StreamError::Wire {
                                    line: line_no,
                                    message: "client closed the stream mid-run".into(),
                                })
                            }
                            Some(l) => {
                                let l = l?;
                                if !l.trim().is_empty() {
                                    break l;
                                }
                            }
                        }
                    };
                    let reply = parse_reply(&reply).map_err(|e| StreamError::Wire {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                    if reply.k != round.k {
                        return Err(StreamError::Protocol(format!(
                            "reply for round {} while round {} is open",
                            reply.k, round.k
                        )));
                    }
                    sim.submit_decisions(reply.into_records())?;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sim(sizes: &[usize]) -> StreamSimulator {
        StreamSimulator::new(sizes.iter().enumerate().map(|(i, &n)| {
            (format!("s{i}"), (0..n).map(|j| format!("w{j}")).collect())
        }))
        .unwrap()
    }

    fn answer(round: &Round, decision: u8) -> Vec<DecisionRecord> {
        round
            .items
            .iter()
            .map(|i| DecisionRecord::new(&i.subject_id, round.k, decision, 0.5))
            .collect()
    }

    #[test]
    fn round_sizes_follow_remaining_writings() {
        let mut s = sim(&[3, 1]);
        let mut sizes = Vec::new();
        while let Step::Round(r) = s.next_round().unwrap() {
            sizes.push(r.items.len());
            s.submit_decisions(answer(&r, 0)).unwrap();
        }
        assert_eq!(sizes, [2, 1, 1]);
        assert_eq!(s.finalized().count(), 0);
        assert_eq!(s.transcript().unwrap().len(), 4);
    }

    #[test]
    fn empty_corpus_ends_immediately() {
        let mut s = sim(&[]);
        assert_eq!(s.next_round().unwrap(), Step::End);
        assert!(s.transcript().unwrap().is_empty());
    }

    #[test]
    fn protocol_errors() {
        let mut s = sim(&[2, 2]);
        assert!(matches!(s.submit_decisions(vec![]), Err(StreamError::Protocol(_))));
        let Step::Round(r) = s.next_round().unwrap() else { panic!() };
        assert!(matches!(s.next_round(), Err(StreamError::Protocol(_))));
        assert!(matches!(s.transcript(), Err(StreamError::RunNotFinished)));

        let mut partial = answer(&r, 0);
        partial.pop();
        assert!(matches!(s.submit_decisions(partial), Err(StreamError::MissingSubject(_))));

        let mut dup = answer(&r, 0);
        dup.push(dup[0].clone());
        assert!(matches!(s.submit_decisions(dup), Err(StreamError::DuplicateSubject(_))));

        let mut unknown = answer(&r, 0);
        unknown.push(DecisionRecord::new("ghost", 1, 0, 0.1));
        assert!(matches!(s.submit_decisions(unknown), Err(StreamError::UnknownSubject(_))));

        let mut bad = answer(&r, 0);
        bad[0].score = f64::NAN;
        assert!(matches!(s.submit_decisions(bad), Err(StreamError::InvalidDecision { .. })));

        s.submit_decisions(answer(&r, 0)).unwrap();
    }

    #[test]
    fn positive_is_sticky() {
        let mut s = sim(&[5]);
        let mut k = 0;
        while let Step::Round(r) = s.next_round().unwrap() {
            k += 1;
            s.submit_decisions(answer(&r, u8::from(k == 3))).unwrap();
        }
        let log = s.transcript().unwrap();
        let decisions: Vec<u8> = log.records().iter().map(|r| r.decision).collect();
        assert_eq!(decisions, [0, 0, 1, 1, 1]);
        assert_eq!(log.first_positive()["s0"], Some(3));
    }

    #[test]
    fn first_positive_at_round_one() {
        let mut s = sim(&[1]);
        let Step::Round(r) = s.next_round().unwrap() else { panic!() };
        s.submit_decisions(answer(&r, 1)).unwrap();
        assert_eq!(s.next_round().unwrap(), Step::End);
        assert_eq!(s.transcript().unwrap().first_positive()["s0"], Some(1));
    }

    #[test]
    fn scores_at_checkpoint_uses_latest_seen() {
        let log = DecisionLog::from_records(vec![
            DecisionRecord::new("a", 1, 0, 0.1),
            DecisionRecord::new("a", 2, 0, 0.7),
            DecisionRecord::new("b", 1, 0, 0.4),
        ]);
        let at1 = log.scores_at(1);
        assert_eq!((at1["a"], at1["b"]), (0.1, 0.4));
        let at9 = log.scores_at(9);
        assert_eq!((at9["a"], at9["b"]), (0.7, 0.4));
    }

    #[test]
    fn wire_serve_round_trip() {
        let mut s = sim(&[2, 1]);
        let replies = [
            r#"{"k":1,"decisions":[{"subject":"s0","decision":0,"score":0.2},{"subject":"s1","decision":1,"score":0.9}]}"#,
            "",
            r#"{"k":2,"decisions":[{"subject":"s0","decision":1,"score":0.8}]}"#,
        ]
        .join("\n");
        let mut out = Vec::new();
        let log = wire::serve(&mut s, replies.as_bytes(), &mut out).unwrap();
        assert_eq!(log.len(), 3);
        let lines: Vec<_> = std::str::from_utf8(&out).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            wire::parse_server_message(lines[0]).unwrap(),
            wire::ServerMessage::Round {
                k: 1,
                items: vec![
                    wire::WireItem { subject: "s0".into(), text: "w0".into() },
                    wire::WireItem { subject: "s1".into(), text: "w0".into() },
                ]
            }
        );
        assert_eq!(lines[2], r#"{"end":true,"rounds":2}"#);
    }

    #[test]
    fn wire_rejects_garbage_and_early_close() {
        let mut s = sim(&[1]);
        let err = wire::serve(&mut s, "nope\n".as_bytes(), Vec::new()).unwrap_err();
        assert!(matches!(err, StreamError::Wire { line: 1, .. }));
        let mut s = sim(&[1]);
        let err = wire::serve(&mut s, "".as_bytes(), Vec::new()).unwrap_err();
        assert!(matches!(err, StreamError::Wire { .. }));
    }

    #[test]
    fn log_jsonl_round_trip() {
        let log = DecisionLog::from_records(vec![DecisionRecord::new("a", 1, 1, 0.25)]);
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        assert_eq!(DecisionLog::read_jsonl(buf.as_slice()).unwrap(), log);
    }

    proptest! {
        #[test]
        fn delivery_invariants(sizes in prop::collection::vec(0usize..8, 0..10), flips in prop::collection::vec(0u8..2, 64)) {
            let mut s = sim(&sizes);
            let mut last_size = usize::MAX;
            let mut seen: HashMap<String, Vec<u32>> = HashMap::new();
            let mut n = 0;
            while let Step::Round(r) = s.next_round().unwrap() {
                prop_assert!(r.items.len() <= last_size);
                last_size = r.items.len();
                for i in &r.items {
                    seen.entry(i.subject_id.clone()).or_default().push(r.k);
                }
                let ds = r.items.iter().map(|i| {
                    n += 1;
                    DecisionRecord::new(&i.subject_id, r.k, flips[n % flips.len()], 0.5)
                }).collect();
                s.submit_decisions(ds).unwrap();
            }
            for (i, &size) in sizes.iter().enumerate() {
                let ks = seen.remove(&format!("s{i}")).unwrap_or_default();
                prop_assert_eq!(ks, (1..=size as u32).collect::<Vec<_>>());
            }
            let log = s.transcript().unwrap();
            let mut by: BTreeMap<&str, Vec<u8>> = BTreeMap::new();
            for r in log.records() {
                by.entry(&r.subject_id).or_default().push(r.decision);
            }
            for ds in by.values() {
                prop_assert!(ds.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
