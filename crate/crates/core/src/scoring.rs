//! Risk scorers and the score-to-decision policy.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limit::InFlightLimit;
use crate::stream::{DecisionRecord, Round, StreamClient};

pub const SCORER_URL_ENV: &str = "RISKLOOM_SCORER_URL";

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("bad response from {endpoint}: {message}")]
    BadResponse { endpoint: String, message: String },
    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum LexiconError {
    #[error("lexicon line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("lexicon read failed: {0}")]
    Io(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("min_rounds must be at least 1")]
    MinRounds,
    #[error("consecutive_hits must be at least 1")]
    ConsecutiveHits,
}

pub trait RiskScorer: Send + Sync {
    fn score(&self, serialized: &str) -> Result<f64, ScoreError>;
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Text of the TARGET blocks of a serialized history. Unmarked text counts
/// as TARGET.
pub fn target_segments(serialized: &str) -> Vec<&str> {
    const MARK: &str = "[MSG] [USER] ";
    if !serialized.contains(MARK) {
        return vec![serialized];
    }
    serialized
        .split(MARK)
        .filter_map(|block| block.strip_prefix("TARGET"))
        .filter(|rest| rest.is_empty() || rest.starts_with(' '))
        .collect()
}

/// Weighted term table. Terms may span several tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    terms: Vec<(Vec<String>, f64)>,
}

impl Lexicon {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self, LexiconError> {
        let mut seen = HashSet::new();
        let mut terms = Vec::new();
        for (n, (term, weight)) in entries.into_iter().enumerate() {
            let toks = tokens(&term);
            let err = |message: String| LexiconError::Line { line: n + 1, message };
            if toks.is_empty() {
                return Err(err(format!("term {term:?} has no word characters")));
            }
            if !weight.is_finite() {
                return Err(err(format!("weight for {term:?} is not finite")));
            }
            if !seen.insert(toks.clone()) {
                return Err(err(format!("duplicate term {term:?}")));
            }
            terms.push((toks, weight));
        }
        Ok(Self { terms })
    }

    /// Reads `term<TAB>weight` lines. Blank lines and `#` comments are skipped.
    pub fn parse_tsv(reader: impl BufRead) -> Result<Self, LexiconError> {
        let mut entries = Vec::new();
        let mut line_nos = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| LexiconError::Io(e.to_string()))?;
            let trimmed = line.trim_end_matches(['\r', '\n']);
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let err = |message: &str| LexiconError::Line {
                line: idx + 1,
                message: message.to_string(),
            };
            let (term, weight) = trimmed
                .split_once('\t')
                .ok_or_else(|| err("expected term<TAB>weight"))?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| err("weight is not a number"))?;
            entries.push((term.trim().to_string(), weight));
            line_nos.push(idx + 1);
        }
        Self::new(entries).map_err(|e| match e {
            LexiconError::Line { line, message } => LexiconError::Line {
                line: line_nos[line - 1],
                message,
            },
            other => other,
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Weighted term mass over TARGET text.
    pub fn raw_mass(&self, serialized: &str) -> f64 {
        let mut total = 0.0;
        for segment in target_segments(serialized) {
            let toks = tokens(segment);
            for (term, weight) in &self.terms {
                let hits = if term.len() > toks.len() {
                    0
                } else {
                    toks.windows(term.len()).filter(|w| *w == term.as_slice()).count()
                };
                total += weight * hits as f64;
            }
        }
        total
    }
}

/// `s / (1 + s)` with `s` the weighted TARGET term count, floored at zero.
pub fn score_lexicon(serialized: &str, lexicon: &Lexicon) -> f64 {
    let s = lexicon.raw_mass(serialized).max(0.0);
    if s.is_infinite() {
        return 1.0;
    }
    s / (1.0 + s)
}

impl RiskScorer for Lexicon {
    fn score(&self, serialized: &str) -> Result<f64, ScoreError> {
        Ok(score_lexicon(serialized, self))
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// Client for an HTTP service answering `{"text"}` with `{"score"}`.
pub struct RemoteScorer {
    endpoint: String,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl RemoteScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
            limit: InFlightLimit::new(max_in_flight),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

pub(crate) fn is_timeout(err: &ureq::Error) -> bool {
    match err {
        ureq::Error::Timeout(_) => true,
        ureq::Error::Io(e) => matches!(
            e.kind(),
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
        ),
        _ => false,
    }
}

impl RiskScorer for RemoteScorer {
    fn score(&self, serialized: &str) -> Result<f64, ScoreError> {
        let _permit = self.limit.acquire();
        let endpoint = self.endpoint.clone();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(ScoreRequest { text: serialized })
            .map_err(|e| {
                if is_timeout(&e) {
                    ScoreError::Timeout {
                        endpoint: endpoint.clone(),
                    }
                } else {
                    ScoreError::Transport {
                        endpoint: endpoint.clone(),
                        message: e.to_string(),
                    }
                }
            })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(ScoreError::BadResponse {
                endpoint,
                message: format!("HTTP status {status}"),
            });
        }
        let parsed: ScoreResponse = resp.body_mut().read_json().map_err(|e| {
            if is_timeout(&e) {
                ScoreError::Timeout {
                    endpoint: endpoint.clone(),
                }
            } else {
                ScoreError::BadResponse {
                    endpoint: endpoint.clone(),
                    message: e.to_string(),
                }
            }
        })?;
        if parsed.score.is_nan() {
            return Err(ScoreError::BadResponse {
                endpoint,
                message: "score is NaN".into(),
            });
        }
        Ok(parsed.score.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionPolicy {
    threshold: f64,
    min_rounds: u32,
    consecutive_hits: u32,
}

impl Default for DecisionPolicy {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_rounds: 1,
            consecutive_hits: 1,
        }
    }
}

impl DecisionPolicy {
    pub fn new(threshold: f64, min_rounds: u32, consecutive_hits: u32) -> Result<Self, PolicyError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(PolicyError::Threshold(threshold));
        }
        if min_rounds == 0 {
            return Err(PolicyError::MinRounds);
        }
        if consecutive_hits == 0 {
            return Err(PolicyError::ConsecutiveHits);
        }
        Ok(Self {
            threshold,
            min_rounds,
            consecutive_hits,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn min_rounds(&self) -> u32 {
        self.min_rounds
    }

    pub fn consecutive_hits(&self) -> u32 {
        self.consecutive_hits
    }

    /// 1 once enough rounds have passed and the trailing window clears the threshold.
    pub fn decide(&self, history: &[f64]) -> u8 {
        let n = history.len();
        let window = self.consecutive_hits as usize;
        if n < self.min_rounds as usize || n < window {
            return 0;
        }
        u8::from(history[n - window..].iter().all(|&s| s >= self.threshold))
    }
}

/// Which scorer a run uses.
#[derive(Debug, Clone, PartialEq)]
pub enum ScorerBinding {
    Lexicon(Lexicon),
    Remote {
        endpoint: String,
        timeout: Duration,
        max_in_flight: usize,
    },
}

impl ScorerBinding {
    pub fn into_scorer(self) -> Box<dyn RiskScorer> {
        match self {
            ScorerBinding::Lexicon(lex) => Box::new(lex),
            ScorerBinding::Remote {
                endpoint,
                timeout,
                max_in_flight,
            } => Box::new(RemoteScorer::new(endpoint, timeout, max_in_flight)),
        }
    }
}

#[derive(Default)]
struct History {
    text: String,
    scores: Vec<f64>,
}

/// Stream client that rescores each subject's accumulated history every round.
pub struct ScoringClient {
    scorer: Box<dyn RiskScorer>,
    fallback: Option<Box<dyn RiskScorer>>,
    policy: DecisionPolicy,
    history: HashMap<String, History>,
}

impl ScoringClient {
    pub fn new(scorer: Box<dyn RiskScorer>, policy: DecisionPolicy) -> Self {
        Self {
            scorer,
            fallback: None,
            policy,
            history: HashMap::new(),
        }
    }

    /// Used for any subject whose primary score fails.
    pub fn with_fallback(mut self, fallback: Box<dyn RiskScorer>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    fn score_one(&self, text: &str) -> Result<f64, ScoreError> {
        match self.scorer.score(text) {
            Ok(s) => Ok(s),
            Err(e) => match &self.fallback {
                Some(fb) => {
                    log::warn!("primary scorer failed ({e}); using fallback");
                    fb.score(text)
                }
                None => Err(e),
            },
        }
    }
}

impl StreamClient for ScoringClient {
    fn respond(
        &mut self,
        round: &Round,
    ) -> Result<Vec<DecisionRecord>, Box<dyn std::error::Error + Send + Sync>> {
        for item in &round.items {
            let h = self.history.entry(item.subject_id.clone()).or_default();
            if !h.text.is_empty() {
                h.text.push(' ');
            }
            h.text.push_str(&item.text);
        }
        let texts: Vec<&str> = round
            .items
            .iter()
            .map(|i| self.history[&i.subject_id].text.as_str())
            .collect();
        let scores: Vec<f64> = texts
            .par_iter()
            .map(|t| self.score_one(t))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(scores.len());
        for (item, score) in round.items.iter().zip(scores) {
            let h = self.history.get_mut(&item.subject_id).expect("inserted above");
            h.scores.push(score);
            let decision = self.policy.decide(&h.scores);
            out.push(DecisionRecord::new(&item.subject_id, round.k, decision, score));
        }
        Ok(out)
    }
}
