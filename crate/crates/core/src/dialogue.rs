//! Interview loop between a conversational agent, a persona and an
//! evaluation agent that scores symptoms and picks the next topic.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bdi::{Symptom, SymptomVector, MAX_SEVERITY};
use crate::gateway::{ChatExchange, ChatGateway, GatewayError, PersonaScript};

/// Hard cap on agent messages per session.
pub const MAX_AGENT_MESSAGES: u32 = 21;
/// Persona replies required before the evaluator may end a session.
pub const MIN_PERSONA_REPLIES: u32 = 2;
/// Extra attempts after an unreadable model answer.
pub const MAX_FORMAT_RETRIES: u32 = 2;

const FORMAT_REMINDER: &str =
    "\nYour previous answer could not be read. Answer again using only the required format.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    SelfDisclosure,
    Empathy,
    DirectQuestion,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::SelfDisclosure,
        StrategyKind::Empathy,
        StrategyKind::DirectQuestion,
    ];

    pub fn required_fields(self) -> &'static [&'static str] {
        match self {
            StrategyKind::SelfDisclosure => &["reasoning", "message", "experience", "question"],
            StrategyKind::Empathy => &["reasoning", "message", "question"],
            StrategyKind::DirectQuestion => &["reasoning", "question"],
        }
    }

    pub fn run_name(self) -> &'static str {
        match self {
            StrategyKind::SelfDisclosure => "run0",
            StrategyKind::Empathy => "run1",
            StrategyKind::DirectQuestion => "run2",
        }
    }

    fn first_template(self) -> TemplateId {
        match self {
            StrategyKind::SelfDisclosure => TemplateId::Run0First,
            StrategyKind::Empathy => TemplateId::Run1First,
            StrategyKind::DirectQuestion => TemplateId::Run2First,
        }
    }

    fn next_template(self) -> TemplateId {
        match self {
            StrategyKind::SelfDisclosure => TemplateId::Run0Next,
            StrategyKind::Empathy => TemplateId::Run1Next,
            StrategyKind::DirectQuestion => TemplateId::Run2Next,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.run_name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "run0" | "selfdisclosure" => Ok(StrategyKind::SelfDisclosure),
            "run1" | "empathy" => Ok(StrategyKind::Empathy),
            "run2" | "directquestion" => Ok(StrategyKind::DirectQuestion),
            _ => Err(format!("unknown strategy {s:?}; expected run0, run1 or run2")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    Run0First,
    Run1First,
    Run2First,
    Run0Next,
    Run1Next,
    Run2Next,
    EvalFirst,
    EvalNext,
}

impl TemplateId {
    pub const ALL: [TemplateId; 8] = [
        TemplateId::Run0First,
        TemplateId::Run1First,
        TemplateId::Run2First,
        TemplateId::Run0Next,
        TemplateId::Run1Next,
        TemplateId::Run2Next,
        TemplateId::EvalFirst,
        TemplateId::EvalNext,
    ];

    /// Raw `(system, user)` template text.
    pub fn text(self) -> (&'static str, &'static str) {
        const RUN0: &str = include_str!("../prompts/agent_run0_system.txt");
        const RUN1: &str = include_str!("../prompts/agent_run1_system.txt");
        const RUN2: &str = include_str!("../prompts/agent_run2_system.txt");
        const EVAL: &str = include_str!("../prompts/evaluator_system.txt");
        match self {
            TemplateId::Run0First => (RUN0, include_str!("../prompts/agent_run0_first.txt")),
            TemplateId::Run1First => (RUN1, include_str!("../prompts/agent_run1_first.txt")),
            TemplateId::Run2First => (RUN2, include_str!("../prompts/agent_run2_first.txt")),
            TemplateId::Run0Next => (RUN0, include_str!("../prompts/agent_run0_next.txt")),
            TemplateId::Run1Next => (RUN1, include_str!("../prompts/agent_run1_next.txt")),
            TemplateId::Run2Next => (RUN2, include_str!("../prompts/agent_run2_next.txt")),
            TemplateId::EvalFirst => (EVAL, include_str!("../prompts/evaluator_first.txt")),
            TemplateId::EvalNext => (EVAL, include_str!("../prompts/evaluator_next.txt")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialogueError {
    #[error("template variable {0} was not supplied")]
    MissingVariable(String),
    #[error("model output could not be parsed: {0}")]
    UnparseableOutput(String),
    #[error("model output lacks field {0:?}")]
    MissingField(String),
    #[error("unknown symptom {0:?}")]
    UnknownSymptom(String),
    #[error("score {score:?} for {symptom} is not an integer in 0..=3")]
    ScoreOutOfRange { symptom: String, score: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("session already terminated")]
    AlreadyTerminated,
}

static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{([A-Z][A-Z_]*)\}").expect("valid regex"));

fn substitute(template: &str, vars: &[(&str, &str)]) -> Result<String, DialogueError> {
    for cap in PLACEHOLDER.captures_iter(template) {
        if !vars.iter().any(|(k, _)| *k == &cap[1]) {
            return Err(DialogueError::MissingVariable(cap[1].to_string()));
        }
    }
    Ok(PLACEHOLDER
        .replace_all(template, |cap: &regex::Captures<'_>| {
            vars.iter()
                .find(|(k, _)| *k == &cap[1])
                .map(|(_, v)| v.to_string())
                .unwrap_or_default()
        })
        .into_owned())
}

/// Fills every `{NAME}` placeholder; returns `(system, user)`.
pub fn render_prompt(
    id: TemplateId,
    vars: &[(&str, &str)],
) -> Result<(String, String), DialogueError> {
    let (system, user) = id.text();
    Ok((substitute(system, vars)?, substitute(user, vars)?))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAgentOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experience: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

impl ParsedAgentOutput {
    /// Text the persona sees: message, experience and question.
    pub fn outgoing(&self) -> String {
        [&self.message, &self.experience, &self.question]
            .into_iter()
            .flatten()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorOutput {
    pub reasoning: String,
    pub symptoms_detected: BTreeMap<Symptom, u8>,
    pub next_reason: String,
    pub next_symptom: Option<Symptom>,
}

static QUOTED_KEY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"["“”]([^"“”\n]{1,80})["“”]\s*:"#).expect("valid regex"));
static BARE_KEY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?m)^[ \t]*[{,]?[ \t]*([A-Za-z][A-Za-z _]{0,60}?)[ \t]*:").expect("valid regex")
});
static SCORE_LINE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"["'“”]?([A-Za-z][A-Za-z \-]*?)["'“”]?\s*:\s*["']?(-?\d+(?:\.\d+)?)\b"#)
        .expect("valid regex")
});

fn norm_key(k: &str) -> String {
    k.trim().to_lowercase().replace(['_', '-'], " ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum KeyClass {
    /// Starts a section that is returned.
    Section,
    /// Ends the previous section but is otherwise ignored.
    Boundary,
    /// Part of a value.
    Inline,
}

fn at_key_position(raw: &str, start: usize) -> bool {
    let before = raw[..start].trim_end_matches([' ', '\t']);
    before.is_empty() || before.ends_with(['{', ',', '\n', '\r', '`'])
}

/// Key occurrences in `raw` as (match start, value start, normalized key, class).
fn key_spans(
    raw: &str,
    classify: &dyn Fn(&str, bool) -> KeyClass,
) -> Vec<(usize, usize, String, KeyClass)> {
    let mut spans: Vec<(usize, usize, String, KeyClass)> = Vec::new();
    for (re, quoted) in [(&*QUOTED_KEY, true), (&*BARE_KEY, false)] {
        for cap in re.captures_iter(raw) {
            let whole = cap.get(0).expect("match");
            let key_start = cap.get(1).expect("group").start();
            let start = if quoted { whole.start() } else { key_start };
            if quoted && !at_key_position(raw, start) {
                continue;
            }
            let key = norm_key(&cap[1]);
            let class = classify(&key, quoted);
            if class == KeyClass::Inline {
                continue;
            }
            if spans.iter().any(|(s, e, _, _)| start < *e && key_start >= *s) {
                continue;
            }
            spans.push((start, whole.end(), key, class));
        }
    }
    spans.sort_by_key(|s| s.0);
    spans
}

/// Text before the first fence pair's closing fence, or everything.
fn fenced_body(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw;
    };
    let after = &raw[open + 3..];
    let body_start = after.find('\n').map_or(0, |i| {
        let lang = after[..i].trim();
        if lang.chars().all(|c| c.is_ascii_alphanumeric()) { i + 1 } else { 0 }
    });
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => body,
    }
}

/// Strict path: the answer is (or wraps) a JSON object.
fn json_object(raw: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let body = fenced_body(raw).trim();
    let candidate = if body.starts_with('{') {
        body.to_string()
    } else {
        format!("{{{}}}", body.trim_end_matches(','))
    };
    serde_json::from_str(&candidate).ok()
}

fn clean_value(raw: &str) -> String {
    let mut v = raw.trim();
    loop {
        let before = v;
        v = v.trim_end_matches("```").trim();
        v = v.trim_end_matches(['}', ',']).trim();
        if v == before {
            break;
        }
    }
    let quoted = v.len() >= 2
        && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('“') && v.ends_with('”')));
    if quoted {
        if let Ok(s) = serde_json::from_str::<String>(v) {
            return s.trim().to_string();
        }
        let inner = v
            .trim_start_matches(['"', '“'])
            .trim_end_matches(['"', '”']);
        return inner.replace("\\\"", "\"").replace("\\n", "\n").trim().to_string();
    }
    v.trim_matches(['"', '\'']).trim().to_string()
}

/// Splits `raw` into (key, raw value) sections.
fn sections(raw: &str, classify: &dyn Fn(&str, bool) -> KeyClass) -> Vec<(String, String)> {
    let spans = key_spans(raw, classify);
    let mut out = Vec::new();
    for (i, (_, vstart, key, class)) in spans.iter().enumerate() {
        if *class != KeyClass::Section {
            continue;
        }
        let end = spans.get(i + 1).map_or(raw.len(), |n| n.0);
        out.push((key.clone(), raw[*vstart..end].to_string()));
    }
    out
}

const AGENT_KEYS: [&str; 4] = ["reasoning", "message", "experience", "question"];

fn classify_agent_key(k: &str, quoted: bool) -> KeyClass {
    if AGENT_KEYS.contains(&k) {
        KeyClass::Section
    } else if quoted {
        KeyClass::Boundary
    } else {
        KeyClass::Inline
    }
}

fn json_text(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.trim().to_string()),
        serde_json::Value::Null => None,
        other => Some(other.to_string()),
    }
}

/// Tolerant reader for the agent's key/value answer format.
pub fn parse_agent_output(
    raw: &str,
    strategy: StrategyKind,
) -> Result<ParsedAgentOutput, DialogueError> {
    if raw.trim().is_empty() {
        return Err(DialogueError::UnparseableOutput("empty output".into()));
    }
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    if let Some(obj) = json_object(raw) {
        for (k, v) in &obj {
            let key = norm_key(k);
            if AGENT_KEYS.contains(&key.as_str()) {
                if let Some(text) = json_text(v).filter(|t| !t.is_empty()) {
                    fields.entry(key).or_insert(text);
                }
            }
        }
    } else {
        for (key, value) in sections(raw, &classify_agent_key) {
            let v = clean_value(&value);
            if !v.is_empty() {
                fields.entry(key).or_insert(v);
            }
        }
    }
    if fields.is_empty() {
        return Err(DialogueError::UnparseableOutput(
            "no recognizable fields in agent output".into(),
        ));
    }
    let mut out = ParsedAgentOutput::default();
    for &field in strategy.required_fields() {
        let value = fields
            .remove(field)
            .ok_or_else(|| DialogueError::MissingField(field.to_string()))?;
        let slot = match field {
            "reasoning" => &mut out.reasoning,
            "message" => &mut out.message,
            "experience" => &mut out.experience,
            _ => &mut out.question,
        };
        *slot = Some(value);
    }
    Ok(out)
}

fn evaluator_key(k: &str) -> Option<&'static str> {
    match k {
        "reasoning" => Some("reasoning"),
        "symptoms detected" | "symptoms" | "detected symptoms" => Some("symptoms"),
        "reason for selecting the next symptom" | "next reason" | "reason for next symptom" => {
            Some("next_reason")
        }
        "next symptom" => Some("next"),
        _ => None,
    }
}

fn classify_evaluator_key(k: &str, quoted: bool) -> KeyClass {
    if evaluator_key(k).is_some() {
        KeyClass::Section
    } else if quoted && Symptom::lookup(k).is_none() {
        KeyClass::Boundary
    } else {
        KeyClass::Inline
    }
}

fn resolve_symptom(value: &str) -> Result<Option<Symptom>, DialogueError> {
    let v = value.trim().trim_matches(['\'', '"', '.', ' ']);
    if v.is_empty() || v.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    if let Some(s) = Symptom::lookup(v) {
        return Ok(Some(s));
    }
    let lower = v.to_lowercase();
    let contained = Symptom::ALL
        .into_iter()
        .filter(|s| lower.contains(&s.name().to_lowercase()))
        .max_by_key(|s| s.name().len());
    if contained.is_some() {
        return Ok(contained);
    }
    if lower.starts_with("none") {
        return Ok(None);
    }
    Err(DialogueError::UnknownSymptom(v.to_string()))
}

fn check_score(symptom: Symptom, raw_score: &str) -> Result<u8, DialogueError> {
    let out_of_range = || DialogueError::ScoreOutOfRange {
        symptom: symptom.name().to_string(),
        score: raw_score.to_string(),
    };
    let value: f64 = raw_score.trim().parse().map_err(|_| out_of_range())?;
    if value.fract() != 0.0 || !(0.0..=f64::from(MAX_SEVERITY)).contains(&value) {
        return Err(out_of_range());
    }
    Ok(value as u8)
}

fn is_placeholder_name(name: &str) -> bool {
    let lower = name.to_lowercase();
    lower == "score" || (lower.starts_with("symptom") && lower[7..].chars().all(|c| c.is_ascii_digit()))
}

fn parse_score_block(block: &str) -> Result<BTreeMap<Symptom, u8>, DialogueError> {
    let mut out = BTreeMap::new();
    for cap in SCORE_LINE.captures_iter(block) {
        let name = cap[1].trim();
        if is_placeholder_name(name) {
            continue;
        }
        let symptom = Symptom::lookup(name)
            .ok_or_else(|| DialogueError::UnknownSymptom(name.to_string()))?;
        out.insert(symptom, check_score(symptom, &cap[2])?);
    }
    Ok(out)
}

fn scores_from_json(v: &serde_json::Value) -> Result<BTreeMap<Symptom, u8>, DialogueError> {
    match v {
        serde_json::Value::Object(map) => {
            let mut out = BTreeMap::new();
            for (name, score) in map {
                let symptom = Symptom::lookup(name)
                    .ok_or_else(|| DialogueError::UnknownSymptom(name.clone()))?;
                let raw = match score {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.insert(symptom, check_score(symptom, &raw)?);
            }
            Ok(out)
        }
        serde_json::Value::String(s) => parse_score_block(s),
        serde_json::Value::Null => Ok(BTreeMap::new()),
        other => Err(DialogueError::UnparseableOutput(format!(
            "symptoms detected holds {other}"
        ))),
    }
}

/// Tolerant reader for the evaluator's answer format.
pub fn parse_evaluator_output(raw: &str) -> Result<EvaluatorOutput, DialogueError> {
    if raw.trim().is_empty() {
        return Err(DialogueError::UnparseableOutput("empty output".into()));
    }
    let mut reasoning = None;
    let mut symptoms: Option<BTreeMap<Symptom, u8>> = None;
    let mut next_reason = None;
    let mut next: Option<Option<Symptom>> = None;
    if let Some(obj) = json_object(raw) {
        for (k, v) in &obj {
            match evaluator_key(&norm_key(k)) {
                Some("reasoning") => reasoning = json_text(v),
                Some("symptoms") => symptoms = Some(scores_from_json(v)?),
                Some("next_reason") => next_reason = json_text(v),
                Some("next") => next = Some(resolve_symptom(&json_text(v).unwrap_or_default())?),
                _ => {}
            }
        }
    } else {
        let secs = sections(raw, &classify_evaluator_key);
        for (key, value) in secs {
            match evaluator_key(&key) {
                Some("reasoning") if reasoning.is_none() => reasoning = Some(clean_value(&value)),
                Some("symptoms") if symptoms.is_none() => {
                    symptoms = Some(parse_score_block(&value)?)
                }
                Some("next_reason") if next_reason.is_none() => {
                    next_reason = Some(clean_value(&value))
                }
                Some("next") if next.is_none() => {
                    next = Some(resolve_symptom(&clean_value(&value))?)
                }
                _ => {}
            }
        }
    }
    if reasoning.is_none() && symptoms.is_none() && next_reason.is_none() && next.is_none() {
        return Err(DialogueError::UnparseableOutput(
            "no recognizable fields in evaluator output".into(),
        ));
    }
    let next_symptom = next.ok_or_else(|| DialogueError::MissingField("next symptom".into()))?;
    let symptoms_detected =
        symptoms.ok_or_else(|| DialogueError::MissingField("symptoms detected".into()))?;
    Ok(EvaluatorOutput {
        reasoning: reasoning.unwrap_or_default(),
        symptoms_detected,
        next_reason: next_reason.unwrap_or_default(),
        next_symptom,
    })
}

/// The interviewed party.
pub trait Persona {
    fn name(&self) -> &str;
    fn reply(&mut self, agent_text: &str) -> Result<String, GatewayError>;
}

impl Persona for PersonaScript {
    fn name(&self) -> &str {
        &self.name
    }

    fn reply(&mut self, agent_text: &str) -> Result<String, GatewayError> {
        Ok(PersonaScript::reply(self, agent_text))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Agent,
    Persona,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub turn_index: usize,
    pub speaker: Speaker,
    pub raw: String,
    /// What the other side saw.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedAgentOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Symptom>,
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationTurn {
    /// Index of the persona turn this evaluation followed.
    pub after_turn: usize,
    pub raw: String,
    pub parsed: EvaluatorOutput,
    #[serde(default)]
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    EvaluatorDone,
    TurnCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueState {
    pub strategy: StrategyKind,
    pub persona_name: String,
    pub transcript: Vec<AgentTurn>,
    pub evaluations: Vec<EvaluationTurn>,
    pub symptoms: SymptomVector,
    pub planned_symptom: Symptom,
    pub agent_messages_sent: u32,
    pub persona_replies: u32,
    pub terminated: Option<Termination>,
}

impl DialogueState {
    pub fn new(strategy: StrategyKind, persona_name: impl Into<String>) -> Self {
        Self {
            strategy,
            persona_name: persona_name.into(),
            transcript: Vec::new(),
            evaluations: Vec::new(),
            symptoms: SymptomVector::zeros(),
            planned_symptom: Symptom::Sadness,
            agent_messages_sent: 0,
            persona_replies: 0,
            terminated: None,
        }
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated.is_some()
    }

    /// Chat so far as `Agent: ...` / `<persona>: ...` lines.
    pub fn chat(&self) -> String {
        self.transcript
            .iter()
            .map(|t| {
                let who = match t.speaker {
                    Speaker::Agent => "Agent",
                    Speaker::Persona => self.persona_name.as_str(),
                };
                format!("{who}: {}", t.text.replace(['\r', '\n'], " "))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Agent messages that reached the persona.
    pub fn agent_texts(&self) -> impl Iterator<Item = &str> {
        self.transcript
            .iter()
            .filter(|t| t.speaker == Speaker::Agent)
            .map(|t| t.text.as_str())
    }

    /// Writes turns and evaluations as JSON lines in the order they happened.
    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "lowercase")]
        enum Entry<'a> {
            Turn(&'a AgentTurn),
            Evaluation(&'a EvaluationTurn),
        }
        let mut evals = self.evaluations.iter().peekable();
        for turn in &self.transcript {
            serde_json::to_writer(&mut out, &Entry::Turn(turn))?;
            out.write_all(b"\n")?;
            while let Some(e) = evals.next_if(|e| e.after_turn == turn.turn_index) {
                serde_json::to_writer(&mut out, &Entry::Evaluation(e))?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

/// Calls the model and parses its answer, re-prompting on unreadable output.
/// The returned count covers transport retries and re-prompts.
fn ask<T>(
    gateway: &dyn ChatGateway,
    system: &str,
    user: &str,
    parse: impl Fn(&str) -> Result<T, DialogueError>,
) -> Result<(String, T, u32), DialogueError> {
    let mut retries = 0;
    let mut reprompts = 0;
    let mut prompt = user.to_string();
    loop {
        let completion = gateway.complete(&ChatExchange::new(system, prompt.as_str()))?;
        retries += completion.retries;
        match parse(&completion.text) {
            Ok(v) => return Ok((completion.text, v, retries)),
            Err(e) if reprompts < MAX_FORMAT_RETRIES => {
                log::debug!("unreadable model answer ({e}); re-prompting");
                prompt.push_str(FORMAT_REMINDER);
                reprompts += 1;
                retries += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// One cycle: agent message, persona reply, evaluation.
pub fn step(
    state: &mut DialogueState,
    gateway: &dyn ChatGateway,
    persona: &mut dyn Persona,
) -> Result<(), DialogueError> {
    if state.is_terminated() {
        return Err(DialogueError::AlreadyTerminated);
    }
    let name = state.persona_name.clone();
    let strategy = state.strategy;
    let first = state.agent_messages_sent == 0;
    let target = if first { Symptom::Sadness } else { state.planned_symptom };
    let chat = state.chat();
    let (system, user) = if first {
        render_prompt(strategy.first_template(), &[("USER_NAME", &name)])?
    } else {
        render_prompt(
            strategy.next_template(),
            &[("USER_NAME", &name), ("SYMPTOM", target.name()), ("CHAT", &chat)],
        )?
    };
    let (raw, parsed, retries) = ask(gateway, &system, &user, |r| parse_agent_output(r, strategy))?;
    let outgoing = parsed.outgoing();
    state.transcript.push(AgentTurn {
        turn_index: state.transcript.len(),
        speaker: Speaker::Agent,
        raw,
        text: outgoing.clone(),
        parsed: Some(parsed),
        target: Some(target),
        retries,
    });
    state.agent_messages_sent += 1;

    let reply = persona.reply(&outgoing)?;
    let persona_turn = state.transcript.len();
    state.transcript.push(AgentTurn {
        turn_index: persona_turn,
        speaker: Speaker::Persona,
        raw: reply.clone(),
        text: reply,
        parsed: None,
        target: None,
        retries: 0,
    });
    state.persona_replies += 1;

    let template = if state.persona_replies == 1 {
        TemplateId::EvalFirst
    } else {
        TemplateId::EvalNext
    };
    let chat = state.chat();
    let (system, user) = render_prompt(template, &[("USER_NAME", &name), ("CHAT", &chat)])?;
    let (raw, eval, retries) = ask(gateway, &system, &user, parse_evaluator_output)?;
    state.symptoms.merge(&eval.symptoms_detected);
    match eval.next_symptom {
        Some(s) => state.planned_symptom = s,
        None if state.persona_replies >= MIN_PERSONA_REPLIES => {
            state.terminated = Some(Termination::EvaluatorDone);
        }
        None => {
            let seen: HashSet<Symptom> = state.symptoms.assessed().collect();
            if let Some(s) = Symptom::ALL.into_iter().find(|s| !seen.contains(s)) {
                state.planned_symptom = s;
            }
        }
    }
    state.evaluations.push(EvaluationTurn {
        after_turn: persona_turn,
        raw,
        parsed: eval,
        retries,
    });
    if state.terminated.is_none() && state.agent_messages_sent >= MAX_AGENT_MESSAGES {
        state.terminated = Some(Termination::TurnCap);
    }
    Ok(())
}

#[derive(Debug, Error)]
#[error("session for {} failed: {error}", state.persona_name)]
pub struct SessionFailure {
    #[source]
    pub error: DialogueError,
    /// Everything recorded before the failure.
    pub state: Box<DialogueState>,
}

/// Runs [`step`] until the session terminates.
pub fn run_session(
    strategy: StrategyKind,
    persona_name: &str,
    gateway: &dyn ChatGateway,
    persona: &mut dyn Persona,
) -> Result<DialogueState, SessionFailure> {
    let mut state = DialogueState::new(strategy, persona_name);
    while !state.is_terminated() {
        if let Err(error) = step(&mut state, gateway, persona) {
            return Err(SessionFailure {
                error,
                state: Box::new(state),
            });
        }
    }
    Ok(state)
}

/// Runs one session per scripted persona, in parallel. Results keep the
/// input order.
pub fn run_sessions(
    strategy: StrategyKind,
    personas: Vec<PersonaScript>,
    gateway: &dyn ChatGateway,
) -> Vec<Result<DialogueState, SessionFailure>> {
    personas
        .into_par_iter()
        .map(|mut p| {
            let name = p.name.clone();
            run_session(strategy, &name, gateway, &mut p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionStats {
    pub runs: usize,
    pub agent_messages: usize,
    pub agent_chars: usize,
    pub messages_per_run: f64,
    pub chars_per_message: f64,
}

/// Mean agent messages per session and mean characters per agent message.
pub fn interaction_stats<'a>(sessions: impl IntoIterator<Item = &'a DialogueState>) -> InteractionStats {
    let mut runs = 0;
    let mut messages = 0;
    let mut chars = 0;
    for s in sessions {
        runs += 1;
        for text in s.agent_texts() {
            messages += 1;
            chars += text.chars().count();
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    InteractionStats {
        runs,
        agent_messages: messages,
        agent_chars: chars,
        messages_per_run: ratio(messages, runs),
        chars_per_message: ratio(chars, messages),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Completion, GatewayErrorKind, MockGateway, PhraseBook};
    use std::sync::Mutex;

    #[test]
    fn render_examples() {
        let (_, user) = render_prompt(TemplateId::Run0First, &[("USER_NAME", "Alex")]).unwrap();
        assert!(user.contains("The user name is Alex"));
        let (_, user) = render_prompt(
            TemplateId::EvalNext,
            &[("USER_NAME", "Alex"), ("CHAT", "Agent: hi\nAlex: hello")],
        )
        .unwrap();
        assert!(user.contains("Agent: hi\nAlex: hello"));
        assert_eq!(
            render_prompt(TemplateId::Run1First, &[]),
            Err(DialogueError::MissingVariable("USER_NAME".into()))
        );
    }

    #[test]
    fn rendering_is_total() {
        let vars = [("USER_NAME", "Alex"), ("SYMPTOM", "Crying"), ("CHAT", "Agent: {x}")];
        for id in TemplateId::ALL {
            let (system, user) = render_prompt(id, &vars).unwrap();
            for text in [&system, &user] {
                assert!(!PLACEHOLDER.is_match(&text.replace("{x}", "")), "{id:?}");
            }
        }
        let (_, first) = TemplateId::EvalFirst.text();
        assert!(!first.contains("None"));
        let (_, next) = TemplateId::EvalNext.text();
        assert!(next.contains("or 'None'"));
    }

    #[test]
    fn agent_output_examples() {
        let raw = "```\n\"reasoning\": \"r\", \"question\": \"q\"\n```";
        let p = parse_agent_output(raw, StrategyKind::DirectQuestion).unwrap();
        assert_eq!(p.reasoning.as_deref(), Some("r"));
        assert_eq!(p.question.as_deref(), Some("q"));
        assert_eq!(p.message, None);

        let full = r#"{"reasoning": "a", "message": "b", "experience": "c", "question": "d", "mood": "x"}"#;
        let p = parse_agent_output(full, StrategyKind::SelfDisclosure).unwrap();
        assert_eq!(p.outgoing(), "b c d");

        let err = parse_agent_output(r#""reasoning": "r", "message": "m""#, StrategyKind::Empathy);
        assert_eq!(err, Err(DialogueError::MissingField("question".into())));
        assert!(matches!(
            parse_agent_output("hello there", StrategyKind::Empathy),
            Err(DialogueError::UnparseableOutput(_))
        ));
    }

    #[test]
    fn direct_strategy_drops_extra_fields() {
        let raw = r#""reasoning": "r", "message": "m", "experience": "e", "question": "q""#;
        let p = parse_agent_output(raw, StrategyKind::DirectQuestion).unwrap();
        assert_eq!((p.message, p.experience), (None, None));
        let p = parse_agent_output(raw, StrategyKind::Empathy).unwrap();
        assert_eq!(p.experience, None);
    }

    #[test]
    fn evaluator_output_examples() {
        let raw = "```\n\"reasoning\": \"x\",\n\"symptoms detected\": \nSadness: 2,\n\"reason for selecting the next symptom\": \"r\",\n\"next symptom\": \"Crying\"\n```";
        let e = parse_evaluator_output(raw).unwrap();
        assert_eq!(e.symptoms_detected, BTreeMap::from([(Symptom::Sadness, 2)]));
        assert_eq!(e.next_symptom, Some(Symptom::Crying));

        let none = raw.replace("\"Crying\"", "\"None\"");
        assert_eq!(parse_evaluator_output(&none).unwrap().next_symptom, None);

        let bad = raw.replace("Sadness: 2", "Sadness: 5");
        assert!(matches!(
            parse_evaluator_output(&bad),
            Err(DialogueError::ScoreOutOfRange { .. })
        ));
        let unknown = raw.replace("Sadness: 2", "Moodiness: 2");
        assert_eq!(
            parse_evaluator_output(&unknown),
            Err(DialogueError::UnknownSymptom("Moodiness".into()))
        );
    }

    fn closed_loop(strategy: StrategyKind, gt: SymptomVector) -> DialogueState {
        let mut persona = PersonaScript::new("Alex", gt);
        let gw = MockGateway::new(PhraseBook::default());
        run_session(strategy, "Alex", &gw, &mut persona).unwrap()
    }

    #[test]
    fn control_persona_gives_zeros() {
        let state = closed_loop(StrategyKind::Empathy, SymptomVector::zeros());
        assert_eq!(state.symptoms.scores(), [0; 21]);
        assert_eq!(state.terminated, Some(Termination::EvaluatorDone));
    }

    #[test]
    fn first_step_targets_sadness() {
        let mut persona = PersonaScript::new("Alex", SymptomVector::zeros());
        let gw = MockGateway::new(PhraseBook::default());
        let mut state = DialogueState::new(StrategyKind::DirectQuestion, "Alex");
        step(&mut state, &gw, &mut persona).unwrap();
        assert_eq!(state.transcript.len(), 2);
        assert_eq!(state.transcript[0].target, Some(Symptom::Sadness));
        assert!(state.transcript[0].text.contains("Sadness"));
        assert_eq!(state.persona_replies, 1);
        assert_eq!(state.planned_symptom, Symptom::Pessimism);
    }

    struct Scripted {
        replies: Mutex<Vec<String>>,
    }

    impl Scripted {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: Mutex::new(replies.iter().rev().map(|s| s.to_string()).collect()),
            }
        }
    }

    impl ChatGateway for Scripted {
        fn complete(&self, _: &ChatExchange) -> Result<Completion, GatewayError> {
            let text = self.replies.lock().unwrap().pop().expect("script exhausted");
            Ok(Completion { text, retries: 0 })
        }
    }

    const AGENT: &str = r#""reasoning": "r", "question": "How is your sleep?""#;
    const EVAL_NONE: &str = "\"symptoms detected\": \nSadness: 1,\n\"next symptom\": \"None\"";

    #[test]
    fn none_before_two_replies_is_ignored() {
        let gw = Scripted::new(&[AGENT, EVAL_NONE, AGENT, EVAL_NONE]);
        let mut persona = PersonaScript::new("Alex", SymptomVector::zeros());
        let state = run_session(StrategyKind::DirectQuestion, "Alex", &gw, &mut persona).unwrap();
        assert_eq!(state.persona_replies, 2);
        assert_eq!(state.terminated, Some(Termination::EvaluatorDone));
        assert_eq!(state.symptoms.get(Symptom::Sadness), 1);
    }

    #[test]
    fn turn_cap_forces_termination() {
        let eval = "\"symptoms detected\": \n\"next symptom\": \"Crying\"";
        let script: Vec<&str> = (0..MAX_AGENT_MESSAGES).flat_map(|_| [AGENT, eval]).collect();
        let gw = Scripted::new(&script);
        let mut persona = PersonaScript::new("Alex", SymptomVector::zeros());
        let state = run_session(StrategyKind::DirectQuestion, "Alex", &gw, &mut persona).unwrap();
        assert_eq!(state.agent_messages_sent, MAX_AGENT_MESSAGES);
        assert_eq!(state.terminated, Some(Termination::TurnCap));
    }

    #[test]
    fn unreadable_output_retries_then_aborts() {
        let gw = Scripted::new(&["garbage", "still garbage", AGENT, EVAL_NONE, AGENT, EVAL_NONE]);
        let mut persona = PersonaScript::new("Alex", SymptomVector::zeros());
        let state = run_session(StrategyKind::DirectQuestion, "Alex", &gw, &mut persona).unwrap();
        assert_eq!(state.transcript[0].retries, 2);
        assert_eq!(state.persona_replies, 2);

        let gw = Scripted::new(&["x", "y", "z"]);
        let err = run_session(StrategyKind::DirectQuestion, "Alex", &gw, &mut persona).unwrap_err();
        assert!(matches!(err.error, DialogueError::UnparseableOutput(_)));
        assert!(err.state.transcript.is_empty());
    }

    struct Down;

    impl ChatGateway for Down {
        fn complete(&self, _: &ChatExchange) -> Result<Completion, GatewayError> {
            Err(GatewayError::new(GatewayErrorKind::Timeout, "slow", 3))
        }
    }

    #[test]
    fn gateway_failure_keeps_partial_state() {
        let mut persona = PersonaScript::new("Alex", SymptomVector::zeros());
        let err = run_session(StrategyKind::Empathy, "Alex", &Down, &mut persona).unwrap_err();
        match err.error {
            DialogueError::Gateway(g) => assert_eq!((g.kind, g.retries), (GatewayErrorKind::Timeout, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replaying_evaluations_is_idempotent() {
        let mut gt = SymptomVector::zeros();
        gt.set(Symptom::Sadness, 3).unwrap();
        gt.set(Symptom::Crying, 2).unwrap();
        let state = closed_loop(StrategyKind::SelfDisclosure, gt);
        assert_eq!(state.symptoms.scores(), gt.scores());
        let mut replay = SymptomVector::zeros();
        for _ in 0..2 {
            for e in &state.evaluations {
                replay.merge(&e.parsed.symptoms_detected);
            }
        }
        assert_eq!(replay.scores(), state.symptoms.scores());
    }

    #[test]
    fn jsonl_interleaves_evaluations() {
        let state = closed_loop(StrategyKind::DirectQuestion, SymptomVector::zeros());
        let mut buf = Vec::new();
        state.write_jsonl(&mut buf).unwrap();
        let kinds: Vec<String> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(kinds.len(), state.transcript.len() + state.evaluations.len());
        assert_eq!(&kinds[..3], ["turn", "turn", "evaluation"]);
    }

    #[test]
    fn stats_on_hand_counted_sessions() {
        let mut a = DialogueState::new(StrategyKind::DirectQuestion, "A");
        for (i, (speaker, text)) in [(Speaker::Agent, "abcd"), (Speaker::Persona, "zzzzzzzz"), (Speaker::Agent, "ab")]
            .into_iter()
            .enumerate()
        {
            a.transcript.push(AgentTurn {
                turn_index: i,
                speaker,
                raw: text.into(),
                text: text.into(),
                parsed: None,
                target: None,
                retries: 0,
            });
        }
        let b = DialogueState::new(StrategyKind::DirectQuestion, "B");
        let s = interaction_stats([&a, &b]);
        assert_eq!((s.runs, s.agent_messages, s.agent_chars), (2, 2, 6));
        assert_eq!((s.messages_per_run, s.chars_per_message), (1.0, 3.0));
        assert_eq!(interaction_stats([]).chars_per_message, 0.0);
    }
}
