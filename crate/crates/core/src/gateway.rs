//! Chat-completion access plus offline stand-ins for both agents and the persona.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bdi::{Symptom, SymptomVector, MAX_SEVERITY};
use crate::limit::InFlightLimit;

pub const LLM_URL_ENV: &str = "RISKLOOM_LLM_URL";
pub const LLM_KEY_ENV: &str = "RISKLOOM_LLM_KEY";
pub const LLM_MODEL_ENV: &str = "RISKLOOM_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "meta-llama/Llama-3.1-8B-Instruct";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatExchange {
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            messages: vec![
                ChatMessage::new(ChatRole::System, system),
                ChatMessage::new(ChatRole::User, user),
            ],
            ..Self::default()
        }
    }

    pub fn push(&mut self, message: ChatMessage) {
        self.messages.push(message);
    }

    pub fn system(&self) -> Option<&str> {
        self.messages
            .first()
            .filter(|m| m.role == ChatRole::System)
            .map(|m| m.content.as_str())
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::new(GatewayErrorKind::InvalidRequest, m, 0));
        if self.messages.is_empty() {
            return invalid("exchange has no messages");
        }
        for (i, m) in self.messages.iter().enumerate() {
            if m.content.trim().is_empty() {
                return invalid(&format!("message {i} is empty"));
            }
            if i > 0 && m.role == ChatRole::System {
                return invalid("a system message may only come first");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatewayErrorKind {
    Transport,
    AuthFailure,
    Timeout,
    RateLimited,
    BadResponse,
    InvalidRequest,
}

impl GatewayErrorKind {
    fn is_transient(self) -> bool {
        matches!(
            self,
            GatewayErrorKind::Transport | GatewayErrorKind::Timeout | GatewayErrorKind::RateLimited
        )
    }
}

impl fmt::Display for GatewayErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            GatewayErrorKind::Transport => "transport error",
            GatewayErrorKind::AuthFailure => "authentication failed",
            GatewayErrorKind::Timeout => "timed out",
            GatewayErrorKind::RateLimited => "rate limited",
            GatewayErrorKind::BadResponse => "bad response",
            GatewayErrorKind::InvalidRequest => "invalid request",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: {message} (after {retries} retries)")]
pub struct GatewayError {
    pub kind: GatewayErrorKind,
    pub message: String,
    pub retries: u32,
}

impl GatewayError {
    pub fn new(kind: GatewayErrorKind, message: impl Into<String>, retries: u32) -> Self {
        Self {
            kind,
            message: message.into(),
            retries,
        }
    }
}

pub trait ChatGateway: Send + Sync {
    fn complete(&self, exchange: &ChatExchange) -> Result<Completion, GatewayError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    /// Base URL or full chat-completions URL.
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }

    /// Reads the URL, key and model from the environment.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(LLM_URL_ENV).ok().filter(|u| !u.is_empty())?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var(LLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        if let Ok(model) = std::env::var(LLM_MODEL_ENV) {
            if !model.is_empty() {
                cfg.model = model;
            }
        }
        Some(cfg)
    }

    pub fn endpoint(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

/// OpenAI-compatible chat-completions client.
pub struct HttpGateway {
    config: HttpConfig,
    endpoint: String,
    agent: ureq::Agent,
    limit: InFlightLimit,
}

impl HttpGateway {
    pub fn new(config: HttpConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: config.endpoint(),
            limit: InFlightLimit::new(config.max_in_flight),
            config,
            agent,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn attempt(&self, exchange: &ChatExchange) -> Result<String, (GatewayErrorKind, String)> {
        let body = CompletionRequest {
            model: &self.config.model,
            messages: &exchange.messages,
            temperature: exchange.temperature,
            top_p: exchange.top_p,
            max_tokens: exchange.max_tokens,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let transport = |e: ureq::Error| {
            if crate::scoring::is_timeout(&e) {
                (GatewayErrorKind::Timeout, e.to_string())
            } else {
                (GatewayErrorKind::Transport, e.to_string())
            }
        };
        let mut resp = req.send_json(&body).map_err(transport)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err((GatewayErrorKind::AuthFailure, format!("HTTP {status}"))),
            408 => return Err((GatewayErrorKind::Timeout, format!("HTTP {status}"))),
            429 => return Err((GatewayErrorKind::RateLimited, format!("HTTP {status}"))),
            500..=599 => return Err((GatewayErrorKind::Transport, format!("HTTP {status}"))),
            _ => return Err((GatewayErrorKind::BadResponse, format!("HTTP {status}"))),
        }
        let parsed: CompletionResponse = resp.body_mut().read_json().map_err(|e| {
            if crate::scoring::is_timeout(&e) {
                (GatewayErrorKind::Timeout, e.to_string())
            } else {
                (GatewayErrorKind::BadResponse, e.to_string())
            }
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| {
                (
                    GatewayErrorKind::BadResponse,
                    "response carries no assistant text".to_string(),
                )
            })
    }
}

impl ChatGateway for HttpGateway {
    fn complete(&self, exchange: &ChatExchange) -> Result<Completion, GatewayError> {
        exchange.validate()?;
        let _permit = self.limit.acquire();
        let mut retries = 0;
        loop {
            match self.attempt(exchange) {
                Ok(text) => return Ok(Completion { text, retries }),
                Err((kind, message)) => {
                    if !kind.is_transient() || retries >= self.config.max_retries {
                        return Err(GatewayError::new(kind, message, retries));
                    }
                    let wait = self.config.backoff_base.saturating_mul(1 << retries.min(16));
                    log::debug!("{kind} from {}: {message}; retrying in {wait:?}", self.endpoint);
                    thread::sleep(wait);
                    retries += 1;
                }
            }
        }
    }
}

fn question_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn default_topic(s: Symptom) -> &'static str {
    use Symptom::*;
    match s {
        Sadness => "feeling sad",
        Pessimism => "feeling discouraged about the future",
        PastFailure => "thinking about my past failures",
        LossOfPleasure => "getting less pleasure from things",
        GuiltyFeelings => "feeling guilty",
        PunishmentFeelings => "feeling like I am being punished",
        SelfDislike => "being disappointed in myself",
        SelfCriticalness => "blaming myself for everything",
        SuicidalThoughts => "thoughts of not wanting to live",
        Crying => "crying",
        Agitation => "feeling restless and wound up",
        LossOfInterest => "losing interest in other people and activities",
        Indecisiveness => "making decisions",
        Worthlessness => "feeling worthless",
        LossOfEnergy => "having enough energy",
        ChangesInSleep => "my sleep",
        Irritability => "getting irritated",
        ChangesInAppetite => "my appetite",
        ConcentrationDifficulty => "keeping my focus",
        TirednessOrFatigue => "feeling tired or fatigued",
        LossOfInterestInSex => "my interest in sex",
    }
}

fn default_aliases(s: Symptom) -> &'static [&'static str] {
    use Symptom::*;
    match s {
        Sadness => &["sad", "sadness", "unhappy", "mood"],
        Pessimism => &["pessimistic", "hopeless", "discouraged"],
        PastFailure => &["failure", "failures", "failed"],
        LossOfPleasure => &["pleasure", "enjoy", "enjoyment"],
        GuiltyFeelings => &["guilt", "guilty"],
        PunishmentFeelings => &["punished", "punishment"],
        SelfDislike => &["dislike yourself", "disappointed in yourself"],
        SelfCriticalness => &["self-critical", "blame yourself", "criticize yourself"],
        SuicidalThoughts => &["suicidal", "suicide", "killing yourself"],
        Crying => &["cry", "cried", "tears"],
        Agitation => &["agitated", "restless"],
        LossOfInterest => &["lost interest", "interest in other people"],
        Indecisiveness => &["indecisive", "decisions"],
        Worthlessness => &["worthless"],
        LossOfEnergy => &["energy"],
        ChangesInSleep => &["sleep", "sleeping"],
        Irritability => &["irritable", "irritated"],
        ChangesInAppetite => &["appetite", "eating"],
        ConcentrationDifficulty => &["concentrate", "concentration", "focus"],
        TirednessOrFatigue => &["tired", "tiredness", "fatigue", "fatigued"],
        LossOfInterestInSex => &["sex", "sexual"],
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn default_phrase(s: Symptom, score: u8) -> String {
    if s == Symptom::Sadness && score == 0 {
        return "I've been feeling fine lately.".to_string();
    }
    let topic = default_topic(s);
    match score {
        0 => format!("Honestly, {topic} has not been an issue for me at all."),
        1 => format!("I notice {topic} now and then, but it doesn't bother me much."),
        2 => format!("{} has been very unpleasant lately, though I can stand it.", capitalize(topic)),
        _ => format!("{} has become so bad that I can hardly stand it.", capitalize(topic)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("phrase for {symptom} score {score} is empty")]
    EmptyPhrase { symptom: Symptom, score: u8 },
    #[error("phrases overlap: {0:?} contains {1:?}")]
    Overlap(String, String),
    #[error("score key {0:?} is not 0..=3")]
    BadScoreKey(String),
    #[error("{0:?} list is empty")]
    EmptyList(&'static str),
    #[error("{0:?} list holds a blank entry")]
    BlankEntry(&'static str),
    #[error(transparent)]
    Symptom(#[from] crate::bdi::UnknownSymptom),
    #[error("persona file: {0}")]
    Format(String),
}

/// Reply phrases shared by the scripted persona and the mock evaluator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseBook {
    severity: Vec<[String; 4]>,
    aliases: Vec<Vec<Vec<String>>>,
    refusals: Vec<String>,
    fillers: Vec<String>,
}

impl Default for PhraseBook {
    fn default() -> Self {
        Self {
            severity: Symptom::ALL
                .iter()
                .map(|&s| std::array::from_fn(|score| default_phrase(s, score as u8)))
                .collect(),
            aliases: Symptom::ALL
                .iter()
                .map(|&s| {
                    std::iter::once(s.name())
                        .chain(default_aliases(s).iter().copied())
                        .map(question_tokens)
                        .collect()
                })
                .collect(),
            refusals: vec![
                "I'd rather not talk about that.".to_string(),
                "That feels a bit personal. Can we talk about something else?".to_string(),
            ],
            fillers: vec![
                "Not much to say about that, really.".to_string(),
                "I'm not sure what you mean.".to_string(),
            ],
        }
    }
}

impl PhraseBook {
    pub fn phrase(&self, symptom: Symptom, score: u8) -> &str {
        &self.severity[symptom.index()][usize::from(score.min(MAX_SEVERITY))]
    }

    pub fn set_phrase(&mut self, symptom: Symptom, score: u8, phrase: impl Into<String>) {
        self.severity[symptom.index()][usize::from(score.min(MAX_SEVERITY))] = phrase.into();
    }

    pub fn add_alias(&mut self, symptom: Symptom, alias: &str) {
        let toks = question_tokens(alias);
        if !toks.is_empty() {
            self.aliases[symptom.index()].push(toks);
        }
    }

    pub fn refusals(&self) -> &[String] {
        &self.refusals
    }

    pub fn fillers(&self) -> &[String] {
        &self.fillers
    }

    /// Checks that every phrase decodes unambiguously.
    pub fn validate(&self) -> Result<(), ScriptError> {
        if self.refusals.is_empty() {
            return Err(ScriptError::EmptyList("refusal_phrases"));
        }
        if self.fillers.is_empty() {
            return Err(ScriptError::EmptyList("filler_phrases"));
        }
        if self.refusals.iter().any(|r| r.trim().is_empty()) {
            return Err(ScriptError::BlankEntry("refusal_phrases"));
        }
        if self.fillers.iter().any(|f| f.trim().is_empty()) {
            return Err(ScriptError::BlankEntry("filler_phrases"));
        }
        let mut all: Vec<&str> = Vec::new();
        for s in Symptom::ALL {
            for score in 0..=MAX_SEVERITY {
                let p = self.phrase(s, score);
                if p.trim().is_empty() {
                    return Err(ScriptError::EmptyPhrase { symptom: s, score });
                }
                all.push(p);
            }
        }
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                if i != j && a.contains(b) {
                    return Err(ScriptError::Overlap(a.to_string(), b.to_string()));
                }
            }
            for other in self.refusals.iter().chain(&self.fillers) {
                if other.contains(a) {
                    return Err(ScriptError::Overlap(other.clone(), a.to_string()));
                }
            }
        }
        Ok(())
    }

    /// Symptom named in `text`, preferring the longest alias, then the earliest.
    pub fn find_symptom(&self, text: &str) -> Option<Symptom> {
        let toks = question_tokens(text);
        let mut best: Option<(usize, usize, Symptom)> = None;
        for s in Symptom::ALL {
            for alias in &self.aliases[s.index()] {
                let len: usize = alias.iter().map(String::len).sum::<usize>() + alias.len();
                if alias.len() > toks.len() {
                    continue;
                }
                if let Some(pos) = toks.windows(alias.len()).position(|w| w == alias.as_slice()) {
                    let better = match best {
                        None => true,
                        Some((bl, bp, _)) => len > bl || (len == bl && pos < bp),
                    };
                    if better {
                        best = Some((len, pos, s));
                    }
                }
            }
        }
        best.map(|(_, _, s)| s)
    }

    /// Scores whose phrases appear in `text`. A later phrase wins.
    pub fn decode(&self, text: &str) -> BTreeMap<Symptom, u8> {
        let mut found: BTreeMap<Symptom, (usize, u8)> = BTreeMap::new();
        for s in Symptom::ALL {
            for score in 0..=MAX_SEVERITY {
                if let Some(pos) = text.rfind(self.phrase(s, score)) {
                    let e = found.entry(s).or_insert((pos, score));
                    if pos > e.0 {
                        *e = (pos, score);
                    }
                }
            }
        }
        found.into_iter().map(|(s, (_, v))| (s, v)).collect()
    }
}

fn pick<'a>(options: &'a [String], key: &str) -> &'a str {
    let h = key.bytes().fold(0usize, |acc, b| acc.wrapping_mul(31).wrapping_add(b.into()));
    &options[h % options.len()]
}

fn asks_about_diagnosis(text: &str) -> bool {
    question_tokens(text)
        .iter()
        .any(|t| t.starts_with("depress") || t.starts_with("diagnos"))
}

/// Deterministic offline persona with a fixed symptom profile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaScript {
    pub name: String,
    pub ground_truth: SymptomVector,
    pub book: PhraseBook,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PersonaFile {
    persona: String,
    scores: SymptomVector,
    #[serde(default)]
    refusal_phrases: Option<Vec<String>>,
    #[serde(default)]
    filler_phrases: Option<Vec<String>>,
    #[serde(default)]
    severity_phrases: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    aliases: BTreeMap<String, Vec<String>>,
}

impl PersonaScript {
    pub fn new(name: impl Into<String>, ground_truth: SymptomVector) -> Self {
        Self {
            name: name.into(),
            ground_truth,
            book: PhraseBook::default(),
        }
    }

    pub fn with_book(mut self, book: PhraseBook) -> Result<Self, ScriptError> {
        book.validate()?;
        self.book = book;
        Ok(self)
    }

    /// Parses the JSON persona format; phrase and alias fields are optional overrides.
    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let file: PersonaFile =
            serde_json::from_str(text).map_err(|e| ScriptError::Format(e.to_string()))?;
        let mut book = PhraseBook::default();
        if let Some(r) = file.refusal_phrases {
            book.refusals = r;
        }
        if let Some(f) = file.filler_phrases {
            book.fillers = f;
        }
        for (name, by_score) in &file.severity_phrases {
            let s: Symptom = name.parse()?;
            for (score, phrase) in by_score {
                let score: u8 = score
                    .trim()
                    .parse()
                    .ok()
                    .filter(|v| *v <= MAX_SEVERITY)
                    .ok_or_else(|| ScriptError::BadScoreKey(score.clone()))?;
                book.set_phrase(s, score, phrase.clone());
            }
        }
        for (name, aliases) in &file.aliases {
            let s: Symptom = name.parse()?;
            for a in aliases {
                book.add_alias(s, a);
            }
        }
        Self::new(file.persona, file.scores).with_book(book)
    }

    /// Refusal for diagnosis questions, the severity phrase for a named
    /// symptom, otherwise a neutral filler.
    pub fn reply(&self, question: &str) -> String {
        if asks_about_diagnosis(question) {
            return pick(&self.book.refusals, question).to_string();
        }
        match self.book.find_symptom(question) {
            Some(s) => self.book.phrase(s, self.ground_truth.get(s)).to_string(),
            None => pick(&self.book.fillers, question).to_string(),
        }
    }
}

pub fn persona_reply(script: &PersonaScript, agent_question: &str) -> String {
    script.reply(agent_question)
}

/// Question wording produced by the mock agent; the mock evaluator counts it.
pub const MOCK_QUESTION_PREFIX: &str = "Can you tell me more about ";

fn mock_question(symptom: &str) -> String {
    format!("{MOCK_QUESTION_PREFIX}{symptom}?")
}

/// Evaluator stand-in: decodes persona phrases back to scores and plans the
/// next unassessed symptom in questionnaire order. A symptom asked twice
/// without evidence is skipped.
pub fn mock_evaluator(transcript: &str, book: &PhraseBook) -> String {
    let decoded = book.decode(transcript);
    let next = Symptom::ALL.into_iter().find(|s| {
        !decoded.contains_key(s) && transcript.matches(&mock_question(s.name())).count() < 2
    });
    let mut out = String::from("```\n");
    out.push_str(&format!(
        "\"reasoning\": \"Matched {} symptom statements in the user's replies.\",\n",
        decoded.len()
    ));
    out.push_str("\"symptoms detected\": \n");
    for (s, score) in &decoded {
        out.push_str(&format!("{}: {},\n", s.name(), score));
    }
    match next {
        Some(s) => {
            out.push_str(&format!(
                "\"reason for selecting the next symptom\": \"{} has not been covered yet.\",\n",
                s.name()
            ));
            out.push_str(&format!("\"next symptom\": \"{}\"\n", s.name()));
        }
        None => {
            out.push_str("\"reason for selecting the next symptom\": \"None\",\n");
            out.push_str("\"next symptom\": \"None\"\n");
        }
    }
    out.push_str("```");
    out
}

static TARGET_SYMPTOM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"the symptom: '([^']+)'").expect("valid regex"));

fn mock_agent(user_text: &str) -> String {
    let symptom = TARGET_SYMPTOM
        .captures(user_text)
        .map(|c| c[1].to_string())
        .unwrap_or_else(|| Symptom::Sadness.name().to_string());
    let wants = |field: &str| user_text.contains(&format!("\"{field}\": \"your {field}\""));
    let mut fields = vec![("reasoning", format!("Next I will explore {symptom}."))];
    if wants("message") {
        fields.push(("message", "Thank you for sharing that with me.".to_string()));
    }
    if wants("experience") {
        fields.push(("experience", "I went through a rough patch once too.".to_string()));
    }
    fields.push(("question", mock_question(&symptom)));
    let body: Vec<String> = fields
        .into_iter()
        .map(|(k, v)| format!("\"{k}\": \"{v}\""))
        .collect();
    format!("```\n{}\n```", body.join(",\n"))
}

/// Offline gateway answering agent prompts with a templated question and
/// evaluator prompts with [`mock_evaluator`].
#[derive(Debug, Clone, Default)]
pub struct MockGateway {
    book: PhraseBook,
}

impl MockGateway {
    pub fn new(book: PhraseBook) -> Self {
        Self { book }
    }
}

/// Opening words of the evaluation agent's system prompt.
pub(crate) const EVALUATOR_SYSTEM_LEAD: &str = "You are an expert in assessing depression symptoms";

impl ChatGateway for MockGateway {
    fn complete(&self, exchange: &ChatExchange) -> Result<Completion, GatewayError> {
        exchange.validate()?;
        let user = exchange.last_user().ok_or_else(|| {
            GatewayError::new(GatewayErrorKind::InvalidRequest, "no user message", 0)
        })?;
        let is_evaluator = exchange
            .system()
            .is_some_and(|s| s.starts_with(EVALUATOR_SYSTEM_LEAD));
        let text = if is_evaluator {
            mock_evaluator(user, &self.book)
        } else {
            mock_agent(user)
        };
        Ok(Completion { text, retries: 0 })
    }
}
