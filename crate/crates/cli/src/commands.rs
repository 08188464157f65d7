use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use riskloom_core::bdi::{self, Cutoffs, PersonaScores};
use riskloom_core::corpus::{self, Anonymizer, IngestError, Label, Source, DEFAULT_COMMUNITIES};
use riskloom_core::dialogue::{self, DialogueState, SessionFailure, Termination};
use riskloom_core::gateway::{self, ChatGateway, HttpConfig, HttpGateway, MockGateway, PersonaScript};
use riskloom_core::metrics::{self, EvalConfig, Truth};
use riskloom_core::report::{self, Table};
use riskloom_core::scoring::{self, DecisionPolicy, Lexicon, ScorerBinding, ScoringClient};
use riskloom_core::stream::{self, DecisionLog, StreamSimulator};
use riskloom_core::SubjectRecord;

use crate::config::Config;
use crate::{
    AssessArgs, DialogueRunArgs, EvalArgs, Format, IngestArgs, ScorerKind, StatsArgs,
    StreamRunArgs, StreamServeArgs,
};

#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, configuration or input consistency. Exit code 1.
    Invalid(anyhow::Error),
    /// Anything that went wrong while doing the work. Exit code 2.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn invalid(msg: impl std::fmt::Display) -> Failure {
    Failure::Invalid(anyhow!("{msg}"))
}

pub struct Output {
    format: Format,
}

impl Output {
    pub fn new(format: Format) -> Self {
        Self { format }
    }

    fn emit<T: Serialize>(&self, json: &T, table: &str) -> Result<(), Failure> {
        let stdout = io::stdout();
        let mut out = stdout.lock();
        if self.format != Format::Table {
            serde_json::to_writer_pretty(&mut out, json).map_err(io::Error::from)?;
            writeln!(out)?;
        }
        if self.format == Format::Both {
            writeln!(out)?;
        }
        if self.format != Format::Json {
            write!(out, "{table}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("creating directory {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn created_at() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        })
}

fn load_dumps(
    paths: &[PathBuf],
) -> Result<Vec<riskloom_core::ThreadTree>, Failure> {
    let mut trees = Vec::new();
    for p in paths {
        let loaded = corpus::load_thread_dump(p)
            .with_context(|| format!("loading thread dump {}", p.display()))?;
        trees.extend(loaded);
    }
    Ok(trees)
}

#[derive(Serialize)]
struct IngestReport {
    subjects: usize,
    positives: usize,
    negatives: usize,
    sample_n: usize,
    seed: u64,
    counts: Vec<corpus::ManifestEntry>,
    skipped_threads: Vec<String>,
}

pub fn ingest(args: IngestArgs, config: &Config, out: &Output) -> Result<(), Failure> {
    let communities = args
        .communities
        .or_else(|| config.ingest.communities.clone())
        .unwrap_or_else(|| DEFAULT_COMMUNITIES.iter().map(|s| s.to_string()).collect());
    let anonymizer = Anonymizer::new(&communities);
    let seed = args.seed.or(config.ingest.seed).unwrap_or(0);

    let mut skipped = Vec::new();
    let mut preprocess = |paths: &[PathBuf], label: Label, source: Source| -> Result<Vec<SubjectRecord>, Failure> {
        let mut records = Vec::new();
        for tree in load_dumps(paths)? {
            match anonymizer.preprocess(&tree, label, source) {
                Ok(r) => records.push(r),
                Err(IngestError::Extract(e)) => {
                    log::warn!("skipping thread {}: {e}", tree.thread_id());
                    skipped.push(tree.thread_id().to_string());
                }
                Err(e) => return Err(Failure::Runtime(e.into())),
            }
        }
        Ok(records)
    };
    let pos = preprocess(&args.positive, Label::Positive, Source::ScrapedPositive)?;
    let neg = preprocess(&args.negative, Label::Negative, Source::ScrapedNegative)?;

    let provided = match &args.provided {
        Some(p) => {
            let mut records = corpus::load_corpus(p)
                .with_context(|| format!("loading provided corpus {}", p.display()))?;
            if let Some(r) = records.iter().find(|r| r.label.is_positive()) {
                return Err(invalid(format!(
                    "provided corpus must hold negatives only; {} is positive",
                    r.subject_id
                )));
            }
            for r in &mut records {
                r.source = Source::Provided;
            }
            records
        }
        None => Vec::new(),
    };
    let scraped = pos.len() + neg.len();
    let sample_n = args
        .sample_n
        .or(config.ingest.sample_n)
        .unwrap_or(if args.provided.is_some() { scraped } else { 0 });

    let (records, manifest) =
        corpus::build_training_corpus(pos, neg, provided, sample_n, seed, created_at())
            .map_err(|e| match e {
                e @ IngestError::SampleTooLarge { .. } => Failure::Invalid(e.into()),
                e => Failure::Runtime(e.into()),
            })?;

    let mut w = create(&args.out)?;
    corpus::write_corpus(&records, &mut w)?;
    w.flush()?;
    let manifest_path = args.manifest.unwrap_or_else(|| {
        let mut name = args.out.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    });
    let mut mw = create(&manifest_path)?;
    serde_json::to_writer_pretty(&mut mw, &manifest).map_err(io::Error::from)?;
    writeln!(mw)?;
    mw.flush()?;

    let positives = records.iter().filter(|r| r.label.is_positive()).count();
    let report = IngestReport {
        subjects: records.len(),
        positives,
        negatives: records.len() - positives,
        sample_n,
        seed,
        counts: manifest.counts.clone(),
        skipped_threads: skipped,
    };
    let mut t = Table::new(["label", "source", "subjects"]);
    for c in &manifest.counts {
        let source = serde_json::to_value(c.source)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        t.row([u8::from(c.label).to_string(), source, c.count.to_string()]);
    }
    t.row(["total".to_string(), String::new(), records.len().to_string()]);
    out.emit(&report, &t.render())
}

pub fn stats(args: StatsArgs, out: &Output) -> Result<(), Failure> {
    if args.positive.is_empty() && args.negative.is_empty() {
        return Err(invalid("give at least one --positive or --negative dump"));
    }
    let mut labeled = Vec::new();
    for t in load_dumps(&args.negative)? {
        labeled.push((t, Label::Negative));
    }
    for t in load_dumps(&args.positive)? {
        labeled.push((t, Label::Positive));
    }
    let report = corpus::corpus_stats(&labeled);
    out.emit(&report, &report::stats_table(&report))
}

fn policy(args: &StreamRunArgs, config: &Config) -> Result<DecisionPolicy, Failure> {
    let d = DecisionPolicy::default();
    DecisionPolicy::new(
        args.threshold.or(config.stream.threshold).unwrap_or(d.threshold()),
        args.min_rounds.or(config.stream.min_rounds).unwrap_or(d.min_rounds()),
        args.consecutive_hits
            .or(config.stream.consecutive_hits)
            .unwrap_or(d.consecutive_hits()),
    )
    .map_err(|e| Failure::Invalid(e.into()))
}

fn load_lexicon(path: &Path) -> Result<Lexicon, Failure> {
    Lexicon::parse_tsv(open(path)?)
        .with_context(|| format!("reading lexicon {}", path.display()))
        .map_err(Failure::Invalid)
}

#[derive(Serialize)]
struct StreamReport {
    subjects: usize,
    rounds: u32,
    records: usize,
    flagged: usize,
    scorer: &'static str,
}

pub fn stream_run(args: StreamRunArgs, config: &Config, out: &Output) -> Result<(), Failure> {
    let policy = policy(&args, config)?;
    let lexicon_path = args
        .lexicon
        .clone()
        .or_else(|| config.stream.lexicon.as_ref().map(PathBuf::from));
    let lexicon = lexicon_path.as_deref().map(load_lexicon).transpose()?;
    let (binding, fallback) = match args.scorer {
        ScorerKind::Lexicon => {
            let lex = lexicon.ok_or_else(|| invalid("the lexicon scorer needs --lexicon"))?;
            (ScorerBinding::Lexicon(lex), None)
        }
        ScorerKind::Remote => {
            let endpoint = args
                .endpoint
                .clone()
                .or_else(|| config.stream.scorer_url.clone())
                .or_else(|| std::env::var(scoring::SCORER_URL_ENV).ok().filter(|u| !u.is_empty()))
                .ok_or_else(|| {
                    invalid(format!(
                        "the remote scorer needs --endpoint or {}",
                        scoring::SCORER_URL_ENV
                    ))
                })?;
            let binding = ScorerBinding::Remote {
                endpoint,
                timeout: Duration::from_secs_f64(config.stream.timeout_secs.unwrap_or(30.0)),
                max_in_flight: config.stream.max_in_flight.unwrap_or(4),
            };
            (binding, lexicon)
        }
    };
    let records = corpus::load_corpus(&args.corpus)
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let mut sim = StreamSimulator::from_records(&records).map_err(|e| Failure::Invalid(e.into()))?;
    let scorer_name = match binding {
        ScorerBinding::Lexicon(_) => "lexicon",
        ScorerBinding::Remote { .. } => "remote",
    };
    let mut client = ScoringClient::new(binding.into_scorer(), policy);
    if let Some(lex) = fallback {
        client = client.with_fallback(Box::new(lex));
    }
    let log = stream::run_stream(&mut sim, &mut client).context("stream run failed")?;
    let mut w = create(&args.out)?;
    log.write_jsonl(&mut w)?;
    w.flush()?;

    let fp = log.first_positive();
    let report = StreamReport {
        subjects: fp.len(),
        rounds: sim.current_round(),
        records: log.len(),
        flagged: fp.values().filter(|k| k.is_some()).count(),
        scorer: scorer_name,
    };
    let mut t = Table::new(["scorer", "subjects", "rounds", "records", "flagged"]);
    t.row([
        scorer_name.to_string(),
        report.subjects.to_string(),
        report.rounds.to_string(),
        report.records.to_string(),
        report.flagged.to_string(),
    ]);
    out.emit(&report, &t.render())
}

pub fn stream_serve(args: StreamServeArgs) -> Result<(), Failure> {
    let records = corpus::load_corpus(&args.corpus)
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    let mut sim = StreamSimulator::from_records(&records).map_err(|e| Failure::Invalid(e.into()))?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    let log = stream::wire::serve(&mut sim, stdin.lock(), stdout.lock()).context("serving stream")?;
    let mut w = create(&args.out)?;
    log.write_jsonl(&mut w)?;
    w.flush()?;
    log::info!("run finished after {} rounds, {} records", sim.current_round(), log.len());
    Ok(())
}

#[derive(Deserialize)]
struct TruthLine {
    subject_id: String,
    label: Label,
}

fn load_truth(path: &Path) -> Result<Truth, Failure> {
    let mut truth = Truth::new();
    for (idx, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TruthLine = serde_json::from_str(&line).map_err(|e| {
            Failure::Runtime(anyhow!("{} line {}: {e}", path.display(), idx + 1))
        })?;
        if let Some(prev) = truth.insert(t.subject_id.clone(), t.label) {
            if prev != t.label {
                return Err(invalid(format!(
                    "{}: subject {} has conflicting labels",
                    path.display(),
                    t.subject_id
                )));
            }
        }
    }
    Ok(truth)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a metrics::MetricReport,
}

pub fn eval(args: EvalArgs, config: &Config, out: &Output) -> Result<(), Failure> {
    let log = DecisionLog::read_jsonl(open(&args.log)?)
        .with_context(|| format!("reading decision log {}", args.log.display()))?;
    if log.is_empty() {
        return Err(invalid(format!("decision log {} is empty", args.log.display())));
    }
    let truth = load_truth(&args.truth)?;
    let mut cfg = EvalConfig::default();
    if let Some(c) = args.checkpoints.or_else(|| config.eval.checkpoints.clone()) {
        if c.is_empty() || c.contains(&0) {
            return Err(invalid("checkpoints must be positive writing counts"));
        }
        cfg.checkpoints = c;
    }
    if let Some(p) = config.eval.speed_p {
        if !(p.is_finite() && p > 0.0) {
            return Err(invalid("speed_p must be positive"));
        }
        cfg.speed_p = p;
    }
    let report = metrics::evaluate(&log, &truth, &cfg).map_err(|e| Failure::Invalid(e.into()))?;
    out.emit(
        &EvalOutput {
            name: &args.name,
            report: &report,
        },
        &report::metric_table(&args.name, &report),
    )
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_personas(paths: &[PathBuf]) -> Result<Vec<PersonaScript>, Failure> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            files.extend(json_files(p)?);
        } else {
            files.push(p.clone());
        }
    }
    let mut personas = Vec::new();
    let mut names = BTreeSet::new();
    for f in files {
        let script = PersonaScript::from_json(&read_text(&f)?)
            .with_context(|| format!("persona file {}", f.display()))
            .map_err(Failure::Invalid)?;
        if !names.insert(script.name.clone()) {
            return Err(invalid(format!("persona {} is defined twice", script.name)));
        }
        personas.push(script);
    }
    if personas.is_empty() {
        return Err(invalid("no persona files found"));
    }
    Ok(personas)
}

fn file_stem_for(persona: &str) -> String {
    persona
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn http_gateway(url: String, config: &Config) -> HttpGateway {
    let mut cfg = HttpConfig::new(url);
    let g = &config.gateway;
    cfg.api_key = g
        .api_key
        .clone()
        .or_else(|| std::env::var(gateway::LLM_KEY_ENV).ok().filter(|k| !k.is_empty()));
    if let Some(m) = g.model.clone().or_else(|| std::env::var(gateway::LLM_MODEL_ENV).ok()) {
        cfg.model = m;
    }
    if let Some(t) = g.timeout_secs {
        cfg.timeout = Duration::from_secs_f64(t);
    }
    if let Some(r) = g.max_retries {
        cfg.max_retries = r;
    }
    if let Some(n) = g.max_in_flight {
        cfg.max_in_flight = n;
    }
    HttpGateway::new(cfg)
}

#[derive(Serialize)]
struct SessionSummary {
    persona: String,
    agent_messages: u32,
    persona_replies: u32,
    termination: Option<Termination>,
    bdi_total: u32,
    error: Option<String>,
}

#[derive(Serialize)]
struct DialogueReport {
    strategy: String,
    sessions: Vec<SessionSummary>,
    interaction: dialogue::InteractionStats,
}

fn persist(dir: &Path, state: &DialogueState) -> Result<(), Failure> {
    let stem = file_stem_for(&state.persona_name);
    let mut t = create(&dir.join(format!("{stem}.transcript.jsonl")))?;
    state.write_jsonl(&mut t)?;
    t.flush()?;
    Ok(())
}

pub fn dialogue_run(args: DialogueRunArgs, config: &Config, out: &Output) -> Result<(), Failure> {
    let personas = load_personas(&args.persona_file)?;
    let url = args
        .gateway
        .clone()
        .or_else(|| config.gateway.url.clone())
        .or_else(|| std::env::var(gateway::LLM_URL_ENV).ok().filter(|u| !u.is_empty()))
        .ok_or_else(|| {
            invalid(format!("give --gateway URL, --gateway mock, or set {}", gateway::LLM_URL_ENV))
        })?;
    let results: Vec<Result<DialogueState, SessionFailure>> = if url == "mock" {
        personas
            .into_iter()
            .map(|mut p| {
                let gw = MockGateway::new(p.book.clone());
                let name = p.name.clone();
                dialogue::run_session(args.strategy, &name, &gw, &mut p)
            })
            .collect()
    } else {
        let gw = http_gateway(url, config);
        dialogue::run_sessions(args.strategy, personas, &gw as &dyn ChatGateway)
    };

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut sessions = Vec::new();
    let mut finished = Vec::new();
    let mut failures = 0;
    for r in results {
        let (state, error) = match r {
            Ok(s) => (s, None),
            Err(f) => {
                failures += 1;
                log::error!("{f}");
                (*f.state, Some(f.error.to_string()))
            }
        };
        persist(&args.out, &state)?;
        if error.is_none() {
            let pred = PersonaScores {
                persona: state.persona_name.clone(),
                scores: state.symptoms,
            };
            let path = args.out.join(format!("{}.json", file_stem_for(&state.persona_name)));
            let mut w = create(&path)?;
            serde_json::to_writer_pretty(&mut w, &pred).map_err(io::Error::from)?;
            writeln!(w)?;
            w.flush()?;
        }
        sessions.push(SessionSummary {
            persona: state.persona_name.clone(),
            agent_messages: state.agent_messages_sent,
            persona_replies: state.persona_replies,
            termination: state.terminated,
            bdi_total: bdi::bdi_total(&state.symptoms),
            error,
        });
        finished.push(state);
    }
    let stats = dialogue::interaction_stats(&finished);
    let mut t = Table::new(["persona", "agent msgs", "replies", "BDI total", "status"]);
    for s in &sessions {
        t.row([
            s.persona.clone(),
            s.agent_messages.to_string(),
            s.persona_replies.to_string(),
            s.bdi_total.to_string(),
            s.error.clone().unwrap_or_else(|| "ok".into()),
        ]);
    }
    let table = format!(
        "{}\n{}",
        t.render(),
        report::interaction_table(args.strategy.run_name(), &stats)
    );
    let report = DialogueReport {
        strategy: args.strategy.run_name().to_string(),
        sessions,
        interaction: stats,
    };
    out.emit(&report, &table)?;
    if failures > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{failures} session(s) failed; partial transcripts are in {}",
            args.out.display()
        )));
    }
    Ok(())
}

fn load_scores(path: &Path) -> Result<Vec<PersonaScores>, Failure> {
    bdi::parse_persona_scores(&read_text(path)?)
        .with_context(|| format!("reading scores from {}", path.display()))
        .map_err(Failure::Invalid)
}

#[derive(Serialize)]
struct AssessOutput<'a> {
    name: &'a str,
    cutoffs: Cutoffs,
    #[serde(flatten)]
    assessment: &'a bdi::Assessment,
}

pub fn assess(args: AssessArgs, config: &Config, out: &Output) -> Result<(), Failure> {
    let cutoffs = match args.cutoffs.as_deref().map(|c| [c[0], c[1], c[2]]).or(config.assess.cutoffs) {
        Some([a, b, c]) => Cutoffs::new(a, b, c).map_err(|e| Failure::Invalid(e.into()))?,
        None => Cutoffs::default(),
    };
    let mut preds = Vec::new();
    if !args.pred.is_dir() {
        return Err(Failure::Runtime(anyhow!(
            "prediction directory {} does not exist",
            args.pred.display()
        )));
    }
    for f in json_files(&args.pred)? {
        preds.extend(load_scores(&f)?);
    }
    let truths = load_scores(&args.truth)?;
    let assessment =
        bdi::assess(&preds, &truths, &cutoffs).map_err(|e| Failure::Invalid(e.into()))?;
    let by_name: BTreeMap<_, _> = assessment
        .per_persona
        .iter()
        .map(|p| (p.persona.clone(), p.symptom_hits))
        .collect();
    log::debug!("per-persona symptom hits: {by_name:?}");
    out.emit(
        &AssessOutput {
            name: &args.name,
            cutoffs,
            assessment: &assessment,
        },
        &report::assessment_table(&args.name, &assessment),
    )
}
