//! Thread-dump ingestion, anonymization, training-corpus assembly and
//! volumetric statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{
    build_tree, clean_text, extract_relevant, serialize_block, ExtractError, Message, MessageKind,
    ThreadTree, TreeError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        match l {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    ScrapedPositive,
    ScrapedNegative,
    Provided,
}

/// A labeled subject with its writings in delivery order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    pub writings: Vec<String>,
    pub source: Source,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        label: Label,
        writings: Vec<String>,
        source: Source,
    ) -> Result<Self, IngestError> {
        let subject_id = subject_id.into();
        if writings.is_empty() {
            return Err(IngestError::EmptyWritings(subject_id));
        }
        Ok(Self {
            subject_id,
            label,
            writings,
            source,
        })
    }

    /// The full serialized history (all writings joined by a space).
    pub fn text(&self) -> String {
        self.writings.join(" ")
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("thread {thread_id}: {source}")]
    Tree {
        thread_id: String,
        #[source]
        source: TreeError,
    },
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("requested sample of {requested} exceeds {available} provided subjects")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("subject {0} has no writings")]
    EmptyWritings(String),
}

/// One line of a thread dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpRecord {
    pub thread_id: String,
    pub id: String,
    pub parent_id: Option<String>,
    pub author: String,
    pub kind: MessageKind,
    pub title: Option<String>,
    pub body: String,
    pub created_utc: u64,
    pub target: String,
}

impl DumpRecord {
    fn into_message(self) -> Message {
        Message {
            id: self.id,
            parent_id: self.parent_id,
            author: self.author,
            title: self.title,
            body: self.body,
            timestamp: self.created_utc,
            kind: self.kind,
        }
    }
}

/// Parses a JSONL thread dump into one tree per `thread_id`, in order of
/// first appearance. Blank lines are skipped.
pub fn parse_thread_dump(reader: impl BufRead) -> Result<Vec<ThreadTree>, IngestError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (String, Vec<Message>)> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| IngestError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DumpRecord = serde_json::from_str(&line).map_err(|e| IngestError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let thread_id = rec.thread_id.clone();
        match groups.get_mut(&thread_id) {
            Some((target, msgs)) => {
                if *target != rec.target {
                    return Err(IngestError::Schema {
                        line: line_no,
                        message: format!(
                            "thread {thread_id} switches target from {target:?} to {:?}",
                            rec.target
                        ),
                    });
                }
                msgs.push(rec.into_message());
            }
            None => {
                order.push(thread_id.clone());
                let target = rec.target.clone();
                groups.insert(thread_id, (target, vec![rec.into_message()]));
            }
        }
    }
    order
        .into_iter()
        .map(|thread_id| {
            let (target, msgs) = groups.remove(&thread_id).unwrap_or_default();
            build_tree(msgs, target)
                .map(|t| t.with_thread_id(thread_id.clone()))
                .map_err(|source| IngestError::Tree { thread_id, source })
        })
        .collect()
}

pub fn load_thread_dump(path: &Path) -> Result<Vec<ThreadTree>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_thread_dump(BufReader::new(file))
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

/// Replaces whole-word, case-sensitive occurrences of any of `names`.
fn replace_names(text: &str, names: &[&str], replacement: &str) -> String {
    if names.is_empty() {
        return text.to_owned();
    }
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    'scan: while i < text.len() {
        let at_boundary = text[..i].chars().next_back().is_none_or(|c| !is_name_char(c));
        if at_boundary {
            for name in names {
                if text[i..].starts_with(name) {
                    let end = i + name.len();
                    if text[end..].chars().next().is_none_or(|c| !is_name_char(c)) {
                        out.push_str(replacement);
                        i = end;
                        continue 'scan;
                    }
                }
            }
        }
        let c = text[i..].chars().next().expect("in bounds");
        out.push(c);
        i += c.len_utf8();
    }
    out
}

/// Replaces participant names with a placeholder and strips references to
/// the source communities.
#[derive(Debug, Clone)]
pub struct Anonymizer {
    replacement: String,
    community_ref: Option<Regex>,
    collapse: Regex,
}

pub const DEFAULT_COMMUNITIES: [&str; 2] = ["depression", "AdviceForTeens"];

impl Default for Anonymizer {
    fn default() -> Self {
        Self::new(DEFAULT_COMMUNITIES)
    }
}

impl Anonymizer {
    pub fn new<S: AsRef<str>>(communities: impl IntoIterator<Item = S>) -> Self {
        let alts: Vec<String> = communities
            .into_iter()
            .map(|c| c.as_ref().trim().to_owned())
            .filter(|c| !c.is_empty())
            .map(|c| regex::escape(&c))
            .collect();
        let community_ref = (!alts.is_empty()).then(|| {
            Regex::new(&format!(r"(?i)(^|[\s(\[])(?:/?r/|/)(?:{})\b", alts.join("|")))
                .expect("escaped alternation")
        });
        Self {
            replacement: "user".to_owned(),
            community_ref,
            collapse: Regex::new(r"[ \t]{2,}").expect("static regex"),
        }
    }

    pub fn replacement(&self) -> &str {
        &self.replacement
    }

    /// Scrubs one text given the thread's participant names.
    pub fn scrub(&self, text: &str, names: &[&str]) -> String {
        let mut out = replace_names(text, names, &self.replacement);
        if let Some(re) = &self.community_ref {
            let mut removed = false;
            loop {
                let next = re.replace_all(&out, "${1}");
                if next == out.as_str() {
                    break;
                }
                out = next.into_owned();
                removed = true;
            }
            if removed {
                out = self.collapse.replace_all(&out, " ").trim().to_owned();
            }
        }
        out
    }

    fn participants<'a>(&self, tree: &'a ThreadTree) -> Vec<&'a str> {
        let mut names: Vec<&str> = tree
            .preorder()
            .into_iter()
            .map(|m| m.author.as_str())
            .chain(std::iter::once(tree.target_author()))
            .filter(|n| !n.is_empty() && *n != self.replacement)
            .collect();
        names.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        names.dedup();
        names
    }

    /// Returns the tree with every author, name mention and community
    /// reference scrubbed. Shape and ids are untouched.
    pub fn anonymize(&self, tree: ThreadTree) -> ThreadTree {
        let names: Vec<String> = self.participants(&tree).into_iter().map(str::to_owned).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let replacement = self.replacement.clone();
        tree.map_messages(replacement.clone(), |mut m| {
            m.author = replacement.clone();
            m.title = m.title.map(|t| self.scrub(&t, &names));
            m.body = self.scrub(&m.body, &names);
            m
        })
    }

    /// Extracts the target-relevant messages, then scrubs their text.
    ///
    /// Roles are assigned before names are replaced, otherwise every
    /// message would look target-authored.
    pub fn preprocess(
        &self,
        tree: &ThreadTree,
        label: Label,
        source: Source,
    ) -> Result<SubjectRecord, IngestError> {
        let names = self.participants(tree);
        let writings: Vec<String> = extract_relevant(tree)?
            .into_iter()
            .map(|mut m| {
                m.text = self.scrub(&m.text, &names);
                m.title = m.title.map(|t| self.scrub(&t, &names)).filter(|t| !t.is_empty());
                serialize_block(&m)
            })
            .collect();
        SubjectRecord::new(tree.thread_id(), label, writings, source)
    }
}

/// Anonymizes with the default community list.
pub fn anonymize(tree: ThreadTree) -> ThreadTree {
    Anonymizer::default().anonymize(tree)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: Label,
    pub source: Source,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub counts: Vec<ManifestEntry>,
    pub total: usize,
    pub sample_n: usize,
    pub sampling_seed: u64,
    pub created_at: u64,
}

/// Merges scraped positives, scraped negatives and a seeded uniform sample
/// (without replacement) of the provided negatives.
pub fn build_training_corpus(
    pos: Vec<SubjectRecord>,
    neg_scraped: Vec<SubjectRecord>,
    neg_provided: Vec<SubjectRecord>,
    sample_n: usize,
    seed: u64,
    created_at: u64,
) -> Result<(Vec<SubjectRecord>, CorpusManifest), IngestError> {
    if sample_n > neg_provided.len() {
        return Err(IngestError::SampleTooLarge {
            requested: sample_n,
            available: neg_provided.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, neg_provided.len(), sample_n).into_vec();
    picked.sort_unstable();

    let mut provided: Vec<Option<SubjectRecord>> = neg_provided.into_iter().map(Some).collect();
    let mut corpus = pos;
    corpus.extend(neg_scraped);
    corpus.extend(picked.into_iter().filter_map(|i| provided[i].take()));

    let mut counts: BTreeMap<(Label, Source), usize> = BTreeMap::new();
    for r in &corpus {
        *counts.entry((r.label, r.source)).or_default() += 1;
    }
    let manifest = CorpusManifest {
        counts: counts
            .into_iter()
            .map(|((label, source), count)| ManifestEntry {
                label,
                source,
                count,
            })
            .collect(),
        total: corpus.len(),
        sample_n,
        sampling_seed: seed,
        created_at,
    };
    Ok((corpus, manifest))
}

/// One line of the corpus JSONL: a single writing of a subject.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub subject_id: String,
    pub label: Label,
    pub source: Source,
    pub text: String,
}

pub fn write_corpus(records: &[SubjectRecord], mut out: impl Write) -> io::Result<()> {
    for r in records {
        for w in &r.writings {
            let line = CorpusLine {
                subject_id: r.subject_id.clone(),
                label: r.label,
                source: r.source,
                text: w.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a corpus JSONL, grouping lines by subject in order of first
/// appearance.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<SubjectRecord>, IngestError> {
    let mut order: Vec<SubjectRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let schema = |message: String| IngestError::Schema {
            line: line_no,
            message,
        };
        let line = line.map_err(|e| schema(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        match index.get(&rec.subject_id) {
            Some(&i) => {
                let existing = &mut order[i];
                if existing.label != rec.label || existing.source != rec.source {
                    return Err(schema(format!(
                        "subject {} changes label or source",
                        rec.subject_id
                    )));
                }
                existing.writings.push(rec.text);
            }
            None => {
                index.insert(rec.subject_id.clone(), order.len());
                order.push(SubjectRecord {
                    subject_id: rec.subject_id,
                    label: rec.label,
                    writings: vec![rec.text],
                    source: rec.source,
                });
            }
        }
    }
    Ok(order)
}

pub fn load_corpus(path: &Path) -> Result<Vec<SubjectRecord>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_corpus(BufReader::new(file))
}

/// Table-1 style figures for one group of posts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub posts: usize,
    pub comments: usize,
    pub avg_comments_per_post: f64,
    pub max_comments_per_post: usize,
    pub min_comments_per_post: usize,
    pub avg_words_per_post: f64,
    pub avg_self_comments_per_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub negative: LabelStats,
    pub positive: LabelStats,
    pub total: LabelStats,
}

#[derive(Debug, Clone, Copy, Default)]
struct ThreadCounts {
    comments: usize,
    words: usize,
    self_comments: usize,
}

fn thread_counts(tree: &ThreadTree) -> ThreadCounts {
    let root = tree.root();
    let post_text = match &root.title {
        Some(t) => format!("{t} {}", root.body),
        None => root.body.clone(),
    };
    let self_comments = tree
        .preorder()
        .into_iter()
        .filter(|m| m.kind == MessageKind::Comment && m.author == tree.target_author())
        .count();
    ThreadCounts {
        comments: tree.comment_count(),
        words: clean_text(&post_text).split_whitespace().count(),
        self_comments,
    }
}

fn summarize(counts: &[ThreadCounts]) -> LabelStats {
    let posts = counts.len();
    if posts == 0 {
        return LabelStats::default();
    }
    let comments: usize = counts.iter().map(|c| c.comments).sum();
    let words: usize = counts.iter().map(|c| c.words).sum();
    let selfc: usize = counts.iter().map(|c| c.self_comments).sum();
    LabelStats {
        posts,
        comments,
        avg_comments_per_post: comments as f64 / posts as f64,
        max_comments_per_post: counts.iter().map(|c| c.comments).max().unwrap_or(0),
        min_comments_per_post: counts.iter().map(|c| c.comments).min().unwrap_or(0),
        avg_words_per_post: words as f64 / posts as f64,
        avg_self_comments_per_post: selfc as f64 / posts as f64,
    }
}

/// Per-label and overall volumetric statistics.
pub fn corpus_stats(trees: &[(ThreadTree, Label)]) -> StatsReport {
    let counted: Vec<(ThreadCounts, Label)> = trees
        .par_iter()
        .map(|(t, l)| (thread_counts(t), *l))
        .collect();
    let pick = |want: Option<Label>| -> Vec<ThreadCounts> {
        counted
            .iter()
            .filter(|(_, l)| want.is_none_or(|w| w == *l))
            .map(|(c, _)| *c)
            .collect()
    };
    StatsReport {
        negative: summarize(&pick(Some(Label::Negative))),
        positive: summarize(&pick(Some(Label::Positive))),
        total: summarize(&pick(None)),
    }
}
