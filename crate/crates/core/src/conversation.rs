//! Conversation threads: tree construction, text cleaning, target-context
//! extraction and the `[MSG] [USER] {type} {text}` serialization.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Submission,
    Comment,
}

/// One submission or comment of a thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    pub parent_id: Option<String>,
    pub author: String,
    pub title: Option<String>,
    pub body: String,
    pub timestamp: u64,
    pub kind: MessageKind,
}

impl Message {
    pub fn submission(
        id: impl Into<String>,
        author: impl Into<String>,
        title: Option<&str>,
        body: impl Into<String>,
        timestamp: u64,
    ) -> Self {
        Self {
            id: id.into(),
            parent_id: None,
            author: author.into(),
            title: title.map(str::to_owned),
            body: body.into(),
            timestamp,
            kind: MessageKind::Submission,
        }
    }

    pub fn comment(
        id: impl Into<String>,
        parent_id: impl Into<String>,
        author: impl Into<String>,
        body: impl Into<String>,
        timestamp: u64,
    ) -> Self {
        Self {
            id: id.into(),
            parent_id: Some(parent_id.into()),
            author: author.into(),
            title: None,
            body: body.into(),
            timestamp,
            kind: MessageKind::Comment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("thread has no submission")]
    MissingRoot,
    #[error("thread has more than one submission: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("submission {0} carries a parent id")]
    RootHasParent(String),
    #[error("duplicate message id {0}")]
    DuplicateId(String),
    #[error("comment {id} has unresolvable parent {parent:?}")]
    OrphanComment { id: String, parent: Option<String> },
    #[error("messages unreachable from the submission (cycle): {0:?}")]
    CycleDetected(Vec<String>),
}

/// A submission plus its hierarchy of comments, seen from one target author.
///
/// Children lists are ordered by `(timestamp, id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadTree {
    thread_id: String,
    root: Message,
    children: BTreeMap<String, Vec<Message>>,
    target_author: String,
}

fn chrono_key(m: &Message) -> (u64, &str) {
    (m.timestamp, m.id.as_str())
}

/// Builds a validated [`ThreadTree`] from a flat list of messages.
pub fn build_tree(
    messages: Vec<Message>,
    target_author: impl Into<String>,
) -> Result<ThreadTree, TreeError> {
    let roots: Vec<&Message> = messages
        .iter()
        .filter(|m| m.kind == MessageKind::Submission)
        .collect();
    match roots.len() {
        0 => return Err(TreeError::MissingRoot),
        1 => {}
        _ => {
            let mut ids: Vec<String> = roots.iter().map(|m| m.id.clone()).collect();
            ids.sort();
            return Err(TreeError::MultipleRoots(ids));
        }
    }
    if roots[0].parent_id.is_some() {
        return Err(TreeError::RootHasParent(roots[0].id.clone()));
    }

    let mut ids = HashSet::with_capacity(messages.len());
    for m in &messages {
        if !ids.insert(m.id.as_str()) {
            return Err(TreeError::DuplicateId(m.id.clone()));
        }
    }
    for m in messages.iter().filter(|m| m.kind == MessageKind::Comment) {
        match &m.parent_id {
            Some(p) if ids.contains(p.as_str()) => {}
            other => {
                return Err(TreeError::OrphanComment {
                    id: m.id.clone(),
                    parent: other.clone(),
                })
            }
        }
    }

    let total = messages.len();
    let mut root = None;
    let mut children: BTreeMap<String, Vec<Message>> = BTreeMap::new();
    for m in messages {
        match m.kind {
            MessageKind::Submission => root = Some(m),
            MessageKind::Comment => {
                let parent = m.parent_id.clone().unwrap_or_default();
                children.entry(parent).or_default().push(m);
            }
        }
    }
    let root = root.ok_or(TreeError::MissingRoot)?;
    for list in children.values_mut() {
        list.sort_by(|a, b| chrono_key(a).cmp(&chrono_key(b)));
    }

    let mut reached: HashSet<&str> = HashSet::new();
    let mut queue = VecDeque::from([root.id.as_str()]);
    while let Some(id) = queue.pop_front() {
        if !reached.insert(id) {
            continue;
        }
        if let Some(list) = children.get(id) {
            queue.extend(list.iter().map(|c| c.id.as_str()));
        }
    }
    if reached.len() != total {
        let mut stuck: Vec<String> = children
            .values()
            .flatten()
            .filter(|m| !reached.contains(m.id.as_str()))
            .map(|m| m.id.clone())
            .collect();
        stuck.sort();
        return Err(TreeError::CycleDetected(stuck));
    }

    Ok(ThreadTree {
        thread_id: root.id.clone(),
        root,
        children,
        target_author: target_author.into(),
    })
}

impl ThreadTree {
    /// Thread identifier; defaults to the submission id.
    pub fn thread_id(&self) -> &str {
        &self.thread_id
    }

    pub fn with_thread_id(mut self, thread_id: impl Into<String>) -> Self {
        self.thread_id = thread_id.into();
        self
    }

    pub fn root(&self) -> &Message {
        &self.root
    }

    pub fn target_author(&self) -> &str {
        &self.target_author
    }

    pub fn children_of(&self, id: &str) -> &[Message] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Total number of messages, submission included.
    pub fn len(&self) -> usize {
        1 + self.comment_count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of comments at any depth.
    pub fn comment_count(&self) -> usize {
        self.children.values().map(Vec::len).sum()
    }

    /// Depth-first pre-order walk, siblings in chronological order.
    pub fn preorder(&self) -> Vec<&Message> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![&self.root];
        while let Some(m) = stack.pop() {
            out.push(m);
            stack.extend(self.children_of(&m.id).iter().rev());
        }
        out
    }

    /// All messages sorted by `(timestamp, id)`.
    pub fn chronological(&self) -> Vec<&Message> {
        let mut all = self.preorder();
        all.sort_by(|a, b| chrono_key(a).cmp(&chrono_key(b)));
        all
    }

    /// Number of levels, counting the submission as level 1.
    pub fn depth(&self) -> usize {
        let mut deepest = 0;
        let mut stack = vec![(&self.root, 1usize)];
        while let Some((m, d)) = stack.pop() {
            deepest = deepest.max(d);
            stack.extend(self.children_of(&m.id).iter().map(|c| (c, d + 1)));
        }
        deepest
    }

    pub fn into_messages(self) -> Vec<Message> {
        let mut out = vec![self.root];
        out.extend(self.children.into_values().flatten());
        out
    }

    fn parent_map(&self) -> HashMap<&str, &str> {
        self.children
            .iter()
            .flat_map(|(parent, list)| list.iter().map(move |c| (c.id.as_str(), parent.as_str())))
            .collect()
    }

    /// Rewrites every message and the target author without touching the
    /// shape of the tree. Ids and parent links must be preserved by `f`.
    pub(crate) fn map_messages(
        self,
        target_author: String,
        mut f: impl FnMut(Message) -> Message,
    ) -> ThreadTree {
        let children = self
            .children
            .into_iter()
            .map(|(k, list)| (k, list.into_iter().map(&mut f).collect()))
            .collect();
        ThreadTree {
            thread_id: self.thread_id,
            root: f(self.root),
            children,
            target_author,
        }
    }
}

static BRACKET_SPAN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[[^\[\]]*\]").expect("static regex"));

fn is_url_token(token: &str) -> bool {
    let lower = token.to_lowercase();
    if lower.contains("http://") || lower.contains("https://") {
        return true;
    }
    lower
        .trim_start_matches(['(', '<', '"', '\'', '*', '_'])
        .starts_with("www.")
}

/// Removes URLs, line breaks and square-bracket spans, then collapses
/// whitespace.
pub fn clean_text(raw: &str) -> String {
    let mut text = raw.to_owned();
    loop {
        let next = BRACKET_SPAN.replace_all(&text, "");
        if next == text.as_str() {
            break;
        }
        text = next.into_owned();
    }
    text.split_whitespace()
        .filter(|t| !is_url_token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Target,
    Context,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Target => "TARGET",
            Role::Context => "CONTEXT",
        })
    }
}

/// A cleaned message tagged with whether the target subject wrote it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTaggedMessage {
    pub role: Role,
    /// Title of a submission, if it had a non-empty one.
    pub title: Option<String>,
    pub text: String,
    pub source_id: Option<String>,
    pub timestamp: u64,
}

impl RoleTaggedMessage {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            title: None,
            text: text.into(),
            source_id: None,
            timestamp: 0,
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    /// Title and body joined by a space when a title exists.
    pub fn content(&self) -> String {
        match self.title.as_deref() {
            Some(t) if !t.is_empty() && !self.text.is_empty() => format!("{t} {}", self.text),
            Some(t) if !t.is_empty() => t.to_owned(),
            _ => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("target author {0:?} wrote nothing in thread {1}")]
    TargetAbsent(String, String),
}

fn tag(message: &Message, target: &str) -> RoleTaggedMessage {
    let role = if message.author == target {
        Role::Target
    } else {
        Role::Context
    };
    let title = message
        .title
        .as_deref()
        .map(clean_text)
        .filter(|t| !t.is_empty());
    RoleTaggedMessage {
        role,
        title,
        text: clean_text(&message.body),
        source_id: Some(message.id.clone()),
        timestamp: message.timestamp,
    }
}

/// Keeps the messages that give context to the target subject.
///
/// When the target wrote at least one comment, the result holds every
/// target-authored message, the direct replies to those messages, and the
/// ancestor chain of each target comment up to the submission. When the
/// target only wrote the submission, the result is the submission and its
/// direct children. Output is chronological.
pub fn extract_relevant(tree: &ThreadTree) -> Result<Vec<RoleTaggedMessage>, ExtractError> {
    let target = tree.target_author();
    let all = tree.chronological();
    let mut keep: HashSet<&str> = HashSet::new();

    let target_comments: Vec<&Message> = all
        .iter()
        .copied()
        .filter(|m| m.kind == MessageKind::Comment && m.author == target)
        .collect();

    if !target_comments.is_empty() {
        let parents = tree.parent_map();
        for m in all.iter().filter(|m| m.author == target) {
            keep.insert(&m.id);
            keep.extend(tree.children_of(&m.id).iter().map(|c| c.id.as_str()));
        }
        for m in &target_comments {
            let mut cursor = m.id.as_str();
            while let Some(parent) = parents.get(cursor) {
                keep.insert(parent);
                cursor = parent;
            }
        }
    } else if tree.root().author == target {
        keep.insert(&tree.root().id);
        keep.extend(tree.children_of(&tree.root().id).iter().map(|c| c.id.as_str()));
    } else {
        return Err(ExtractError::TargetAbsent(
            target.to_owned(),
            tree.thread_id().to_owned(),
        ));
    }

    Ok(all
        .into_iter()
        .filter(|m| keep.contains(m.id.as_str()))
        .map(|m| tag(m, target))
        .collect())
}

/// Renders one `[MSG] [USER] {type} {text}` block.
pub fn serialize_block(message: &RoleTaggedMessage) -> String {
    format!("[MSG] [USER] {} {}", message.role, message.content())
}

/// Concatenates the blocks of `messages`, separated by single spaces.
pub fn serialize(messages: &[RoleTaggedMessage]) -> String {
    messages
        .iter()
        .map(serialize_block)
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig5b() -> ThreadTree {
        let msgs = vec![
            Message::submission("r", "tgt", Some("Help"), "I feel numb", 10),
            Message::comment("a", "r", "u1", "hang in there", 11),
            Message::comment("b", "r", "u2", "same here", 12),
            Message::comment("c", "r", "u3", "talk to someone", 13),
            Message::comment("a1", "a", "u4", "agreed", 14),
            Message::comment("b1", "b", "u5", "me too", 15),
        ];
        build_tree(msgs, "tgt").unwrap()
    }

    fn fig5a() -> ThreadTree {
        let msgs = vec![
            Message::submission("r", "op", Some("Rough week"), "anyone else?", 100),
            Message::comment("c1", "r", "u1", "yes, very", 101),
            Message::comment("c2", "r", "u2", "not really", 102),
            Message::comment("t", "c1", "tgt", "i cant sleep", 103),
            Message::comment("c3", "c2", "u3", "lucky you", 104),
            Message::comment("d1", "t", "u4", "have you tried therapy", 105),
            Message::comment("d2", "t", "u1", "same", 106),
        ];
        build_tree(msgs, "tgt").unwrap()
    }

    #[test]
    fn clean_text_examples() {
        assert_eq!(
            clean_text("I feel low\nsee https://x.y/z please"),
            "I feel low see please"
        );
        assert_eq!(clean_text(""), "");
        assert_eq!(clean_text("[removed] hello [deleted]"), "hello");
        assert_eq!(clean_text("go to www.example.com now"), "go to now");
        assert_eq!(clean_text("nested [a [b] c] end"), "nested end");
        assert_eq!(clean_text("  spaced\t\tout \r\n"), "spaced out");
    }

    #[test]
    fn build_tree_chain_and_single() {
        let t = build_tree(
            vec![
                Message::submission("r", "a", None, "x", 1),
                Message::comment("c1", "r", "b", "y", 2),
                Message::comment("c2", "c1", "c", "z", 3),
            ],
            "a",
        )
        .unwrap();
        assert_eq!(t.depth(), 3);
        assert_eq!(t.comment_count(), 2);

        let t = build_tree(vec![Message::submission("r", "a", None, "x", 1)], "a").unwrap();
        assert_eq!(t.depth(), 1);
        assert!(t.children_of("r").is_empty());
    }

    #[test]
    fn build_tree_errors() {
        assert_eq!(
            build_tree(vec![Message::comment("c1", "missing", "b", "y", 2)], "a"),
            Err(TreeError::MissingRoot)
        );
        assert!(matches!(
            build_tree(
                vec![
                    Message::submission("r1", "a", None, "x", 1),
                    Message::submission("r2", "a", None, "x", 1),
                ],
                "a"
            ),
            Err(TreeError::MultipleRoots(_))
        ));
        assert!(matches!(
            build_tree(
                vec![
                    Message::submission("r", "a", None, "x", 1),
                    Message::comment("c", "nope", "b", "y", 2),
                ],
                "a"
            ),
            Err(TreeError::OrphanComment { .. })
        ));
        assert_eq!(
            build_tree(
                vec![
                    Message::submission("r", "a", None, "x", 1),
                    Message::comment("c1", "c2", "b", "y", 2),
                    Message::comment("c2", "c1", "b", "y", 3),
                ],
                "a"
            ),
            Err(TreeError::CycleDetected(vec!["c1".into(), "c2".into()]))
        );
        assert!(matches!(
            build_tree(
                vec![
                    Message::submission("r", "a", None, "x", 1),
                    Message::comment("r", "r", "b", "y", 2),
                ],
                "a"
            ),
            Err(TreeError::DuplicateId(_))
        ));
    }

    #[test]
    fn siblings_ordered_by_time_then_id() {
        let t = build_tree(
            vec![
                Message::submission("r", "a", None, "x", 1),
                Message::comment("z", "r", "b", "y", 5),
                Message::comment("b", "r", "b", "y", 3),
                Message::comment("a", "r", "b", "y", 5),
            ],
            "a",
        )
        .unwrap();
        let ids: Vec<&str> = t.children_of("r").iter().map(|m| m.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "z"]);
    }

    #[test]
    fn target_only_in_submission_keeps_direct_children() {
        let out = extract_relevant(&fig5b()).unwrap();
        let ids: Vec<_> = out.iter().map(|m| m.source_id.as_deref().unwrap()).collect();
        assert_eq!(ids, ["r", "a", "b", "c"]);
        assert_eq!(out[0].role, Role::Target);
        assert!(out[1..].iter().all(|m| m.role == Role::Context));
    }

    #[test]
    fn target_in_comments_keeps_replies_and_ancestors() {
        let out = extract_relevant(&fig5a()).unwrap();
        let ids: Vec<_> = out.iter().map(|m| m.source_id.as_deref().unwrap()).collect();
        assert_eq!(ids, ["r", "c1", "t", "d1", "d2"]);
        let roles: Vec<_> = out.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            [Role::Context, Role::Context, Role::Target, Role::Context, Role::Context]
        );
    }

    #[test]
    fn absent_target_is_an_error() {
        let t = build_tree(
            vec![
                Message::submission("r", "a", None, "x", 1),
                Message::comment("c", "r", "b", "y", 2),
            ],
            "ghost",
        )
        .unwrap();
        assert!(matches!(extract_relevant(&t), Err(ExtractError::TargetAbsent(..))));
    }

    #[test]
    fn serialize_examples() {
        let msgs = [
            RoleTaggedMessage::new(Role::Target, "i cant sleep"),
            RoleTaggedMessage::new(Role::Context, "have you tried therapy"),
        ];
        assert_eq!(
            serialize(&msgs),
            "[MSG] [USER] TARGET i cant sleep [MSG] [USER] CONTEXT have you tried therapy"
        );
        assert_eq!(serialize(&[]), "");
        let titled = [RoleTaggedMessage::new(Role::Target, "I feel numb").with_title("Help")];
        assert_eq!(serialize(&titled), "[MSG] [USER] TARGET Help I feel numb");
    }

    fn arb_text() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                "[a-zA-Z]{1,8}",
                Just("https://x.y/z".to_owned()),
                Just("www.a.org".to_owned()),
                Just("[removed]".to_owned()),
                Just("[".to_owned()),
                Just("]".to_owned()),
                Just("\n".to_owned()),
                Just("  ".to_owned()),
                Just("[MSG]".to_owned()),
            ],
            0..20,
        )
        .prop_map(|parts| parts.concat())
    }

    /// Random tree: message i>0 hangs off a random earlier message.
    fn arb_tree() -> impl Strategy<Value = (Vec<Message>, String)> {
        (1usize..25)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0usize..1000, n),
                    prop::collection::vec(0usize..4, n),
                    prop::collection::vec(0u64..50, n),
                    0usize..4,
                )
            })
            .prop_map(|(parents, authors, times, target)| {
                let msgs = (0..parents.len())
                    .map(|i| {
                        let author = format!("u{}", authors[i]);
                        if i == 0 {
                            Message::submission("m0", author, Some("t"), "body", times[0])
                        } else {
                            let p = parents[i] % i;
                            Message::comment(
                                format!("m{i}"),
                                format!("m{p}"),
                                author,
                                format!("text {i}"),
                                times[i],
                            )
                        }
                    })
                    .collect();
                (msgs, format!("u{target}"))
            })
    }

    proptest! {
        #[test]
        fn clean_text_idempotent(s in arb_text()) {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(!once.contains('\n'));
            prop_assert!(!once.contains("http://") && !once.contains("https://"));
            prop_assert!(!once.contains("  "));
        }

        #[test]
        fn serialize_block_count(texts in prop::collection::vec((any::<bool>(), arb_text()), 0..10)) {
            let msgs: Vec<_> = texts
                .iter()
                .map(|(t, s)| RoleTaggedMessage::new(if *t { Role::Target } else { Role::Context }, clean_text(s)))
                .collect();
            let out = serialize(&msgs);
            let blocks: Vec<&str> = out.split("[MSG] ").filter(|b| !b.is_empty()).collect();
            prop_assert_eq!(blocks.len(), msgs.len());
            for b in blocks {
                prop_assert!(b.starts_with("[USER] TARGET ") || b.starts_with("[USER] CONTEXT "));
            }
        }

        #[test]
        fn tree_round_trips_messages((msgs, target) in arb_tree()) {
            let tree = build_tree(msgs.clone(), target).unwrap();
            let mut back = tree.into_messages();
            let mut orig = msgs;
            back.sort_by(|a, b| a.id.cmp(&b.id));
            orig.sort_by(|a, b| a.id.cmp(&b.id));
            prop_assert_eq!(back, orig);
        }

        #[test]
        fn extraction_is_chronological_subsequence((msgs, target) in arb_tree()) {
            let tree = build_tree(msgs, target.clone()).unwrap();
            let Ok(out) = extract_relevant(&tree) else {
                prop_assert!(tree.preorder().iter().all(|m| m.author != target));
                return Ok(());
            };
            let order: Vec<&str> = tree.chronological().iter().map(|m| m.id.as_str()).collect();
            let mut pos = 0;
            for m in &out {
                let id = m.source_id.as_deref().unwrap();
                let found = order[pos..].iter().position(|x| *x == id);
                prop_assert!(found.is_some());
                pos += found.unwrap() + 1;
            }
            let targets = out.iter().filter(|m| m.role == Role::Target).count();
            let commented = tree.preorder().iter().any(|m| m.kind == MessageKind::Comment && m.author == target);
            if commented {
                prop_assert!(targets >= 1);
                // every ancestor of a target comment is present
                let kept: HashSet<&str> = out.iter().map(|m| m.source_id.as_deref().unwrap()).collect();
                let parents = tree.parent_map();
                for m in tree.preorder().iter().filter(|m| m.author == target) {
                    let mut cur = m.id.as_str();
                    while let Some(p) = parents.get(cur) {
                        prop_assert!(kept.contains(p));
                        cur = p;
                    }
                }
            } else {
                prop_assert_eq!(targets, 1);
                prop_assert_eq!(out.len(), 1 + tree.children_of("m0").len());
            }
        }
    }
}
