//! Text tables with two-decimal half-up rounding. JSON output keeps full
//! precision and comes straight from the serde types.

use crate::bdi::Assessment;
use crate::corpus::{LabelStats, StatsReport};
use crate::dialogue::InteractionStats;
use crate::metrics::MetricReport;

/// Rounds half away from zero to two decimals. Representation noise below
/// 1e-6 of a cent is ignored so that 0.125 becomes 0.13.
pub fn round2(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let cents = ((x.abs() * 100.0 * 1e6).round() / 1e6 + 0.5).floor();
    (cents / 100.0).copysign(x)
}

pub fn fmt2(x: f64) -> String {
    let r = round2(x);
    if r == 0.0 {
        return "0.00".to_string();
    }
    format!("{r:.2}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), fmt2)
}

/// Left-aligned first column, right-aligned rest.
#[derive(Debug, Clone, Default)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self {
            headers: headers.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row<S: Into<String>>(&mut self, cells: impl IntoIterator<Item = S>) -> &mut Self {
        self.rows.push(cells.into_iter().map(Into::into).collect());
        self
    }

    pub fn render(&self) -> String {
        let cols = self.headers.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.headers).chain(&self.rows) {
            for (i, c) in r.iter().enumerate().take(cols) {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let mut out = String::new();
            for (i, w) in width.iter().enumerate() {
                let cell = cells.get(i).map_or("", String::as_str);
                if i > 0 {
                    out.push_str("  ");
                    out.push_str(&format!("{cell:>w$}"));
                } else {
                    out.push_str(&format!("{cell:<w$}"));
                }
            }
            out.trim_end().to_string()
        };
        let mut out = line(&self.headers);
        out.push('\n');
        let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
        out.push_str(&line(&rule));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn metric_table(name: &str, r: &MetricReport) -> String {
    let mut decisions = Table::new([
        "run", "P", "R", "F1", "ERDE5", "ERDE50", "latencyT", "speed", "Flatency",
    ]);
    decisions.row([
        name.to_string(),
        fmt2(r.precision),
        fmt2(r.recall),
        fmt2(r.f1),
        fmt2(r.erde_5),
        fmt2(r.erde_50),
        fmt_opt(r.latency_tp),
        fmt_opt(r.speed),
        fmt2(r.f_latency),
    ]);
    let mut out = decisions.render();
    if !r.rankings.is_empty() {
        let mut ranking = Table::new(["writings", "P@10", "NDCG@10", "NDCG@100"]);
        for k in &r.rankings {
            ranking.row([
                k.writings.to_string(),
                fmt_opt(k.p_at_10),
                fmt_opt(k.ndcg_at_10),
                fmt_opt(k.ndcg_at_100),
            ]);
        }
        out.push('\n');
        out.push_str(&ranking.render());
    }
    out
}

pub fn assessment_table(name: &str, a: &Assessment) -> String {
    let mut t = Table::new(["run", "personas", "DCHR", "ADODL", "ASHR"]);
    t.row([
        name.to_string(),
        a.personas.to_string(),
        fmt2(a.dchr),
        fmt2(a.adodl),
        fmt2(a.ashr),
    ]);
    let mut per = Table::new(["persona", "pred total", "true total", "pred cat", "true cat", "hits/21"]);
    for p in &a.per_persona {
        per.row([
            p.persona.clone(),
            p.predicted_total.to_string(),
            p.true_total.to_string(),
            p.predicted_category.to_string(),
            p.true_category.to_string(),
            p.symptom_hits.to_string(),
        ]);
    }
    format!("{}\n{}", t.render(), per.render())
}

pub fn stats_table(s: &StatsReport) -> String {
    let mut t = Table::new([
        "label",
        "posts",
        "comments",
        "avg comments/post",
        "max",
        "min",
        "avg words/post",
        "avg self-comments/post",
    ]);
    let mut add = |label: &str, l: &LabelStats| {
        t.row([
            label.to_string(),
            l.posts.to_string(),
            l.comments.to_string(),
            fmt2(l.avg_comments_per_post),
            l.max_comments_per_post.to_string(),
            l.min_comments_per_post.to_string(),
            fmt2(l.avg_words_per_post),
            fmt2(l.avg_self_comments_per_post),
        ]);
    };
    add("negative", &s.negative);
    add("positive", &s.positive);
    add("total", &s.total);
    t.render()
}

pub fn interaction_table(name: &str, s: &InteractionStats) -> String {
    let mut t = Table::new(["run", "runs", "messages/run", "characters/message"]);
    t.row([
        name.to_string(),
        s.runs.to_string(),
        fmt2(s.messages_per_run),
        fmt2(s.chars_per_message),
    ]);
    t.render()
}
