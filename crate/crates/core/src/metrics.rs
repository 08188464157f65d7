//! Decision-based and ranking-based early-risk measures.
//!
//! All functions take a map from subject to the round of its first positive
//! decision (`None` when never flagged) and a map from subject to gold label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::stream::DecisionLog;

pub type FirstPositive = BTreeMap<String, Option<u32>>;
pub type Truth = BTreeMap<String, Label>;

/// Slope of the latency penalty used for `speed`.
pub const DEFAULT_SPEED_P: f64 = 0.0078;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("subject sets differ: {only_log} only in decisions, {only_truth} only in truth (e.g. {example:?})")]
    KeyMismatch {
        only_log: usize,
        only_truth: usize,
        example: String,
    },
    #[error("no true positives were flagged")]
    NoTruePositives,
    #[error("ranking of length {len} is too short for k = {k}")]
    KShortRanking { k: usize, len: usize },
    #[error("subject {0:?} has no gold label")]
    UnknownSubject(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("decision log is empty")]
    EmptyLog,
}

fn check_keys(first_positive: &FirstPositive, truth: &Truth) -> Result<(), MetricError> {
    let only_log: Vec<&String> = first_positive
        .keys()
        .filter(|k| !truth.contains_key(*k))
        .collect();
    let only_truth: Vec<&String> = truth
        .keys()
        .filter(|k| !first_positive.contains_key(*k))
        .collect();
    if only_log.is_empty() && only_truth.is_empty() {
        return Ok(());
    }
    Err(MetricError::KeyMismatch {
        only_log: only_log.len(),
        only_truth: only_truth.len(),
        example: only_log
            .first()
            .or(only_truth.first())
            .map(|s| s.to_string())
            .unwrap_or_default(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(first_positive: &FirstPositive, truth: &Truth) -> Result<Confusion, MetricError> {
    check_keys(first_positive, truth)?;
    let mut c = Confusion::default();
    for (subject, flagged) in first_positive {
        match (flagged.is_some(), truth[subject].is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 with "ever flagged" as the positive prediction.
pub fn prf1(first_positive: &FirstPositive, truth: &Truth) -> Result<Prf1, MetricError> {
    let c = confusion(first_positive, truth)?;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf1 {
        precision,
        recall,
        f1,
    })
}

/// Deadline and costs of an ERDE evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErdeParams {
    pub o: u32,
    pub c_fp: f64,
    pub c_fn: f64,
    pub c_tp: f64,
}

impl ErdeParams {
    pub fn new(o: u32, c_fp: f64, c_fn: f64, c_tp: f64) -> Result<Self, MetricError> {
        if o < 1 {
            return Err(MetricError::InvalidParams("ERDE deadline o must be >= 1".into()));
        }
        for (name, c) in [("c_fp", c_fp), ("c_fn", c_fn), ("c_tp", c_tp)] {
            if !c.is_finite() || c < 0.0 {
                return Err(MetricError::InvalidParams(format!("{name} = {c} must be a finite non-negative cost")));
            }
        }
        Ok(Self { o, c_fp, c_fn, c_tp })
    }

    /// `c_fn = c_tp = 1` and `c_fp` equal to the positive rate of `truth`.
    pub fn standard(o: u32, truth: &Truth) -> Result<Self, MetricError> {
        let positives = truth.values().filter(|l| l.is_positive()).count();
        Self::new(o, ratio(positives, truth.len()), 1.0, 1.0)
    }

    /// Latency cost factor `1 - 1/(1 + e^(k - o))`.
    pub fn latency_cost(&self, k: u32) -> f64 {
        let x = f64::from(k) - f64::from(self.o);
        1.0 - 1.0 / (1.0 + x.exp())
    }

    fn subject_cost(&self, flagged_at: Option<u32>, label: Label) -> f64 {
        match (flagged_at, label.is_positive()) {
            (Some(_), false) => self.c_fp,
            (None, true) => self.c_fn,
            (Some(k), true) => self.c_tp * self.latency_cost(k),
            (None, false) => 0.0,
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            o: self.o,
            c_fp: self.c_fp * alpha,
            c_fn: self.c_fn * alpha,
            c_tp: self.c_tp * alpha,
        }
    }
}

/// Early Risk Detection Error averaged over subjects.
pub fn erde(
    first_positive: &FirstPositive,
    truth: &Truth,
    params: &ErdeParams,
) -> Result<f64, MetricError> {
    check_keys(first_positive, truth)?;
    if first_positive.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = first_positive
        .iter()
        .map(|(s, k)| params.subject_cost(*k, truth[s]))
        .sum();
    Ok(total / first_positive.len() as f64)
}

/// Latency penalty `-1 + 2/(1 + e^(-p (k - 1)))`; zero at `k = 1`.
pub fn latency_penalty(k: f64, p: f64) -> f64 {
    -1.0 + 2.0 / (1.0 + (-p * (k - 1.0)).exp())
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Median first-positive round over true positives, and the median speed
/// `1 - penalty(k)` over the same subjects.
pub fn latency_speed(
    first_positive: &FirstPositive,
    truth: &Truth,
    p: f64,
) -> Result<(f64, f64), MetricError> {
    check_keys(first_positive, truth)?;
    let mut ks: Vec<f64> = first_positive
        .iter()
        .filter(|(s, _)| truth[*s].is_positive())
        .filter_map(|(_, k)| k.map(f64::from))
        .collect();
    if ks.is_empty() {
        return Err(MetricError::NoTruePositives);
    }
    ks.sort_by(f64::total_cmp);
    let mut speeds: Vec<f64> = ks.iter().map(|&k| 1.0 - latency_penalty(k, p)).collect();
    speeds.sort_by(f64::total_cmp);
    Ok((median(&ks), median(&speeds)))
}

pub fn f_latency(f1: f64, speed: f64) -> f64 {
    f1 * speed
}

/// Orders subjects by descending score, ties broken by ascending id.
pub fn rank_by_score(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut items: Vec<(&String, f64)> = scores.iter().map(|(s, v)| (s, *v)).collect();
    items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(s, _)| s.clone()).collect()
}

fn relevances<S: AsRef<str>>(ranking: &[S], truth: &Truth) -> Result<Vec<bool>, MetricError> {
    ranking
        .iter()
        .map(|s| {
            truth
                .get(s.as_ref())
                .map(|l| l.is_positive())
                .ok_or_else(|| MetricError::UnknownSubject(s.as_ref().to_owned()))
        })
        .collect()
}

fn check_k(k: usize, len: usize) -> Result<(), MetricError> {
    if k == 0 || k > len {
        Err(MetricError::KShortRanking { k, len })
    } else {
        Ok(())
    }
}

pub fn precision_at_k<S: AsRef<str>>(
    ranking: &[S],
    truth: &Truth,
    k: usize,
) -> Result<f64, MetricError> {
    check_k(k, ranking.len())?;
    let rel = relevances(&ranking[..k], truth)?;
    Ok(rel.iter().filter(|r| **r).count() as f64 / k as f64)
}

fn dcg(rel: impl Iterator<Item = bool>) -> f64 {
    rel.enumerate()
        .filter(|(_, r)| *r)
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum()
}

/// Binary-relevance NDCG@k; the ideal ordering places every relevant
/// subject of `ranking` first.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], truth: &Truth, k: usize) -> Result<f64, MetricError> {
    check_k(k, ranking.len())?;
    let rel = relevances(ranking, truth)?;
    let positives = rel.iter().filter(|r| **r).count();
    if positives == 0 {
        return Ok(0.0);
    }
    let ideal = dcg((0..k).map(|i| i < positives));
    Ok(dcg(rel[..k].iter().copied()) / ideal)
}

/// What `evaluate` computes beyond the fixed decision metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub checkpoints: Vec<u32>,
    pub speed_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoints: vec![1, 100, 500, 1000],
            speed_p: DEFAULT_SPEED_P,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub writings: u32,
    pub p_at_10: Option<f64>,
    pub ndcg_at_10: Option<f64>,
    pub ndcg_at_100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subjects: usize,
    pub positives: usize,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub erde_5: f64,
    pub erde_50: f64,
    /// `None` when no true positive was flagged.
    pub latency_tp: Option<f64>,
    pub speed: Option<f64>,
    pub f_latency: f64,
    pub rankings: Vec<RankingReport>,
}

fn optional(r: Result<f64, MetricError>) -> Result<Option<f64>, MetricError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricError::KShortRanking { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Computes every decision and ranking measure for a finished run.
pub fn evaluate(
    log: &DecisionLog,
    truth: &Truth,
    config: &EvalConfig,
) -> Result<MetricReport, MetricError> {
    if log.is_empty() {
        return Err(MetricError::EmptyLog);
    }
    let fp = log.first_positive();
    let c = confusion(&fp, truth)?;
    let scores = prf1(&fp, truth)?;
    let erde_5 = erde(&fp, truth, &ErdeParams::standard(5, truth)?)?;
    let erde_50 = erde(&fp, truth, &ErdeParams::standard(50, truth)?)?;
    let (latency_tp, speed) = match latency_speed(&fp, truth, config.speed_p) {
        Ok((l, s)) => (Some(l), Some(s)),
        Err(MetricError::NoTruePositives) => (None, None),
        Err(e) => return Err(e),
    };
    let f_lat = f_latency(scores.f1, speed.unwrap_or(0.0));

    let mut rankings = Vec::with_capacity(config.checkpoints.len());
    for &writings in &config.checkpoints {
        let ranking = rank_by_score(&log.scores_at(writings));
        rankings.push(RankingReport {
            writings,
            p_at_10: optional(precision_at_k(&ranking, truth, 10))?,
            ndcg_at_10: optional(ndcg_at_k(&ranking, truth, 10))?,
            ndcg_at_100: optional(ndcg_at_k(&ranking, truth, 100))?,
        });
    }

    Ok(MetricReport {
        subjects: fp.len(),
        positives: truth.values().filter(|l| l.is_positive()).count(),
        confusion: c,
        precision: scores.precision,
        recall: scores.recall,
        f1: scores.f1,
        erde_5,
        erde_50,
        latency_tp,
        speed,
        f_latency: f_lat,
        rankings,
    })
}
