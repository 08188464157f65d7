//! BDI-II symptom vectors, severity categories and the pilot-task
//! effectiveness metrics (DCHR, ADODL, ASHR).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Highest score a single symptom can take.
pub const MAX_SEVERITY: u8 = 3;
/// Highest possible BDI total (21 × 3).
pub const MAX_TOTAL: u32 = 63;

macro_rules! symptoms {
    ($($variant:ident => $name:literal),+ $(,)?) => {
        /// The 21 BDI-II symptoms, in questionnaire order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Symptom { $($variant),+ }

        impl Symptom {
            pub const ALL: [Symptom; 21] = [$(Symptom::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $(Symptom::$variant => $name),+ }
            }
        }
    };
}

symptoms! {
    Sadness => "Sadness",
    Pessimism => "Pessimism",
    PastFailure => "Past Failure",
    LossOfPleasure => "Loss of Pleasure",
    GuiltyFeelings => "Guilty Feelings",
    PunishmentFeelings => "Punishment Feelings",
    SelfDislike => "Self-Dislike",
    SelfCriticalness => "Self-Criticalness",
    SuicidalThoughts => "Suicidal Thoughts or Wishes",
    Crying => "Crying",
    Agitation => "Agitation",
    LossOfInterest => "Loss of Interest",
    Indecisiveness => "Indecisiveness",
    Worthlessness => "Worthlessness",
    LossOfEnergy => "Loss of Energy",
    ChangesInSleep => "Changes in Sleeping Pattern",
    Irritability => "Irritability",
    ChangesInAppetite => "Changes in Appetite",
    ConcentrationDifficulty => "Concentration Difficulty",
    TirednessOrFatigue => "Tiredness or Fatigue",
    LossOfInterestInSex => "Loss of Interest in Sex",
}

fn fold(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

impl Symptom {
    pub fn index(self) -> usize {
        self as usize
    }

    /// Case-, space- and punctuation-insensitive lookup of a canonical name.
    pub fn lookup(name: &str) -> Option<Symptom> {
        let key = fold(name);
        if key.is_empty() {
            return None;
        }
        Symptom::ALL.into_iter().find(|s| fold(s.name()) == key)
    }
}

impl fmt::Display for Symptom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown symptom {0:?}")]
pub struct UnknownSymptom(pub String);

impl FromStr for Symptom {
    type Err = UnknownSymptom;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Symptom::lookup(s).ok_or_else(|| UnknownSymptom(s.to_owned()))
    }
}

impl Serialize for Symptom {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Symptom {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BdiError {
    #[error("score {score} for {symptom} outside 0..=3")]
    ScoreOutOfRange { symptom: Symptom, score: i64 },
    #[error(transparent)]
    UnknownSymptom(#[from] UnknownSymptom),
    #[error("total {0} outside 0..=63")]
    OutOfRange(u32),
    #[error("invalid cutoffs {0:?}: need 0 < mild < moderate < severe <= 63")]
    InvalidCutoffs([u32; 3]),
    #[error("prediction count {preds} does not match truth count {truths}")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("no personas to evaluate")]
    Empty,
    #[error("persona {0} appears more than once")]
    DuplicatePersona(String),
    #[error("no prediction for persona {0}")]
    MissingPrediction(String),
    #[error("prediction for persona {0} has no ground truth")]
    UnknownPersona(String),
}

/// Severity scores for the 21 symptoms plus which ones were ever assessed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SymptomVector {
    scores: [u8; 21],
    assessed: u32,
}

impl SymptomVector {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_scores(scores: [u8; 21]) -> Result<Self, BdiError> {
        let mut v = Self::zeros();
        for (s, score) in Symptom::ALL.into_iter().zip(scores) {
            v.set(s, score.into())?;
        }
        v.assessed = 0;
        Ok(v)
    }

    pub fn get(&self, symptom: Symptom) -> u8 {
        self.scores[symptom.index()]
    }

    /// Stores a score and marks the symptom as assessed.
    pub fn set(&mut self, symptom: Symptom, score: i64) -> Result<(), BdiError> {
        if !(0..=i64::from(MAX_SEVERITY)).contains(&score) {
            return Err(BdiError::ScoreOutOfRange { symptom, score });
        }
        self.scores[symptom.index()] = score as u8;
        self.assessed |= 1 << symptom.index();
        Ok(())
    }

    pub fn is_assessed(&self, symptom: Symptom) -> bool {
        self.assessed & (1 << symptom.index()) != 0
    }

    pub fn assessed(&self) -> impl Iterator<Item = Symptom> + '_ {
        Symptom::ALL.into_iter().filter(|s| self.is_assessed(*s))
    }

    pub fn scores(&self) -> [u8; 21] {
        self.scores
    }

    pub fn iter(&self) -> impl Iterator<Item = (Symptom, u8)> + '_ {
        Symptom::ALL.into_iter().map(|s| (s, self.get(s)))
    }

    /// Overwrites every listed symptom; unlisted ones keep their value.
    pub fn merge(&mut self, update: &BTreeMap<Symptom, u8>) {
        for (&s, &score) in update {
            self.scores[s.index()] = score.min(MAX_SEVERITY);
            self.assessed |= 1 << s.index();
        }
    }

    /// Builds a vector from a partial name → score map; missing names are 0.
    pub fn from_named<'a>(
        named: impl IntoIterator<Item = (&'a str, i64)>,
    ) -> Result<Self, BdiError> {
        let mut v = Self::zeros();
        for (name, score) in named {
            let s: Symptom = name.parse()?;
            v.set(s, score)?;
        }
        Ok(v)
    }
}

impl Serialize for SymptomVector {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(21))?;
        for (sym, score) in self.iter() {
            map.serialize_entry(sym.name(), &score)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for SymptomVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: BTreeMap<String, i64> = BTreeMap::deserialize(d)?;
        SymptomVector::from_named(raw.iter().map(|(k, v)| (k.as_str(), *v)))
            .map_err(serde::de::Error::custom)
    }
}

/// A persona's name with its symptom scores, as stored in prediction and
/// ground-truth files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaScores {
    pub persona: String,
    pub scores: SymptomVector,
}

/// Reads one object, a JSON array of objects, or one object per line.
pub fn parse_persona_scores(text: &str) -> Result<Vec<PersonaScores>, serde_json::Error> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed);
    }
    let mut out = Vec::new();
    let stream = serde_json::Deserializer::from_str(text).into_iter::<PersonaScores>();
    for item in stream {
        out.push(item?);
    }
    Ok(out)
}

pub fn bdi_total(v: &SymptomVector) -> u32 {
    v.scores.iter().map(|&s| u32::from(s)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DepressionCategory {
    Minimal,
    Mild,
    Moderate,
    Severe,
}

impl fmt::Display for DepressionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Lower bounds of the Mild, Moderate and Severe bands; Minimal starts at 0
/// and Severe ends at 63.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutoffs {
    pub mild: u32,
    pub moderate: u32,
    pub severe: u32,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            mild: 10,
            moderate: 19,
            severe: 30,
        }
    }
}

impl Cutoffs {
    pub fn new(mild: u32, moderate: u32, severe: u32) -> Result<Self, BdiError> {
        if 0 < mild && mild < moderate && moderate < severe && severe <= MAX_TOTAL {
            Ok(Self {
                mild,
                moderate,
                severe,
            })
        } else {
            Err(BdiError::InvalidCutoffs([mild, moderate, severe]))
        }
    }
}

pub fn categorize(total: u32, cutoffs: &Cutoffs) -> Result<DepressionCategory, BdiError> {
    if total > MAX_TOTAL {
        return Err(BdiError::OutOfRange(total));
    }
    Ok(if total >= cutoffs.severe {
        DepressionCategory::Severe
    } else if total >= cutoffs.moderate {
        DepressionCategory::Moderate
    } else if total >= cutoffs.mild {
        DepressionCategory::Mild
    } else {
        DepressionCategory::Minimal
    })
}

fn check_pair(preds: &[SymptomVector], truths: &[SymptomVector]) -> Result<(), BdiError> {
    if preds.len() != truths.len() {
        return Err(BdiError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(BdiError::Empty);
    }
    Ok(())
}

/// Depression Category Hit Rate.
pub fn dchr(
    preds: &[SymptomVector],
    truths: &[SymptomVector],
    cutoffs: &Cutoffs,
) -> Result<f64, BdiError> {
    check_pair(preds, truths)?;
    let mut hits = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        if categorize(bdi_total(p), cutoffs)? == categorize(bdi_total(t), cutoffs)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Average Difference between Overall Depression Levels.
pub fn adodl(preds: &[SymptomVector], truths: &[SymptomVector]) -> Result<f64, BdiError> {
    check_pair(preds, truths)?;
    let max = f64::from(MAX_TOTAL);
    let sum: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (max - f64::from(bdi_total(p).abs_diff(bdi_total(t)))) / max)
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Average Symptom Hit Rate (exact-score matches).
pub fn ashr(preds: &[SymptomVector], truths: &[SymptomVector]) -> Result<f64, BdiError> {
    check_pair(preds, truths)?;
    let sum: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let hits = p.scores.iter().zip(&t.scores).filter(|(a, b)| a == b).count();
            hits as f64 / 21.0
        })
        .sum();
    Ok(sum / preds.len() as f64)
}

/// Per-persona comparison used in assessment reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaAssessment {
    pub persona: String,
    pub predicted_total: u32,
    pub true_total: u32,
    pub predicted_category: DepressionCategory,
    pub true_category: DepressionCategory,
    pub symptom_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub personas: usize,
    pub dchr: f64,
    pub adodl: f64,
    pub ashr: f64,
    pub per_persona: Vec<PersonaAssessment>,
}

/// Pairs predictions with ground truth by persona name and scores them.
pub fn assess(
    preds: &[PersonaScores],
    truths: &[PersonaScores],
    cutoffs: &Cutoffs,
) -> Result<Assessment, BdiError> {
    let mut by_name: BTreeMap<&str, &SymptomVector> = BTreeMap::new();
    for p in preds {
        if by_name.insert(&p.persona, &p.scores).is_some() {
            return Err(BdiError::DuplicatePersona(p.persona.clone()));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut pv = Vec::with_capacity(truths.len());
    let mut tv = Vec::with_capacity(truths.len());
    let mut per_persona = Vec::with_capacity(truths.len());
    for t in truths {
        if !seen.insert(t.persona.as_str()) {
            return Err(BdiError::DuplicatePersona(t.persona.clone()));
        }
        let p = *by_name
            .get(t.persona.as_str())
            .ok_or_else(|| BdiError::MissingPrediction(t.persona.clone()))?;
        let (pt, tt) = (bdi_total(p), bdi_total(&t.scores));
        per_persona.push(PersonaAssessment {
            persona: t.persona.clone(),
            predicted_total: pt,
            true_total: tt,
            predicted_category: categorize(pt, cutoffs)?,
            true_category: categorize(tt, cutoffs)?,
            symptom_hits: p.iter().zip(t.scores.iter()).filter(|(a, b)| a.1 == b.1).count(),
        });
        pv.push(*p);
        tv.push(t.scores);
    }
    if let Some(extra) = by_name.keys().find(|n| !seen.contains(*n)) {
        return Err(BdiError::UnknownPersona(extra.to_string()));
    }
    Ok(Assessment {
        personas: tv.len(),
        dchr: dchr(&pv, &tv, cutoffs)?,
        adodl: adodl(&pv, &tv)?,
        ashr: ashr(&pv, &tv)?,
        per_persona,
    })
}
