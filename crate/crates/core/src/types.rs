//! Domain types shared by every module: question identifiers, the question
//! catalog, interaction histories, target sets and finite distributions.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Index of an answer within a question's choice list.
pub type AnswerIndex = usize;

/// Opaque question identifier.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuestionId(pub String);

impl QuestionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for QuestionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for QuestionId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: QuestionId,
    pub text: String,
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
}

impl CatalogEntry {
    pub fn alphabet(&self) -> usize {
        self.choices.len()
    }
}

/// The question space. Entry order defines the catalog index used for
/// tie-breaking everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionCatalog {
    entries: Vec<CatalogEntry>,
    index: HashMap<QuestionId, usize>,
}

impl QuestionCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut feature_dim = None;
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate question id `{}`", e.id)));
            }
            if e.choices.len() < 2 {
                return Err(Error::Dataset(format!(
                    "question `{}` has {} choices; at least 2 required",
                    e.id,
                    e.choices.len()
                )));
            }
            if let Some(f) = &e.features {
                match feature_dim {
                    None => feature_dim = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(Error::Dataset(format!(
                            "question `{}` has feature dimension {} but earlier entries use {}",
                            e.id,
                            f.len(),
                            d
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, id: &QuestionId) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownQuestion(id.0.clone()))
    }

    pub fn contains(&self, id: &QuestionId) -> bool {
        self.index.contains_key(id)
    }

    pub fn entry(&self, id: &QuestionId) -> Result<&CatalogEntry> {
        Ok(&self.entries[self.index_of(id)?])
    }

    pub fn alphabet(&self, id: &QuestionId) -> Result<usize> {
        Ok(self.entry(id)?.alphabet())
    }

    pub fn ids(&self) -> impl Iterator<Item = &QuestionId> {
        self.entries.iter().map(|e| &e.id)
    }

    pub fn check_answer(&self, id: &QuestionId, answer: AnswerIndex) -> Result<()> {
        let alphabet = self.alphabet(id)?;
        if answer >= alphabet {
            return Err(Error::AnswerOutOfRange {
                question: id.0.clone(),
                answer,
                alphabet,
            });
        }
        Ok(())
    }

    /// Sorts question ids by catalog index.
    pub fn sort_by_index(&self, ids: &mut [QuestionId]) -> Result<()> {
        for id in ids.iter() {
            self.index_of(id)?;
        }
        ids.sort_by_key(|id| self.index[id]);
        Ok(())
    }
}

impl Serialize for QuestionCatalog {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.entries.serialize(s)
    }
}

impl<'de> Deserialize<'de> for QuestionCatalog {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<CatalogEntry>::deserialize(d)?;
        QuestionCatalog::new(entries).map_err(serde::de::Error::custom)
    }
}

/// One observed question-answer pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub question: QuestionId,
    pub answer: AnswerIndex,
}

/// Ordered question-answer pairs observed for one entity. A question appears
/// at most once.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct History {
    steps: Vec<Step>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_steps<I, Q>(steps: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Q, AnswerIndex)>,
        Q: Into<QuestionId>,
    {
        let mut h = Self::new();
        for (q, a) in steps {
            h.push(q.into(), a)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, question: QuestionId, answer: AnswerIndex) -> Result<()> {
        if self.contains(&question) {
            return Err(Error::AlreadyAsked(question.0));
        }
        self.steps.push(Step { question, answer });
        Ok(())
    }

    /// Returns a copy extended by one step.
    pub fn with(&self, question: QuestionId, answer: AnswerIndex) -> Result<Self> {
        let mut h = self.clone();
        h.push(question, answer)?;
        Ok(h)
    }

    pub fn contains(&self, question: &QuestionId) -> bool {
        self.steps.iter().any(|s| &s.question == question)
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            steps: self.steps[..len.min(self.steps.len())].to_vec(),
        }
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            steps: order.iter().map(|&i| self.steps[i].clone()).collect(),
        }
    }
}

/// The held-out questions whose joint answer defines the object of
/// uncertainty.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TargetSet {
    questions: Vec<QuestionId>,
}

impl TargetSet {
    pub fn new(questions: Vec<QuestionId>) -> Result<Self> {
        if questions.is_empty() {
            return Err(Error::InvalidConfig("target set must be non-empty".into()));
        }
        for (i, q) in questions.iter().enumerate() {
            if questions[..i].contains(q) {
                return Err(Error::InvalidConfig(format!("duplicate target `{q}`")));
            }
        }
        Ok(Self { questions })
    }

    pub fn questions(&self) -> &[QuestionId] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn contains(&self, q: &QuestionId) -> bool {
        self.questions.contains(q)
    }
}

impl<Q: Into<QuestionId>> FromIterator<Q> for TargetSet {
    /// Panics on an empty or duplicated iterator; use [`TargetSet::new`] for
    /// fallible construction.
    fn from_iter<I: IntoIterator<Item = Q>>(iter: I) -> Self {
        Self::new(iter.into_iter().map(Into::into).collect()).expect("valid target set")
    }
}

/// Probability vector over a finite support. `shape` lists the alphabet size
/// of each coordinate; tuples are enumerated row-major, first coordinate
/// most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(probs.len(), shape.iter().product::<usize>());
        Self { probs, shape }
    }

    pub fn categorical(probs: Vec<f64>) -> Self {
        let n = probs.len();
        Self {
            probs,
            shape: vec![n],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Decodes a flat support index into one answer per coordinate.
    pub fn tuple(&self, mut index: usize) -> Vec<AnswerIndex> {
        let mut out = vec![0; self.shape.len()];
        for (slot, &a) in out.iter_mut().zip(&self.shape).rev() {
            *slot = index % a;
            index /= a;
        }
        out
    }

    /// Index of the most probable outcome, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Total-variation distance to another distribution on the same support.
    pub fn total_variation(&self, other: &Distribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        if self.probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidConfig("distribution has a negative or non-finite entry".into()));
        }
        let total = self.total();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidConfig(format!("distribution sums to {total}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, n: usize) -> CatalogEntry {
        CatalogEntry {
            id: id.into(),
            text: id.to_owned(),
            choices: (0..n).map(|i| format!("c{i}")).collect(),
            features: None,
            tags: None,
        }
    }

    #[test]
    fn catalog_rejects_duplicates_and_short_alphabets() {
        assert!(QuestionCatalog::new(vec![entry("a", 2), entry("a", 2)]).is_err());
        assert!(QuestionCatalog::new(vec![entry("a", 1)]).is_err());
        let mut e = entry("b", 2);
        e.features = Some(vec![1.0, 0.0, 0.0]);
        let mut f = entry("c", 2);
        f.features = Some(vec![1.0]);
        assert!(QuestionCatalog::new(vec![e, f]).is_err());
    }

    #[test]
    fn history_rejects_repeated_question() {
        let mut h = History::new();
        h.push("q1".into(), 0).unwrap();
        assert!(matches!(h.push("q1".into(), 1), Err(Error::AlreadyAsked(_))));
    }

    #[test]
    fn tuple_decoding_is_row_major() {
        let d = Distribution::new(vec![0.25; 6], vec![2, 3]);
        assert_eq!(d.tuple(0), vec![0, 0]);
        assert_eq!(d.tuple(2), vec![0, 2]);
        assert_eq!(d.tuple(3), vec![1, 0]);
        assert_eq!(d.tuple(5), vec![1, 2]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let d = Distribution::categorical(vec![0.4, 0.4, 0.2]);
        assert_eq!(d.argmax(), 0);
    }
}
