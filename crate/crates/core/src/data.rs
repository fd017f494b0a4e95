//! Dataset schema, JSON loading with validation, entity-level splits and a
//! synthetic clustered corpus generator.
//!
//! File format:
//!
//! ```json
//! {"questions": [{"id": "q1", "text": "...", "choices": ["no", "yes"],
//!                 "features": [0.1, ...], "tags": ["..."]}],
//!  "entities":  [{"id": "e1", "answers": {"q1": 1}, "meta": {"k": "v"}}]}
//! ```
//!
//! `features`, `tags` and `meta` are optional.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::table::{fit_tabular, LatentTable, TrainingRecord};
use crate::types::{AnswerIndex, CatalogEntry, QuestionCatalog, QuestionId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: String,
    pub answers: BTreeMap<QuestionId, AnswerIndex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    #[serde(rename = "questions")]
    catalog: Arc<QuestionCatalog>,
    entities: Vec<Entity>,
}

#[derive(Deserialize)]
struct RawDataset {
    questions: Vec<CatalogEntry>,
    entities: Vec<Entity>,
}

impl Dataset {
    pub fn new(catalog: QuestionCatalog, entities: Vec<Entity>) -> Result<Self> {
        let mut ids = HashSet::new();
        for e in &entities {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate entity id `{}`", e.id)));
            }
            for (q, &a) in &e.answers {
                let entry = catalog.entry(q).map_err(|_| {
                    Error::Dataset(format!("entity `{}` answers unknown question `{q}`", e.id))
                })?;
                if a >= entry.alphabet() {
                    return Err(Error::Dataset(format!(
                        "entity `{}`: answer {a} out of range for question `{q}` ({} choices)",
                        e.id,
                        entry.alphabet()
                    )));
                }
            }
        }
        Ok(Self {
            catalog: Arc::new(catalog),
            entities,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(text).map_err(|e| {
            Error::Dataset(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        let catalog = QuestionCatalog::new(raw.questions)?;
        Self::new(catalog, raw.entities)
    }

    /// Canonical serialization: pretty JSON, answers sorted by question id,
    /// trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serializes");
        s.push('\n');
        s
    }

    pub fn catalog(&self) -> &QuestionCatalog {
        &self.catalog
    }

    pub fn catalog_arc(&self) -> &Arc<QuestionCatalog> {
        &self.catalog
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: &str) -> Result<&Entity> {
        self.entities
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Dataset(format!("unknown entity `{id}`")))
    }

    pub fn training_records(&self, ids: &[String]) -> Result<Vec<TrainingRecord>> {
        ids.iter()
            .map(|id| {
                let e = self.entity(id)?;
                Ok(TrainingRecord {
                    entity: e.id.clone(),
                    answers: e.answers.iter().map(|(q, &a)| (q.clone(), a)).collect(),
                })
            })
            .collect()
    }

    /// Fits the tabular surrogate on the listed entities.
    pub fn fit(&self, ids: &[String], smoothing: f64) -> Result<LatentTable> {
        fit_tabular(self.catalog.clone(), &self.training_records(ids)?, smoothing)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Dataset::from_json(&text).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset.to_json())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles entity ids by seed and cuts `floor(train·n)`, `floor(val·n)` and
/// the remainder.
pub fn split_entities(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| f.is_nan() || *f < 0.0) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must be >= 0 and sum to 1, got {:?}",
            fr
        )));
    }
    let n = dataset.entities.len();
    if n < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 entities to split, have {n}")));
    }
    let mut ids: Vec<String> = dataset.entities.iter().map(|e| e.id.clone()).collect();
    ids.shuffle(&mut rng::rng(spec.seed));
    // the epsilon keeps 0.7 * 100 from landing on 69.999..
    let n_train = (spec.train * n as f64 + 1e-9).floor() as usize;
    let n_val = (spec.val * n as f64 + 1e-9).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidConfig(format!(
            "split of {n} entities leaves a part empty ({n_train}/{n_val}/{})",
            n.saturating_sub(n_train + n_val)
        )));
    }
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split { train: ids, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_questions: usize,
    pub alphabet_size: usize,
    pub n_latent_clusters: usize,
    /// Probability that an entity's answer is redrawn uniformly over the
    /// alphabet instead of copying its cluster prototype.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_questions: 60,
            alphabet_size: 4,
            n_latent_clusters: 6,
            noise: 0.2,
            seed: 7,
        }
    }
}

pub const FEATURE_DIM: usize = 16;

/// Clustered corpus in the Twenty Questions style: each cluster has a
/// prototype answer per question, entities copy their cluster's prototype
/// and are perturbed with probability `noise`.
///
/// Each question carries a random unit feature vector and an
/// `agreement=<fraction>` tag: the share of entities giving its modal answer.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    let c = config;
    if c.n_entities == 0 || c.n_questions == 0 || c.n_latent_clusters == 0 {
        return Err(Error::InvalidConfig("entities, questions and clusters must be >= 1".into()));
    }
    if c.alphabet_size < 2 {
        return Err(Error::InvalidConfig("alphabet_size must be >= 2".into()));
    }
    if !(0.0..=1.0).contains(&c.noise) {
        return Err(Error::InvalidConfig(format!("noise must be in [0, 1], got {}", c.noise)));
    }
    let mut r = rng::rng(c.seed);
    let prototypes: Vec<Vec<usize>> = (0..c.n_latent_clusters)
        .map(|_| (0..c.n_questions).map(|_| r.random_range(0..c.alphabet_size)).collect())
        .collect();
    let width = (c.n_questions.max(2) - 1).to_string().len();
    let qid = |i: usize| QuestionId(format!("q{i:0width$}"));
    let ewidth = (c.n_entities.max(2) - 1).to_string().len();

    let mut entities = Vec::with_capacity(c.n_entities);
    let mut tallies = vec![vec![0usize; c.alphabet_size]; c.n_questions];
    for e in 0..c.n_entities {
        let cluster = r.random_range(0..c.n_latent_clusters);
        let mut answers = BTreeMap::new();
        for (q, &proto) in prototypes[cluster].iter().enumerate() {
            let a = if r.random::<f64>() < c.noise {
                r.random_range(0..c.alphabet_size)
            } else {
                proto
            };
            tallies[q][a] += 1;
            answers.insert(qid(q), a);
        }
        entities.push(Entity {
            id: format!("e{e:0ewidth$}"),
            answers,
            meta: Some(BTreeMap::from([("cluster".to_owned(), cluster.to_string())])),
        });
    }

    let choices: Vec<String> = match c.alphabet_size {
        2 => vec!["no".into(), "yes".into()],
        3 => vec!["no".into(), "maybe".into(), "yes".into()],
        a => (1..=a).map(|i| format!("option {i}")).collect(),
    };
    let entries = (0..c.n_questions)
        .map(|q| {
            let mut f: Vec<f64> = (0..FEATURE_DIM).map(|_| r.sample(StandardNormal)).collect();
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            f.iter_mut().for_each(|x| *x /= norm);
            let modal = *tallies[q].iter().max().expect("alphabet >= 2");
            CatalogEntry {
                id: qid(q),
                text: format!("Synthetic question {q}?"),
                choices: choices.clone(),
                features: Some(f),
                tags: Some(vec![format!("agreement={:.4}", modal as f64 / c.n_entities as f64)]),
            }
        })
        .collect();
    Dataset::new(QuestionCatalog::new(entries)?, entities)
}
