//! Question-selection policies: uniform random, feature similarity to the
//! targets, greedy one-step EIG, and Monte Carlo lookahead over greedy
//! rollouts.
//!
//! Ties are broken by lowest catalog index everywhere. Scores within
//! [`TIE_TOL`] of the maximum count as tied so that summation-order noise
//! never decides a pick.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info_gain::{rollout, EigEstimate, GreedyMemo};
use crate::model::PredictiveModel;
use crate::rng::{self, derive_seed2};
use crate::types::{History, QuestionCatalog, QuestionId, TargetSet};

pub const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Similarity,
    Greedy,
    Mcts,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "similarity" => Ok(Self::Similarity),
            "greedy" => Ok(Self::Greedy),
            "mcts" => Ok(Self::Mcts),
            other => Err(Error::InvalidConfig(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctsConfig {
    /// Shortlist size by one-step EIG.
    pub top_k: usize,
    /// Simulated futures per shortlisted question.
    pub n_rollouts: usize,
    /// Questions per simulated future, the shortlisted one included.
    pub depth: usize,
    /// Enumerate the first answer exactly instead of sampling it.
    pub enumerate_first: bool,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            top_k: 4,
            n_rollouts: 8,
            depth: 3,
            enumerate_first: false,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.n_rollouts == 0 || self.depth == 0 {
            return Err(Error::InvalidConfig(format!(
                "mcts top_k, n_rollouts and depth must all be >= 1 (got {}, {}, {})",
                self.top_k, self.n_rollouts, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub mcts: MctsConfig,
    #[serde(default)]
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            mcts: MctsConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mcts.validate()
    }
}

/// Index into `candidates` of the best score; near-ties go to the lowest
/// catalog index.
pub fn argmax_by_catalog(catalog: &QuestionCatalog, candidates: &[QuestionId], scores: &[f64]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(usize, usize)> = None;
    for (i, (c, &s)) in candidates.iter().zip(scores).enumerate() {
        if s >= max - TIE_TOL {
            let idx = catalog.index_of(c)?;
            if best.is_none_or(|(_, b)| idx < b) {
                best = Some((i, idx));
            }
        }
    }
    Ok(best.expect("non-empty").0)
}

fn check_pool(catalog: &QuestionCatalog, history: Option<&History>, pool: &[QuestionId]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    for (i, q) in pool.iter().enumerate() {
        catalog.index_of(q)?;
        if pool[..i].contains(q) {
            return Err(Error::InvalidConfig(format!("pool lists `{q}` twice")));
        }
        if history.is_some_and(|h| h.contains(q)) {
            return Err(Error::AlreadyAsked(q.0.clone()));
        }
    }
    Ok(())
}

/// Uniform draw from the pool.
pub fn select_random(pool: &[QuestionId], seed: u64) -> Result<QuestionId> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut r = rng::rng(seed);
    Ok(pool[r.random_range(0..pool.len())].clone())
}

/// Pool question with the highest mean dot product against the target
/// feature vectors. Returns the pick and every pool score.
pub fn select_similarity(
    pool: &[QuestionId],
    targets: &TargetSet,
    catalog: &QuestionCatalog,
) -> Result<(QuestionId, Vec<f64>)> {
    check_pool(catalog, None, pool)?;
    let features = |q: &QuestionId| -> Result<&[f64]> {
        catalog
            .entry(q)?
            .features
            .as_deref()
            .ok_or_else(|| Error::MissingFeatures(q.0.clone()))
    };
    let target_feats = targets
        .questions()
        .iter()
        .map(features)
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::with_capacity(pool.len());
    for q in pool {
        let f = features(q)?;
        let mean = target_feats
            .iter()
            .map(|t| t.iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / target_feats.len() as f64;
        scores.push(mean);
    }
    let best = argmax_by_catalog(catalog, pool, &scores)?;
    Ok((pool[best].clone(), scores))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GreedyChoice {
    pub question: QuestionId,
    pub estimate: EigEstimate,
    /// One-step EIG of every pool question, in pool order.
    pub scores: Vec<f64>,
}

/// Argmax of exact one-step EIG over the pool.
pub fn select_greedy<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
) -> Result<GreedyChoice> {
    check_pool(model.catalog(), Some(history), pool)?;
    let scores = model.candidate_eigs(history, targets, pool)?;
    let best = argmax_by_catalog(model.catalog(), pool, &scores)?;
    let n = model.catalog().alphabet(&pool[best])?;
    Ok(GreedyChoice {
        question: pool[best].clone(),
        estimate: EigEstimate::exact(scores[best], n),
        scores,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MctsChoice {
    pub question: QuestionId,
    /// Mean realized gain per shortlisted question, in shortlist order.
    pub scores: Vec<(QuestionId, f64)>,
}

/// Shortlists the `top_k` questions by one-step EIG, scores each by the mean
/// realized gain over `n_rollouts` simulated futures that start with it and
/// continue greedily, and returns the best. Rollout depth is silently
/// truncated to the pool size.
pub fn select_mcts<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
    config: &MctsConfig,
    seed: u64,
) -> Result<MctsChoice> {
    config.validate()?;
    check_pool(model.catalog(), Some(history), pool)?;
    let catalog = model.catalog();
    let eigs = model.candidate_eigs(history, targets, pool)?;

    let mut left: Vec<usize> = (0..pool.len()).collect();
    let mut shortlist = Vec::with_capacity(config.top_k);
    while shortlist.len() < config.top_k && !left.is_empty() {
        let qs: Vec<QuestionId> = left.iter().map(|&i| pool[i].clone()).collect();
        let ss: Vec<f64> = left.iter().map(|&i| eigs[i]).collect();
        let pick = argmax_by_catalog(catalog, &qs, &ss)?;
        shortlist.push(left.remove(pick));
    }

    let h0 = model.target_entropy(history, targets)?;
    let depth = config.depth.min(pool.len());
    let mut memo = GreedyMemo::default();
    let mut scores = Vec::with_capacity(shortlist.len());
    for &i in &shortlist {
        let x = &pool[i];
        let tag = catalog.index_of(x)? as u64;
        let score = if config.enumerate_first {
            let p = model.predictive(history, x)?;
            let mut total = 0.0;
            for (y, &py) in p.probs.iter().enumerate() {
                if py <= 0.0 {
                    continue;
                }
                let mut sum = 0.0;
                for r in 0..config.n_rollouts {
                    let idx = (y * config.n_rollouts + r) as u64;
                    let mut rng = rng::rng(derive_seed2(seed, tag, idx));
                    let ro = rollout(model, history, targets, h0, Some((x, Some(y))), pool, depth, &mut rng, &mut memo)?;
                    sum += ro.realized_ig;
                }
                total += py * sum / config.n_rollouts as f64;
            }
            total
        } else {
            let mut sum = 0.0;
            for r in 0..config.n_rollouts {
                let mut rng = rng::rng(derive_seed2(seed, tag, r as u64));
                let ro = rollout(model, history, targets, h0, Some((x, None)), pool, depth, &mut rng, &mut memo)?;
                sum += ro.realized_ig;
            }
            sum / config.n_rollouts as f64
        };
        scores.push((x.clone(), score));
    }
    let qs: Vec<QuestionId> = scores.iter().map(|(q, _)| q.clone()).collect();
    let ss: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    let best = argmax_by_catalog(catalog, &qs, &ss)?;
    Ok(MctsChoice {
        question: qs[best].clone(),
        scores,
    })
}

/// A policy decision with per-candidate diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub question: QuestionId,
    /// What `diagnostics` scores mean: `eig`, `mean_ig`, `similarity` or
    /// `none`.
    pub score_kind: String,
    pub diagnostics: Vec<ScoredQuestion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuestion {
    pub question: QuestionId,
    pub score: f64,
}

fn scored(pool: &[QuestionId], scores: &[f64]) -> Vec<ScoredQuestion> {
    pool.iter()
        .zip(scores)
        .map(|(q, &s)| ScoredQuestion {
            question: q.clone(),
            score: s,
        })
        .collect()
}

/// Dispatches to the configured policy.
pub fn select<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
    config: &PolicyConfig,
    seed: u64,
) -> Result<Selection> {
    config.validate()?;
    match config.kind {
        PolicyKind::Random => {
            check_pool(model.catalog(), Some(history), pool)?;
            Ok(Selection {
                question: select_random(pool, seed)?,
                score_kind: "none".into(),
                diagnostics: Vec::new(),
            })
        }
        PolicyKind::Similarity => {
            check_pool(model.catalog(), Some(history), pool)?;
            let (q, s) = select_similarity(pool, targets, model.catalog())?;
            Ok(Selection {
                question: q,
                score_kind: "similarity".into(),
                diagnostics: scored(pool, &s),
            })
        }
        PolicyKind::Greedy => {
            let g = select_greedy(model, history, targets, pool)?;
            Ok(Selection {
                question: g.question,
                score_kind: "eig".into(),
                diagnostics: scored(pool, &g.scores),
            })
        }
        PolicyKind::Mcts => {
            let m = select_mcts(model, history, targets, pool, &config.mcts, seed)?;
            Ok(Selection {
                question: m.question,
                score_kind: "mean_ig".into(),
                diagnostics: m
                    .scores
                    .into_iter()
                    .map(|(question, score)| ScoredQuestion { question, score })
                    .collect(),
            })
        }
    }
}
