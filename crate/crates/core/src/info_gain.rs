//! Information gain about a target set: realized gain of one observation,
//! exact one-step expected gain, multi-step expected gain over simulated
//! answer trajectories, and greedy forward rollouts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{support_size, PredictiveModel};
use crate::policy::argmax_by_catalog;
use crate::rng::{self, sample_index, Rng};
use crate::types::{History, QuestionId, Step, TargetSet};

/// Monte Carlo sample count used when exact enumeration is over the cap.
pub const DEFAULT_EIG_SAMPLES: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    /// Nats.
    pub value: f64,
    pub std_error: f64,
    /// Trajectories sampled, or enumerated when `exact`.
    pub n_samples: usize,
    pub exact: bool,
}

impl EigEstimate {
    pub fn exact(value: f64, enumerated: usize) -> Self {
        Self {
            value,
            std_error: 0.0,
            n_samples: enumerated,
            exact: true,
        }
    }
}

/// `H(Z | H_t)`.
pub fn target_entropy<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
) -> Result<f64> {
    model.target_entropy(history, targets)
}

fn check_targets_disjoint(history: &History, targets: &TargetSet) -> Result<()> {
    if let Some(s) = history.steps().iter().find(|s| targets.contains(&s.question)) {
        return Err(Error::InvalidConfig(format!(
            "target `{}` is already in the history",
            s.question
        )));
    }
    Ok(())
}

/// Realized gain `H(Z | H_t) - H(Z | H_t ∪ step)`. Signed: a surprising
/// answer can increase uncertainty.
pub fn information_gain<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    step: &Step,
) -> Result<f64> {
    check_targets_disjoint(history, targets)?;
    let after = history.with(step.question.clone(), step.answer)?;
    model.catalog().check_answer(&step.question, step.answer)?;
    let h0 = model.target_entropy(history, targets)?;
    let h1 = model.target_entropy(&after, targets)?;
    Ok(h0 - h1)
}

/// Exact one-step expected gain, averaging over the model's predictive for
/// the candidate's answer.
pub fn expected_information_gain<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    candidate: &QuestionId,
) -> Result<EigEstimate> {
    expected_information_gain_set(model, history, targets, std::slice::from_ref(candidate), 0, 0)
}

/// Expected gain of asking every question in `candidates`, answers simulated
/// autoregressively. `n_samples == 0` enumerates all trajectories exactly.
pub fn expected_information_gain_set<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    candidates: &[QuestionId],
    n_samples: usize,
    seed: u64,
) -> Result<EigEstimate> {
    check_targets_disjoint(history, targets)?;
    for (i, c) in candidates.iter().enumerate() {
        model.catalog().index_of(c)?;
        if history.contains(c) {
            return Err(Error::AlreadyAsked(c.0.clone()));
        }
        if candidates[..i].contains(c) {
            return Err(Error::InvalidConfig(format!("candidate `{c}` listed twice")));
        }
    }
    let h0 = model.target_entropy(history, targets)?;

    if n_samples == 0 {
        let (size, _) = support_size(model.catalog(), candidates, model.support_cap())?;
        let expected = expected_entropy_exact(model, history, targets, candidates)?;
        return Ok(EigEstimate::exact(h0 - expected, size));
    }

    let mut rng = rng::rng(seed);
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut ext = history.clone();
        for c in candidates {
            let p = model.predictive(&ext, c)?;
            let y = sample_index(&mut rng, &p.probs);
            ext.push(c.clone(), y)?;
        }
        values.push(model.target_entropy(&ext, targets)?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std_error = if values.len() > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EigEstimate {
        value: h0 - mean,
        std_error,
        n_samples,
        exact: false,
    })
}

/// `E[H(Z | H_t ∪ trajectory)]` by exhaustive expansion.
fn expected_entropy_exact<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    rest: &[QuestionId],
) -> Result<f64> {
    let Some((q, tail)) = rest.split_first() else {
        return model.target_entropy(history, targets);
    };
    let p = model.predictive(history, q)?;
    let mut acc = 0.0;
    for (y, &py) in p.probs.iter().enumerate() {
        if py <= 0.0 {
            continue;
        }
        let next = history.with(q.clone(), y)?;
        acc += py * expected_entropy_exact(model, &next, targets, tail)?;
    }
    Ok(acc)
}

/// Monte Carlo estimate of `H(Z | H_t)` for target sets too large to
/// enumerate: `-mean ln p(z_i)` over autoregressively sampled `z_i`.
/// Returns `(estimate, std_error)`.
pub fn sampled_target_entropy<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
    }
    check_targets_disjoint(history, targets)?;
    let mut rng = rng::rng(seed);
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut ext = history.clone();
        let mut log_p = 0.0;
        for q in targets.questions() {
            let p = model.predictive(&ext, q)?;
            let y = sample_index(&mut rng, &p.probs);
            log_p += p.probs[y].ln();
            ext.push(q.clone(), y)?;
        }
        values.push(-log_p);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

/// A simulated continuation and the realized gain of the whole extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub extension: Vec<Step>,
    pub realized_ig: f64,
}

/// Simulates `depth` steps: each question is the greedy pick over what is
/// left of `pool`, each answer is drawn from the model's predictive. The
/// reward is the realized gain of the full extension.
pub fn simulate_rollout<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
    depth: usize,
    seed: u64,
) -> Result<Rollout> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if depth == 0 || depth > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "rollout depth {depth} must be in 1..={}",
            pool.len()
        )));
    }
    let h0 = model.target_entropy(history, targets)?;
    let mut rng = rng::rng(seed);
    let mut memo = GreedyMemo::default();
    rollout(model, history, targets, h0, None, pool, depth, &mut rng, &mut memo)
}

/// Greedy choices already computed within one planning call, keyed by the
/// simulated history. Valid only while the pool is fixed.
#[derive(Default)]
pub(crate) struct GreedyMemo {
    picks: HashMap<History, QuestionId>,
}

impl GreedyMemo {
    fn pick<M: PredictiveModel + ?Sized>(
        &mut self,
        model: &M,
        history: &History,
        targets: &TargetSet,
        remaining: &[QuestionId],
    ) -> Result<QuestionId> {
        if let Some(q) = self.picks.get(history) {
            return Ok(q.clone());
        }
        let scores = model.candidate_eigs(history, targets, remaining)?;
        let best = remaining[argmax_by_catalog(model.catalog(), remaining, &scores)?].clone();
        self.picks.insert(history.clone(), best.clone());
        Ok(best)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn rollout<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    h0: f64,
    first: Option<(&QuestionId, Option<usize>)>,
    pool: &[QuestionId],
    depth: usize,
    rng: &mut Rng,
    memo: &mut GreedyMemo,
) -> Result<Rollout> {
    let mut ext = history.clone();
    let mut remaining: Vec<QuestionId> = pool.to_vec();
    let mut extension = Vec::with_capacity(depth);
    for step in 0..depth.min(pool.len()) {
        let (q, forced_answer) = match (step, first) {
            (0, Some((q, a))) => (q.clone(), a),
            _ => (memo.pick(model, &ext, targets, &remaining)?, None),
        };
        remaining.retain(|r| r != &q);
        let y = match forced_answer {
            Some(a) => a,
            None => {
                let p = model.predictive(&ext, &q)?;
                sample_index(rng, &p.probs)
            }
        };
        ext.push(q.clone(), y)?;
        extension.push(Step { question: q, answer: y });
    }
    let realized_ig = h0 - model.target_entropy(&ext, targets)?;
    Ok(Rollout {
        extension,
        realized_ig,
    })
}
