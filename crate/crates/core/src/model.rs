//! The predictive-model contract. Everything downstream (information gain,
//! policies, evaluation, sessions) is written against this trait, so the
//! exact tabular surrogate and a remote served model are interchangeable.

use crate::entropy::entropy;
use crate::error::{Error, Result};
use crate::info_gain;
use crate::types::{Distribution, History, QuestionCatalog, QuestionId, TargetSet};

/// Largest outcome space enumerated exactly.
pub const DEFAULT_SUPPORT_CAP: usize = 1_000_000;

pub trait PredictiveModel: Send + Sync {
    fn catalog(&self) -> &QuestionCatalog;

    /// One-step conditional `p(Y | history, X = question)`.
    fn predictive(&self, history: &History, question: &QuestionId) -> Result<Distribution>;

    fn support_cap(&self) -> usize {
        DEFAULT_SUPPORT_CAP
    }

    /// Joint distribution of the answers to `questions` given `history`,
    /// enumerated row-major in question order.
    ///
    /// The default expands the chain rule one question at a time, which is
    /// all a one-step model can offer.
    fn joint(&self, history: &History, questions: &[QuestionId]) -> Result<Distribution> {
        chain_rule_joint(self, history, questions)
    }

    /// `H(Z | history)` in nats.
    fn target_entropy(&self, history: &History, targets: &TargetSet) -> Result<f64> {
        Ok(entropy(&self.joint(history, targets.questions())?))
    }

    /// One-step expected information gain for each candidate, in order.
    fn candidate_eigs(
        &self,
        history: &History,
        targets: &TargetSet,
        candidates: &[QuestionId],
    ) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|c| info_gain::expected_information_gain(self, history, targets, c).map(|e| e.value))
            .collect()
    }
}

/// Checks that the product of alphabet sizes fits under `cap`.
pub fn support_size(
    catalog: &QuestionCatalog,
    questions: &[QuestionId],
    cap: usize,
) -> Result<(usize, Vec<usize>)> {
    let mut shape = Vec::with_capacity(questions.len());
    let mut size: u128 = 1;
    for q in questions {
        let a = catalog.alphabet(q)?;
        shape.push(a);
        size = size.saturating_mul(a as u128);
    }
    if size > cap as u128 {
        return Err(Error::SupportTooLarge { size, cap });
    }
    Ok((size as usize, shape))
}

/// `p(a_1..a_K | H) = Π_k p(a_k | H ∪ (x_1,a_1) .. (x_{k-1},a_{k-1}))`.
pub fn chain_rule_joint<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    questions: &[QuestionId],
) -> Result<Distribution> {
    let (size, shape) = support_size(model.catalog(), questions, model.support_cap())?;
    let mut probs = vec![0.0; size];
    expand(model, history, questions, 0, 1.0, 0, &mut probs)?;
    Ok(Distribution::new(probs, shape))
}

fn expand<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    questions: &[QuestionId],
    depth: usize,
    mass: f64,
    offset: usize,
    out: &mut [f64],
) -> Result<()> {
    if depth == questions.len() {
        out[offset] = mass;
        return Ok(());
    }
    let q = &questions[depth];
    let step = model.predictive(history, q)?;
    let a = step.len();
    for (answer, &p) in step.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let next = history.with(q.clone(), answer)?;
        expand(
            model,
            &next,
            questions,
            depth + 1,
            mass * p,
            offset * a + answer,
            out,
        )?;
    }
    Ok(())
}
