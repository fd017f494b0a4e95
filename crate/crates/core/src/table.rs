//! The exact tabular Bayesian predictive model: a finite latent space with
//! prior weights and per-question answer likelihoods, posterior beliefs over
//! it, and closed-form fitting from historical answers.

use std::collections::HashSet;
use std::sync::Arc;

use crate::entropy::{entropy_unnormalized, xlogx};
use crate::error::{Error, Result};
use crate::model::{support_size, PredictiveModel, DEFAULT_SUPPORT_CAP};
use crate::types::{AnswerIndex, Distribution, History, QuestionCatalog, QuestionId, TargetSet};

const SUM_TOL: f64 = 1e-12;

/// Above this many matrix entries the batched EIG path falls back to
/// per-candidate enumeration.
const BATCH_ENTRIES: usize = 1 << 23;

#[derive(Clone, Debug)]
pub struct LatentTable {
    catalog: Arc<QuestionCatalog>,
    latent_ids: Vec<String>,
    prior: Vec<f64>,
    /// Indexed by catalog index; each entry is an `M × A` row-major matrix.
    likelihood: Vec<Vec<f64>>,
    support_cap: usize,
}

impl LatentTable {
    /// `likelihood[q][u]` is the answer distribution of latent `u` on catalog
    /// question `q`.
    pub fn new(
        catalog: Arc<QuestionCatalog>,
        latent_ids: Vec<String>,
        prior: Vec<f64>,
        likelihood: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let m = latent_ids.len();
        if m == 0 {
            return Err(Error::InvalidTable("no latent values".into()));
        }
        if prior.len() != m {
            return Err(Error::InvalidTable(format!("prior has {} entries for {m} latents", prior.len())));
        }
        check_simplex(&prior, SUM_TOL).map_err(|e| Error::InvalidTable(format!("prior {e}")))?;
        if likelihood.len() != catalog.len() {
            return Err(Error::InvalidTable(format!(
                "{} likelihood matrices for {} catalog questions",
                likelihood.len(),
                catalog.len()
            )));
        }
        let mut flat = Vec::with_capacity(likelihood.len());
        for (entry, rows) in catalog.entries().iter().zip(likelihood) {
            let a = entry.alphabet();
            if rows.len() != m {
                return Err(Error::InvalidTable(format!("question `{}` has {} rows", entry.id, rows.len())));
            }
            let mut mat = Vec::with_capacity(m * a);
            for row in rows {
                if row.len() != a {
                    return Err(Error::InvalidTable(format!(
                        "question `{}` row has {} entries for {a} choices",
                        entry.id,
                        row.len()
                    )));
                }
                check_simplex(&row, SUM_TOL)
                    .map_err(|e| Error::InvalidTable(format!("question `{}` row {e}", entry.id)))?;
                mat.extend_from_slice(&row);
            }
            flat.push(mat);
        }
        Ok(Self {
            catalog,
            latent_ids,
            prior,
            likelihood: flat,
            support_cap: DEFAULT_SUPPORT_CAP,
        })
    }

    pub fn with_support_cap(mut self, cap: usize) -> Self {
        self.support_cap = cap;
        self
    }

    pub fn catalog(&self) -> &QuestionCatalog {
        &self.catalog
    }

    pub fn catalog_arc(&self) -> &Arc<QuestionCatalog> {
        &self.catalog
    }

    pub fn latent_ids(&self) -> &[String] {
        &self.latent_ids
    }

    pub fn n_latents(&self) -> usize {
        self.latent_ids.len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    /// `P(answer = · | question, latent)`.
    pub fn row(&self, question: &QuestionId, latent: usize) -> Result<&[f64]> {
        let qi = self.catalog.index_of(question)?;
        Ok(self.row_at(qi, latent))
    }

    fn row_at(&self, qi: usize, latent: usize) -> &[f64] {
        let a = self.catalog.entries()[qi].alphabet();
        &self.likelihood[qi][latent * a..(latent + 1) * a]
    }

    fn matrix(&self, question: &QuestionId) -> Result<(&[f64], usize)> {
        let qi = self.catalog.index_of(question)?;
        Ok((&self.likelihood[qi], self.catalog.entries()[qi].alphabet()))
    }

    /// Returns a copy with one question's likelihood rows replaced.
    pub fn with_rows(&self, question: &QuestionId, rows: Vec<Vec<f64>>) -> Result<Self> {
        let qi = self.catalog.index_of(question)?;
        let mut all: Vec<Vec<Vec<f64>>> = (0..self.catalog.len())
            .map(|q| {
                let a = self.catalog.entries()[q].alphabet();
                self.likelihood[q].chunks(a).map(<[f64]>::to_vec).collect()
            })
            .collect();
        all[qi] = rows;
        Ok(Self::new(self.catalog.clone(), self.latent_ids.clone(), self.prior.clone(), all)?
            .with_support_cap(self.support_cap))
    }

    pub fn prior_belief(&self) -> Belief<'_> {
        Belief {
            table: self,
            weights: self.prior.clone(),
        }
    }

    /// Posterior after folding in every step of `history`, in order.
    pub fn belief(&self, history: &History) -> Result<Belief<'_>> {
        let mut b = self.prior_belief();
        for s in history.steps() {
            b.update_in_place(&s.question, s.answer)?;
        }
        Ok(b)
    }

    /// `Σ_t ln p(y_t | H_{t-1}, x_t)`.
    pub fn sequence_log_likelihood(&self, history: &History) -> Result<SequenceLogLikelihood> {
        let mut b = self.prior_belief();
        let mut total = 0.0;
        for (t, s) in history.steps().iter().enumerate() {
            let p = b.predictive(&s.question)?;
            self.catalog.check_answer(&s.question, s.answer)?;
            let py = p.probs[s.answer];
            if py <= 0.0 {
                return Ok(SequenceLogLikelihood {
                    value: f64::NEG_INFINITY,
                    impossible_at: Some(t),
                });
            }
            total += py.ln();
            b.update_in_place(&s.question, s.answer)?;
        }
        Ok(SequenceLogLikelihood {
            value: total,
            impossible_at: None,
        })
    }

    /// Unweighted `Π_k L[x_k][u][a_k]` for every latent `u` and tuple,
    /// `M × S` row-major.
    fn tuple_likelihoods(&self, questions: &[QuestionId], size: usize) -> Result<Vec<f64>> {
        let m = self.n_latents();
        let mats = questions
            .iter()
            .map(|q| self.matrix(q))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; m * size];
        let mut buf = Vec::with_capacity(size);
        let mut next = Vec::with_capacity(size);
        for u in 0..m {
            buf.clear();
            buf.push(1.0);
            for &(mat, a) in &mats {
                let row = &mat[u * a..(u + 1) * a];
                next.clear();
                for &v in &buf {
                    next.extend(row.iter().map(|&l| v * l));
                }
                std::mem::swap(&mut buf, &mut next);
            }
            out[u * size..(u + 1) * size].copy_from_slice(&buf);
        }
        Ok(out)
    }
}

fn check_simplex(v: &[f64], tol: f64) -> std::result::Result<(), String> {
    if v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err("has an entry outside [0, 1]".into());
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Log-likelihood of a history; `impossible_at` marks the first step with
/// zero predictive probability, in which case `value` is `-inf`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLogLikelihood {
    pub value: f64,
    pub impossible_at: Option<usize>,
}

/// Posterior weights over the latent values of one table.
#[derive(Clone, Debug)]
pub struct Belief<'t> {
    table: &'t LatentTable,
    weights: Vec<f64>,
}

impl<'t> Belief<'t> {
    pub fn table(&self) -> &'t LatentTable {
        self.table
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Bayes rule: weights ∝ old weights × likelihood of the observed answer.
    pub fn posterior_update(&self, question: &QuestionId, answer: AnswerIndex) -> Result<Belief<'t>> {
        let mut b = self.clone();
        b.update_in_place(question, answer)?;
        Ok(b)
    }

    fn update_in_place(&mut self, question: &QuestionId, answer: AnswerIndex) -> Result<()> {
        self.table.catalog.check_answer(question, answer)?;
        let (mat, a) = self.table.matrix(question)?;
        let mut total = 0.0;
        for (u, w) in self.weights.iter_mut().enumerate() {
            *w *= mat[u * a + answer];
            total += *w;
        }
        if total.is_nan() || total <= 0.0 {
            return Err(Error::ImpossibleEvidence {
                question: question.0.clone(),
                answer,
            });
        }
        for w in &mut self.weights {
            *w /= total;
        }
        Ok(())
    }

    /// `p(a) = Σ_u w_u L[q][u][a]`.
    pub fn predictive(&self, question: &QuestionId) -> Result<Distribution> {
        let (mat, a) = self.table.matrix(question)?;
        let mut probs = vec![0.0; a];
        for (u, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (p, &l) in probs.iter_mut().zip(&mat[u * a..(u + 1) * a]) {
                *p += w * l;
            }
        }
        Ok(Distribution::categorical(probs))
    }

    /// Exact joint over answer tuples: `Σ_u w_u Π_k L[x_k][u][a_k]`.
    pub fn joint(&self, questions: &[QuestionId]) -> Result<Distribution> {
        let (size, shape) = support_size(&self.table.catalog, questions, self.table.support_cap)?;
        let mats = questions
            .iter()
            .map(|q| self.table.matrix(q))
            .collect::<Result<Vec<_>>>()?;
        let mut probs = vec![0.0; size];
        let mut buf = Vec::with_capacity(size);
        let mut next = Vec::with_capacity(size);
        for (u, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            buf.clear();
            buf.push(w);
            for &(mat, a) in &mats {
                let row = &mat[u * a..(u + 1) * a];
                next.clear();
                for &v in &buf {
                    next.extend(row.iter().map(|&l| v * l));
                }
                std::mem::swap(&mut buf, &mut next);
            }
            for (p, &v) in probs.iter_mut().zip(&buf) {
                *p += v;
            }
        }
        Ok(Distribution::new(probs, shape))
    }

    /// One-step expected information gain about `targets` for every
    /// candidate, computed together as one matrix product
    /// `J = B · L_Z` where row `(c, y)` of `B` is `w ⊙ L[c][·][y]`.
    pub fn candidate_eigs(&self, targets: &[QuestionId], candidates: &[QuestionId]) -> Result<Vec<f64>> {
        let (size, _) = support_size(&self.table.catalog, targets, self.table.support_cap)?;
        let m = self.table.n_latents();
        let mats = candidates
            .iter()
            .map(|c| self.table.matrix(c))
            .collect::<Result<Vec<_>>>()?;
        let rows = 1 + mats.iter().map(|&(_, a)| a).sum::<usize>();
        if m * size > BATCH_ENTRIES || rows * size > BATCH_ENTRIES {
            return candidates
                .iter()
                .map(|c| self.eig_by_enumeration(targets, c))
                .collect();
        }

        let lz = self.table.tuple_likelihoods(targets, size)?;
        let mut b = Vec::with_capacity(rows * m);
        let mut masses = Vec::with_capacity(rows);
        b.extend_from_slice(&self.weights);
        masses.push(self.weights.iter().sum::<f64>());
        for &(mat, a) in &mats {
            for y in 0..a {
                let start = b.len();
                b.extend(self.weights.iter().enumerate().map(|(u, &w)| w * mat[u * a + y]));
                masses.push(b[start..].iter().sum());
            }
        }
        let mut j = vec![0.0; rows * size];
        // SAFETY: all three buffers are dense row-major with the dimensions
        // passed alongside them.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                m,
                size,
                1.0,
                b.as_ptr(),
                m as isize,
                1,
                lz.as_ptr(),
                size as isize,
                1,
                0.0,
                j.as_mut_ptr(),
                size as isize,
                1,
            );
        }
        let row_term = |r: usize| -> f64 {
            // t ln t - Σ_z J ln J  =  t · H(Z | row) for row mass t
            let t = masses[r];
            if t <= 0.0 {
                return 0.0;
            }
            (xlogx(t) - j[r * size..(r + 1) * size].iter().map(|&v| xlogx(v)).sum::<f64>()).max(0.0)
        };
        let prior_h = entropy_unnormalized(&j[..size], masses[0]);
        let mut out = Vec::with_capacity(candidates.len());
        let mut r = 1;
        for &(_, a) in &mats {
            let expected: f64 = (r..r + a).map(row_term).sum();
            out.push(prior_h - expected);
            r += a;
        }
        Ok(out)
    }

    fn eig_by_enumeration(&self, targets: &[QuestionId], candidate: &QuestionId) -> Result<f64> {
        let h0 = crate::entropy::entropy(&self.joint(targets)?);
        let p = self.predictive(candidate)?;
        let mut expected = 0.0;
        for (y, &py) in p.probs.iter().enumerate() {
            if py <= 0.0 {
                continue;
            }
            let post = self.posterior_update(candidate, y)?;
            expected += py * crate::entropy::entropy(&post.joint(targets)?);
        }
        Ok(h0 - expected)
    }
}

impl PredictiveModel for LatentTable {
    fn catalog(&self) -> &QuestionCatalog {
        &self.catalog
    }

    fn predictive(&self, history: &History, question: &QuestionId) -> Result<Distribution> {
        self.belief(history)?.predictive(question)
    }

    fn support_cap(&self) -> usize {
        self.support_cap
    }

    fn joint(&self, history: &History, questions: &[QuestionId]) -> Result<Distribution> {
        self.belief(history)?.joint(questions)
    }

    fn candidate_eigs(
        &self,
        history: &History,
        targets: &TargetSet,
        candidates: &[QuestionId],
    ) -> Result<Vec<f64>> {
        self.belief(history)?.candidate_eigs(targets.questions(), candidates)
    }
}

/// One training entity's observed answers. A question may repeat; each
/// occurrence counts once.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub entity: String,
    pub answers: Vec<(QuestionId, AnswerIndex)>,
}

pub const DEFAULT_SMOOTHING: f64 = 1.0;

/// Closed-form maximizer of the training log-likelihood for the tabular
/// family: each training entity becomes one latent value under a uniform
/// prior and its rows are smoothed empirical answer frequencies.
/// Questions an entity never answered get the uniform row.
pub fn fit_tabular(
    catalog: Arc<QuestionCatalog>,
    records: &[TrainingRecord],
    smoothing: f64,
) -> Result<LatentTable> {
    if records.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if !smoothing.is_finite() || smoothing < 0.0 {
        return Err(Error::InvalidConfig(format!("smoothing must be finite and >= 0, got {smoothing}")));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.entity.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate training entity `{}`", r.entity)));
        }
    }
    let m = records.len();
    // counts[q][u][a]
    let mut counts: Vec<Vec<Vec<f64>>> = catalog
        .entries()
        .iter()
        .map(|e| vec![vec![0.0; e.alphabet()]; m])
        .collect();
    for (u, r) in records.iter().enumerate() {
        for (q, a) in &r.answers {
            catalog.check_answer(q, *a)?;
            counts[catalog.index_of(q)?][u][*a] += 1.0;
        }
    }
    let likelihood = counts
        .into_iter()
        .map(|rows| {
            rows.into_iter()
                .map(|row| {
                    let a = row.len() as f64;
                    let n: f64 = row.iter().sum();
                    let denom = n + a * smoothing;
                    if denom > 0.0 {
                        row.iter().map(|c| (c + smoothing) / denom).collect()
                    } else {
                        vec![1.0 / a; row.len()]
                    }
                })
                .collect()
        })
        .collect();
    let prior = vec![1.0 / m as f64; m];
    let ids = records.iter().map(|r| r.entity.clone()).collect();
    LatentTable::new(catalog, ids, prior, likelihood)
}

#[cfg(test)]
// reference values are pinned to six decimals
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::reference::r1;
    use crate::types::CatalogEntry;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    fn yes_no(ids: &[&str], alphabets: &[usize]) -> Arc<QuestionCatalog> {
        let entries = ids
            .iter()
            .zip(alphabets)
            .map(|(id, &a)| CatalogEntry {
                id: (*id).into(),
                text: id.to_string(),
                choices: (0..a).map(|i| format!("c{i}")).collect(),
                features: None,
                tags: None,
            })
            .collect();
        Arc::new(QuestionCatalog::new(entries).unwrap())
    }

    #[test]
    fn fit_frequency_identity() {
        let cat = yes_no(&["q1"], &[2]);
        let recs = vec![
            TrainingRecord { entity: "e1".into(), answers: vec![("q1".into(), 0)] },
            TrainingRecord { entity: "e2".into(), answers: vec![("q1".into(), 1)] },
        ];
        let t = fit_tabular(cat, &recs, 0.0).unwrap();
        assert_eq!(t.prior(), &[0.5, 0.5]);
        assert_eq!(t.row(&"q1".into(), 0).unwrap(), &[1.0, 0.0]);
        assert_eq!(t.row(&"q1".into(), 1).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn fit_add_one_smoothing() {
        let cat = yes_no(&["q1", "q2"], &[2, 4]);
        let recs = vec![TrainingRecord {
            entity: "e".into(),
            answers: vec![("q1".into(), 0), ("q1".into(), 0), ("q1".into(), 1)],
        }];
        let t = fit_tabular(cat, &recs, 1.0).unwrap();
        // (2+1)/(3+2), (1+1)/(3+2)
        assert!(close(t.row(&"q1".into(), 0).unwrap(), &[0.6, 0.4], 1e-15));
        assert_eq!(t.row(&"q2".into(), 0).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn fit_errors() {
        let cat = yes_no(&["q1"], &[2]);
        assert!(matches!(fit_tabular(cat.clone(), &[], 1.0), Err(Error::EmptyTrainingSet)));
        let bad = vec![TrainingRecord { entity: "e".into(), answers: vec![("q1".into(), 2)] }];
        assert!(matches!(fit_tabular(cat, &bad, 1.0), Err(Error::AnswerOutOfRange { .. })));
    }

    #[test]
    fn unanswered_question_without_smoothing_is_uniform() {
        let cat = yes_no(&["q1", "q2"], &[2, 4]);
        let recs = vec![TrainingRecord { entity: "e".into(), answers: vec![("q1".into(), 1)] }];
        let t = fit_tabular(cat, &recs, 0.0).unwrap();
        assert_eq!(t.row(&"q2".into(), 0).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn posterior_update_reference() {
        let t = r1();
        let b = t.prior_belief();
        assert_eq!(b.posterior_update(&"qDet".into(), 0).unwrap().weights(), &[1.0, 0.0]);
        assert_eq!(b.posterior_update(&"qNoise".into(), 0).unwrap().weights(), &[0.5, 0.5]);
        let s = b.posterior_update(&"qSkew".into(), 0).unwrap();
        assert!(close(s.weights(), &[0.8, 0.2], 1e-15));
        // input untouched
        assert_eq!(b.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn impossible_evidence_is_an_error() {
        let t = r1();
        let b = t.prior_belief().posterior_update(&"qDet".into(), 0).unwrap();
        assert!(matches!(
            b.posterior_update(&"qDet2".into(), 1),
            Err(Error::ImpossibleEvidence { .. })
        ));
        assert!(matches!(
            b.posterior_update(&"qDet2".into(), 2),
            Err(Error::AnswerOutOfRange { .. })
        ));
    }

    #[test]
    fn predictive_reference() {
        let t = r1();
        let b = t.prior_belief();
        assert_eq!(b.predictive(&"qDet".into()).unwrap().probs, vec![0.5, 0.5]);
        let a = b.posterior_update(&"qDet".into(), 0).unwrap();
        assert!(close(&a.predictive(&"qSkew".into()).unwrap().probs, &[0.8, 0.2], 1e-15));
        let s = b.posterior_update(&"qSkew".into(), 0).unwrap();
        assert!(close(&s.predictive(&"qSkew".into()).unwrap().probs, &[0.68, 0.32], 1e-15));
        assert!(matches!(b.predictive(&"nope".into()), Err(Error::UnknownQuestion(_))));
    }

    #[test]
    fn joint_reference() {
        let t = r1();
        let b = t.prior_belief();
        assert_eq!(b.joint(&["qDet".into()]).unwrap().probs, vec![0.5, 0.5]);
        let j = b.joint(&["qDet".into(), "qNoise".into()]).unwrap();
        assert!(close(&j.probs, &[0.25; 4], 1e-15));
        let a = b.posterior_update(&"qDet".into(), 0).unwrap();
        let j = a.joint(&["qDet".into(), "qSkew".into()]).unwrap();
        assert!(close(&j.probs, &[0.8, 0.2, 0.0, 0.0], 1e-15));
        assert_eq!(j.shape, vec![2, 2]);
    }

    #[test]
    fn joint_cap_is_enforced() {
        let t = r1().with_support_cap(3);
        let err = t.prior_belief().joint(&["qDet".into(), "qNoise".into()]).unwrap_err();
        assert!(matches!(err, Error::SupportTooLarge { size: 4, cap: 3 }));
    }

    #[test]
    fn sequence_log_likelihood_reference() {
        let t = r1();
        let h = History::from_steps([("qNoise", 0)]).unwrap();
        assert!((t.sequence_log_likelihood(&h).unwrap().value + 0.693147).abs() < 1e-6);
        let h = History::from_steps([("qDet", 0), ("qSkew", 0)]).unwrap();
        let l1 = t.sequence_log_likelihood(&h).unwrap().value;
        assert!((l1 + 0.916291).abs() < 1e-6);
        let h = History::from_steps([("qSkew", 0), ("qDet", 0)]).unwrap();
        let l2 = t.sequence_log_likelihood(&h).unwrap().value;
        assert!((l1 - l2).abs() < 1e-12);
        let h = History::from_steps([("qDet", 0), ("qDet2", 1)]).unwrap();
        let l = t.sequence_log_likelihood(&h).unwrap();
        assert_eq!(l.value, f64::NEG_INFINITY);
        assert_eq!(l.impossible_at, Some(1));
    }

    #[test]
    fn batched_eigs_match_enumeration() {
        let t = r1();
        let b = t.prior_belief().posterior_update(&"qSkew".into(), 1).unwrap();
        let targets = ["qDet".into(), "qNoise".into()];
        let cands: Vec<QuestionId> = ["qNoise2", "qSkew2", "qDet2"].iter().map(|&s| s.into()).collect();
        let fast = b.candidate_eigs(&targets, &cands).unwrap();
        for (c, f) in cands.iter().zip(&fast) {
            let slow = b.eig_by_enumeration(&targets, c).unwrap();
            assert!((f - slow).abs() < 1e-12, "{c}: {f} vs {slow}");
        }
    }

    #[test]
    fn table_validation() {
        let cat = yes_no(&["q"], &[2]);
        assert!(LatentTable::new(cat.clone(), vec!["a".into()], vec![0.9], vec![vec![vec![0.5, 0.5]]]).is_err());
        assert!(LatentTable::new(cat.clone(), vec!["a".into()], vec![1.0], vec![vec![vec![0.6, 0.5]]]).is_err());
        assert!(LatentTable::new(cat, vec!["a".into()], vec![1.0], vec![vec![vec![1.0, 0.0]]]).is_ok());
    }
}
