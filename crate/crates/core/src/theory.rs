//! Brute-force checks of the planning guarantees on small exactly
//! enumerable instances:
//!
//! * the greedy set reaches at least `1 - 1/e` of the optimal set's expected
//!   information gain, asserted only where the diminishing-returns probe
//!   finds no violation;
//! * the simulator bound
//!   `E_q[ln p] >= E_p[ln p] - sqrt(E_p[ln² p] · χ²(q ‖ p))` for the model's
//!   log-probability of the targets given the realized answers to a
//!   question set.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::xlogx;
use crate::error::{Error, Result};
use crate::info_gain::expected_information_gain_set;
use crate::model::PredictiveModel;
use crate::policy::argmax_by_catalog;
use crate::rng::{self, derive_seed, sample_index, Rng};
use crate::table::LatentTable;
use crate::types::{CatalogEntry, History, QuestionCatalog, QuestionId, TargetSet};

/// Slack below which a bound counts as violated.
pub const BOUND_TOL: f64 = 1e-9;

/// Largest number of subsets `brute_force_optimal_set` will score.
pub const MAX_SUBSETS: u128 = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub instance_digest: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl BoundReport {
    fn new(lhs: f64, rhs: f64, digest: String) -> Self {
        let slack = lhs - rhs;
        Self {
            lhs,
            rhs,
            slack,
            holds: slack >= -BOUND_TOL,
            instance_digest: digest,
            flags: Vec::new(),
        }
    }
}

/// A table with a target set and a candidate pool.
#[derive(Clone, Debug)]
pub struct Instance {
    pub table: LatentTable,
    pub history: History,
    pub targets: TargetSet,
    pub pool: Vec<QuestionId>,
}

impl Instance {
    pub fn digest(&self) -> String {
        let mut s = table_fingerprint(&self.table);
        for t in self.targets.questions() {
            let _ = write!(s, "t{t};");
        }
        for q in &self.pool {
            let _ = write!(s, "p{q};");
        }
        for st in self.history.steps() {
            let _ = write!(s, "h{}={};", st.question, st.answer);
        }
        short_hash(&s)
    }
}

fn table_fingerprint(t: &LatentTable) -> String {
    let mut s = String::new();
    for p in t.prior() {
        let _ = write!(s, "{:016x},", p.to_bits());
    }
    for q in t.catalog().ids() {
        let _ = write!(s, "|{q}:");
        for u in 0..t.n_latents() {
            for v in t.row(q, u).expect("catalog question") {
                let _ = write!(s, "{:016x},", v.to_bits());
            }
        }
    }
    s
}

fn short_hash(s: &str) -> String {
    let d = Sha256::digest(s.as_bytes());
    d.iter().take(8).fold(String::new(), |mut acc, b| {
        let _ = write!(acc, "{b:02x}");
        acc
    })
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Exhaustive search over every `budget`-sized subset of `pool` for the
/// largest exact expected information gain. Ties keep the lexicographically
/// smallest index tuple.
pub fn brute_force_optimal_set<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
    budget: usize,
) -> Result<(Vec<QuestionId>, f64)> {
    if budget > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} exceeds pool size {}",
            pool.len()
        )));
    }
    let subsets = n_choose_k(pool.len(), budget);
    if subsets > MAX_SUBSETS {
        return Err(Error::InvalidConfig(format!(
            "{subsets} subsets exceed the brute-force cap {MAX_SUBSETS}"
        )));
    }
    let mut idx: Vec<usize> = (0..budget).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let set: Vec<QuestionId> = idx.iter().map(|&i| pool[i].clone()).collect();
        let v = expected_information_gain_set(model, history, targets, &set, 0, 0)?.value;
        if best.as_ref().is_none_or(|(_, b)| v > b + 1e-12) {
            best = Some((idx.clone(), v));
        }
        // next combination in lexicographic order
        let mut i = budget;
        loop {
            if i == 0 {
                let (ix, v) = best.expect("at least one subset");
                return Ok((ix.into_iter().map(|i| pool[i].clone()).collect(), v));
            }
            i -= 1;
            if idx[i] < pool.len() - budget + i {
                idx[i] += 1;
                for j in i + 1..budget {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Non-adaptive greedy set: each step adds the question that maximizes the
/// exact expected gain of the set so far plus that question.
pub fn greedy_set<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
    budget: usize,
) -> Result<(Vec<QuestionId>, f64)> {
    if budget > pool.len() {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} exceeds pool size {}",
            pool.len()
        )));
    }
    let mut chosen: Vec<QuestionId> = Vec::with_capacity(budget);
    let mut value = 0.0;
    for _ in 0..budget {
        let rest: Vec<QuestionId> = pool.iter().filter(|q| !chosen.contains(q)).cloned().collect();
        let scores = rest
            .iter()
            .map(|x| {
                let mut s = chosen.clone();
                s.push(x.clone());
                expected_information_gain_set(model, history, targets, &s, 0, 0).map(|e| e.value)
            })
            .collect::<Result<Vec<_>>>()?;
        let best = argmax_by_catalog(model.catalog(), &rest, &scores)?;
        value = scores[best];
        chosen.push(rest[best].clone());
    }
    Ok((chosen, value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub checks: usize,
    pub violations: usize,
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Samples nested histories `H ⊆ H'` and one more observation `(x, y)`, with
/// answers drawn from the model, and counts how often the gain from `(x, y)`
/// after `H'` exceeds the gain after `H` by more than [`BOUND_TOL`].
pub fn submodularity_probe<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
    pool: &[QuestionId],
    n_checks: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if n_checks == 0 {
        return Ok(ProbeResult {
            checks: 0,
            violations: 0,
            rate: 0.0,
            flags: vec!["no-checks".into()],
        });
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut r = rng::rng(seed);
    let mut violations = 0;
    for _ in 0..n_checks {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut r);
        let x = &pool[order[0]];
        let big_len = r.random_range(0..pool.len());
        let big_qs = &order[1..1 + big_len];

        let mut big = history.clone();
        let mut small = history.clone();
        for &i in big_qs {
            let q = &pool[i];
            let p = model.predictive(&big, q)?;
            let y = sample_index(&mut r, &p.probs);
            big.push(q.clone(), y)?;
            if r.random::<bool>() {
                small.push(q.clone(), y)?;
            }
        }
        let p = model.predictive(&big, x)?;
        let y = sample_index(&mut r, &p.probs);

        let gain = |h: &History| -> Result<f64> {
            let before = model.target_entropy(h, targets)?;
            let after = model.target_entropy(&h.with(x.clone(), y)?, targets)?;
            Ok(before - after)
        };
        // `y` has positive probability after `big`, hence after `small` too
        if gain(&small)? < gain(&big)? - BOUND_TOL {
            violations += 1;
        }
    }
    Ok(ProbeResult {
        checks: n_checks,
        violations,
        rate: violations as f64 / n_checks as f64,
        flags: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyBoundReport {
    pub budget: usize,
    pub greedy_set: Vec<QuestionId>,
    pub optimal_set: Vec<QuestionId>,
    pub greedy_eig: f64,
    pub optimal_eig: f64,
    pub probe: ProbeResult,
    /// Whether the bound is asserted, i.e. the probe found no violation.
    pub asserted: bool,
    pub report: BoundReport,
}

pub const DEFAULT_PROBE_CHECKS: usize = 200;

/// `EIG(greedy) >= (1 - 1/e) · EIG(optimal)`.
pub fn check_greedy_bound(
    instance: &Instance,
    budget: usize,
    probe_checks: usize,
    seed: u64,
) -> Result<GreedyBoundReport> {
    let Instance {
        table,
        history,
        targets,
        pool,
    } = instance;
    let (greedy, g) = greedy_set(table, history, targets, pool, budget)?;
    let (optimal, o) = brute_force_optimal_set(table, history, targets, pool, budget)?;
    let probe = submodularity_probe(table, history, targets, pool, probe_checks, seed)?;
    let asserted = probe.violations == 0;
    let mut report = BoundReport::new(g, (1.0 - (-1.0f64).exp()) * o, instance.digest());
    if !asserted {
        report.flags.push("assumption-violated".into());
    }
    Ok(GreedyBoundReport {
        budget,
        greedy_set: greedy,
        optimal_set: optimal,
        greedy_eig: g,
        optimal_eig: o,
        probe,
        asserted,
        report,
    })
}

/// Simulator bound for the model `p` against the truth `q`. Both are
/// evaluated exactly on the joint outcome `(Y_𝒳, Z)` of the question set
/// and the targets; the integrand is `f = ln p(Z | 𝒳, Y_𝒳)`:
///
/// `lhs = E_q[f]`, `rhs = E_p[f] - sqrt(E_p[f²] · χ²(q ‖ p))`.
///
/// If `q` puts mass where `p` has none, `χ²` is infinite and the bound is
/// vacuous: both sides are `-inf`, `holds` is true and the report is flagged.
pub fn check_simulator_bound(
    p: &LatentTable,
    q: &LatentTable,
    targets: &TargetSet,
    question_set: &[QuestionId],
) -> Result<BoundReport> {
    let mut all: Vec<QuestionId> = question_set.to_vec();
    all.extend(targets.questions().iter().cloned());
    for x in &all {
        let (ap, aq) = (p.catalog().alphabet(x)?, q.catalog().alphabet(x)?);
        if ap != aq {
            return Err(Error::InvalidConfig(format!(
                "question `{x}` has {ap} choices under p and {aq} under q"
            )));
        }
    }
    let h = History::new();
    let jp = p.joint(&h, &all)?;
    let jq = q.joint(&h, &all)?;
    let n_z: usize = targets
        .questions()
        .iter()
        .map(|t| p.catalog().alphabet(t))
        .product::<Result<usize>>()?;

    let digest = short_hash(&(table_fingerprint(p) + "||" + &table_fingerprint(q)));
    let (mut lhs, mut ep, mut ep2, mut chi2) = (0.0, 0.0, 0.0, 0.0);
    let mut vacuous = false;
    for (pj, qj) in jp.probs.chunks(n_z).zip(jq.probs.chunks(n_z)) {
        let py: f64 = pj.iter().sum();
        for (&pz, &qz) in pj.iter().zip(qj) {
            if pz <= 0.0 {
                if qz > 0.0 {
                    vacuous = true;
                }
                continue;
            }
            let f = (pz / py).ln();
            lhs += qz * f;
            ep += pz * f;
            ep2 += pz * f * f;
            chi2 += (qz - pz).powi(2) / pz;
        }
    }
    if vacuous {
        let mut r = BoundReport::new(f64::NEG_INFINITY, f64::NEG_INFINITY, digest);
        r.slack = 0.0;
        r.holds = true;
        r.flags.push("vacuous-infinite-chi2".into());
        return Ok(r);
    }
    Ok(BoundReport::new(lhs, ep - (ep2 * chi2).sqrt(), digest))
}

/// Shape of randomly generated audit instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub max_latents: usize,
    pub max_alphabet: usize,
    pub max_targets: usize,
    pub min_pool: usize,
    pub max_pool: usize,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            max_latents: 4,
            max_alphabet: 3,
            max_targets: 2,
            min_pool: 3,
            max_pool: 6,
        }
    }
}

fn random_simplex(r: &mut Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| -(1.0 - r.random::<f64>()).ln()).collect();
    let s: f64 = v.iter().sum();
    let mut out: Vec<f64> = v.iter().map(|x| x / s).collect();
    // exact unit mass on the last coordinate
    let head: f64 = out[..n - 1].iter().sum();
    out[n - 1] = (1.0 - head).max(0.0);
    out
}

/// Likelihood rows for one question: dense random rows, deterministic
/// one-hot rows, or identical rows for every latent (pure noise).
fn random_rows(r: &mut Rng, m: usize, a: usize) -> Vec<Vec<f64>> {
    match r.random_range(0..6) {
        0 => (0..m)
            .map(|_| {
                let mut row = vec![0.0; a];
                row[r.random_range(0..a)] = 1.0;
                row
            })
            .collect(),
        1 => vec![random_simplex(r, a); m],
        _ => (0..m).map(|_| random_simplex(r, a)).collect(),
    }
}

/// Random catalog of `n` questions `x0..` with alphabets in `2..=max_alphabet`.
pub fn random_catalog(r: &mut Rng, n: usize, max_alphabet: usize) -> QuestionCatalog {
    QuestionCatalog::new(
        (0..n)
            .map(|i| {
                let a = r.random_range(2..=max_alphabet.max(2));
                CatalogEntry {
                    id: QuestionId(format!("x{i}")),
                    text: format!("question {i}"),
                    choices: (0..a).map(|k| format!("a{k}")).collect(),
                    features: None,
                    tags: None,
                }
            })
            .collect(),
    )
    .expect("generated catalog")
}

/// Random table over `catalog` with up to `max_latents` latents.
pub fn random_table(r: &mut Rng, catalog: Arc<QuestionCatalog>, max_latents: usize) -> LatentTable {
    let m = r.random_range(1..=max_latents.max(1));
    let prior = random_simplex(r, m);
    let likelihood = catalog
        .entries()
        .iter()
        .map(|e| random_rows(r, m, e.alphabet()))
        .collect();
    LatentTable::new(catalog, (0..m).map(|u| format!("u{u}")).collect(), prior, likelihood)
        .expect("generated table")
}

pub fn random_instance(r: &mut Rng, spec: &InstanceSpec) -> Instance {
    let n_targets = r.random_range(1..=spec.max_targets.max(1));
    let n_pool = r.random_range(spec.min_pool.max(1)..=spec.max_pool.max(spec.min_pool.max(1)));
    let catalog = Arc::new(random_catalog(r, n_targets + n_pool, spec.max_alphabet));
    let table = random_table(r, catalog.clone(), spec.max_latents);
    let ids: Vec<QuestionId> = catalog.ids().cloned().collect();
    Instance {
        table,
        history: History::new(),
        targets: TargetSet::new(ids[..n_targets].to_vec()).expect("non-empty"),
        pool: ids[n_targets..].to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyAudit {
    pub instances: usize,
    pub probe_passed: usize,
    pub asserted_violations: usize,
    /// Instances whose probe failed but whose bound still held.
    pub unasserted_holding: usize,
    pub unasserted_failing: Vec<String>,
    pub min_asserted_slack: f64,
    pub greedy_below_optimal_violations: usize,
    pub reports: Vec<GreedyBoundReport>,
}

/// Runs the greedy bound on `n` random instances with budgets in `1..=3`.
pub fn audit_greedy_bound(n: usize, seed: u64, spec: &InstanceSpec, probe_checks: usize) -> Result<GreedyAudit> {
    let mut audit = GreedyAudit {
        instances: n,
        probe_passed: 0,
        asserted_violations: 0,
        unasserted_holding: 0,
        unasserted_failing: Vec::new(),
        min_asserted_slack: f64::INFINITY,
        greedy_below_optimal_violations: 0,
        reports: Vec::with_capacity(n),
    };
    for i in 0..n {
        let s = derive_seed(seed, i as u64);
        let mut r = rng::rng(s);
        let inst = random_instance(&mut r, spec);
        let budget = r.random_range(1..=3usize.min(inst.pool.len()));
        let rep = check_greedy_bound(&inst, budget, probe_checks, derive_seed(s, 1))?;
        if rep.optimal_eig < rep.greedy_eig - BOUND_TOL {
            audit.greedy_below_optimal_violations += 1;
        }
        if rep.asserted {
            audit.probe_passed += 1;
            audit.min_asserted_slack = audit.min_asserted_slack.min(rep.report.slack);
            if !rep.report.holds {
                audit.asserted_violations += 1;
            }
        } else if rep.report.holds {
            audit.unasserted_holding += 1;
        } else {
            audit.unasserted_failing.push(rep.report.instance_digest.clone());
        }
        audit.reports.push(rep);
    }
    Ok(audit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorAudit {
    pub pairs: usize,
    pub holding: usize,
    pub vacuous: usize,
    pub min_slack: f64,
    pub reports: Vec<BoundReport>,
}

/// Runs the simulator bound on `n` random `(p, q)` pairs over a shared
/// catalog (up to 4 latents, 3 choices).
pub fn audit_simulator_bound(n: usize, seed: u64) -> Result<SimulatorAudit> {
    let mut audit = SimulatorAudit {
        pairs: n,
        holding: 0,
        vacuous: 0,
        min_slack: f64::INFINITY,
        reports: Vec::with_capacity(n),
    };
    for i in 0..n {
        let mut r = rng::rng(derive_seed(seed, i as u64));
        let n_targets = r.random_range(1..=2);
        let n_set = r.random_range(1..=2);
        let catalog = Arc::new(random_catalog(&mut r, n_targets + n_set, 3));
        let p = random_table(&mut r, catalog.clone(), 4);
        let q = random_table(&mut r, catalog.clone(), 4);
        let ids: Vec<QuestionId> = catalog.ids().cloned().collect();
        let targets = TargetSet::new(ids[..n_targets].to_vec())?;
        let rep = check_simulator_bound(&p, &q, &targets, &ids[n_targets..])?;
        if rep.holds {
            audit.holding += 1;
        }
        if rep.flags.iter().any(|f| f.starts_with("vacuous")) {
            audit.vacuous += 1;
        } else {
            audit.min_slack = audit.min_slack.min(rep.slack);
        }
        audit.reports.push(rep);
    }
    Ok(audit)
}

/// Entropy of the joint `(Y_𝒳, Z)` minus entropy of `Y_𝒳`, i.e.
/// `-E_p[ln p(Z | 𝒳, Y)]`; used to cross-check the set EIG.
pub fn conditional_target_entropy(p: &LatentTable, targets: &TargetSet, question_set: &[QuestionId]) -> Result<f64> {
    let mut all = question_set.to_vec();
    all.extend(targets.questions().iter().cloned());
    let j = p.joint(&History::new(), &all)?;
    let n_z: usize = targets
        .questions()
        .iter()
        .map(|t| p.catalog().alphabet(t))
        .product::<Result<usize>>()?;
    let mut h = 0.0;
    for block in j.probs.chunks(n_z) {
        let py: f64 = block.iter().sum();
        h += xlogx(py) - block.iter().map(|&v| xlogx(v)).sum::<f64>();
    }
    Ok(h)
}
