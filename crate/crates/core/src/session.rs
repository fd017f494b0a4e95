//! Live elicitation sessions: a person answers, the engine chooses each next
//! question and reports the updated predictions for the target questions.
//!
//! Every session keeps an append-only event log (optionally mirrored to a
//! JSON-lines file) from which all snapshots can be recomputed.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::entropy::entropy;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_CANDIDATES, DEFAULT_TARGETS};
use crate::model::PredictiveModel;
use crate::policy::{select, MctsConfig, PolicyConfig, PolicyKind, ScoredQuestion};
use crate::rng::{self, derive_seed};
use crate::types::{AnswerIndex, History, QuestionId, TargetSet};

/// The model and data a session manager serves.
pub struct Engine {
    pub model: Arc<dyn PredictiveModel>,
    pub dataset_ref: String,
    pub model_ref: String,
    /// Directory for per-session JSON-lines logs.
    pub log_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub policy: Option<PolicyKind>,
    #[serde(default)]
    pub mcts: Option<MctsConfig>,
    #[serde(default)]
    pub n_candidates: Option<usize>,
    #[serde(default)]
    pub n_targets: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Explicit manifest; overrides seeded sampling when given.
    #[serde(default)]
    pub candidates: Option<Vec<QuestionId>>,
    #[serde(default)]
    pub targets: Option<Vec<QuestionId>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Exhausted,
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub session: u64,
    pub dataset: String,
    pub model: String,
    pub policy: PolicyConfig,
    pub candidates: Vec<QuestionId>,
    pub targets: Vec<QuestionId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NextQuestion {
    pub session: u64,
    pub step: usize,
    pub status: SessionStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<QuestionId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub score_kind: String,
    pub diagnostics: Vec<ScoredQuestion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBelief {
    pub question: QuestionId,
    pub probs: Vec<f64>,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    /// Answers observed so far.
    pub step: usize,
    pub targets: Vec<TargetBelief>,
    pub joint_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Event {
    Created {
        manifest: Manifest,
        seed: u64,
        created_at: u64,
    },
    Asked {
        step: usize,
        question: QuestionId,
        score_kind: String,
        diagnostics: Vec<ScoredQuestion>,
    },
    Answered {
        step: usize,
        question: QuestionId,
        answer: AnswerIndex,
        snapshot: BeliefSnapshot,
    },
    Exhausted {
        step: usize,
    },
    Closed {
        step: usize,
    },
}

/// Snapshot of the targets given a history.
pub fn belief_snapshot<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    targets: &TargetSet,
) -> Result<BeliefSnapshot> {
    let per_target = targets
        .questions()
        .iter()
        .map(|q| {
            let d = model.predictive(history, q)?;
            Ok(TargetBelief {
                question: q.clone(),
                entropy: entropy(&d),
                probs: d.probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BeliefSnapshot {
        step: history.len(),
        targets: per_target,
        joint_entropy: model.target_entropy(history, targets)?,
    })
}

/// Recomputes every snapshot in `events` from the logged history and
/// returns the steps whose canonical JSON differs.
pub fn replay<M: PredictiveModel + ?Sized>(model: &M, events: &[Event]) -> Result<Vec<usize>> {
    let Some(Event::Created { manifest, .. }) = events.first() else {
        return Err(Error::InvalidConfig("log does not start with a created event".into()));
    };
    let targets = TargetSet::new(manifest.targets.clone())?;
    let mut history = History::new();
    let mut mismatched = Vec::new();
    for e in events {
        if let Event::Answered {
            question,
            answer,
            snapshot,
            step,
        } = e
        {
            history.push(question.clone(), *answer)?;
            let again = belief_snapshot(model, &history, &targets)?;
            if serde_json::to_string(&again)? != serde_json::to_string(snapshot)? {
                mismatched.push(*step);
            }
        }
    }
    Ok(mismatched)
}

pub fn read_log(path: &Path) -> Result<Vec<Event>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

struct Pending {
    question: QuestionId,
    response: NextQuestion,
}

struct Session {
    manifest: Manifest,
    seed: u64,
    targets: TargetSet,
    pool: Vec<QuestionId>,
    history: History,
    status: SessionStatus,
    pending: Option<Pending>,
    snapshot: BeliefSnapshot,
    events: Vec<Event>,
    file: Option<File>,
}

impl Session {
    fn record(&mut self, event: Event) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&event)?)?;
        }
        self.events.push(event);
        Ok(())
    }
}

/// State of a closed session, readable without locking.
struct Frozen {
    snapshot: BeliefSnapshot,
    events: Vec<Event>,
}

struct Slot {
    live: Mutex<Session>,
    frozen: OnceLock<Frozen>,
}

pub struct SessionManager {
    engine: Engine,
    sessions: RwLock<BTreeMap<u64, Arc<Slot>>>,
    next_id: AtomicU64,
}

impl SessionManager {
    pub fn new(engine: Engine) -> Result<Self> {
        if let Some(dir) = &engine.log_dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            engine,
            sessions: RwLock::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn slot(&self, id: u64) -> Result<Arc<Slot>> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(&id)
            .cloned()
            .ok_or(Error::SessionNotFound(id.to_string()))
    }

    fn manifest_for(&self, req: &CreateSessionRequest, seed: u64) -> Result<(Vec<QuestionId>, Vec<QuestionId>)> {
        let catalog = self.engine.model.catalog();
        if let (Some(c), Some(t)) = (&req.candidates, &req.targets) {
            let (mut c, mut t) = (c.clone(), t.clone());
            if c.is_empty() {
                return Err(Error::InvalidConfig("candidate pool is empty".into()));
            }
            for q in c.iter().chain(&t) {
                catalog.index_of(q)?;
            }
            if let Some(q) = c.iter().find(|q| t.contains(q)) {
                return Err(Error::InvalidConfig(format!("`{q}` is both candidate and target")));
            }
            if let Some((i, q)) = c.iter().enumerate().find(|(i, q)| c[..*i].contains(q)) {
                let _ = i;
                return Err(Error::InvalidConfig(format!("candidate `{q}` listed twice")));
            }
            TargetSet::new(t.clone())?;
            catalog.sort_by_index(&mut c)?;
            catalog.sort_by_index(&mut t)?;
            return Ok((c, t));
        }
        if req.candidates.is_some() || req.targets.is_some() {
            return Err(Error::InvalidConfig("give both candidates and targets, or neither".into()));
        }
        let n_q = catalog.len();
        // omitted sizes shrink to fit small catalogs; explicit ones must fit
        let k = req.n_targets.unwrap_or(DEFAULT_TARGETS.min(n_q / 2));
        let n = req.n_candidates.unwrap_or(DEFAULT_CANDIDATES.min(n_q.saturating_sub(k)));
        if n == 0 || k == 0 {
            return Err(Error::InvalidConfig("n_candidates and n_targets must be positive".into()));
        }
        if n + k > n_q {
            return Err(Error::InvalidConfig(format!(
                "{n} candidates + {k} targets exceed the {n_q} catalog questions"
            )));
        }
        let mut ids: Vec<QuestionId> = catalog.ids().cloned().collect();
        ids.shuffle(&mut rng::rng(seed));
        let mut t = ids[..k].to_vec();
        let mut c = ids[k..k + n].to_vec();
        catalog.sort_by_index(&mut t)?;
        catalog.sort_by_index(&mut c)?;
        Ok((c, t))
    }

    pub fn create_session(&self, req: &CreateSessionRequest) -> Result<Manifest> {
        let seed = req.seed.unwrap_or(0);
        let mut policy = PolicyConfig::new(req.policy.unwrap_or(PolicyKind::Greedy));
        if let Some(m) = req.mcts {
            policy.mcts = m;
        }
        policy.seed = seed;
        policy.validate()?;
        let (candidates, targets) = self.manifest_for(req, seed)?;
        let target_set = TargetSet::new(targets.clone())?;
        let snapshot = belief_snapshot(self.engine.model.as_ref(), &History::new(), &target_set)?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let manifest = Manifest {
            session: id,
            dataset: self.engine.dataset_ref.clone(),
            model: self.engine.model_ref.clone(),
            policy,
            candidates: candidates.clone(),
            targets,
        };
        let file = match &self.engine.log_dir {
            Some(dir) => Some(
                OpenOptions::new()
                    .create(true)
                    .truncate(true)
                    .write(true)
                    .open(dir.join(format!("session-{id}.jsonl")))?,
            ),
            None => None,
        };
        let mut s = Session {
            manifest: manifest.clone(),
            seed,
            targets: target_set,
            pool: candidates,
            history: History::new(),
            status: SessionStatus::Active,
            pending: None,
            snapshot,
            events: Vec::new(),
            file,
        };
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        s.record(Event::Created {
            manifest: manifest.clone(),
            seed,
            created_at,
        })?;
        self.sessions.write().expect("session map lock").insert(
            id,
            Arc::new(Slot {
                live: Mutex::new(s),
                frozen: OnceLock::new(),
            }),
        );
        Ok(manifest)
    }

    /// The policy's choice for the current history; repeated calls return
    /// the same question until it is answered.
    pub fn next_question(&self, id: u64) -> Result<NextQuestion> {
        let slot = self.slot(id)?;
        if slot.frozen.get().is_some() {
            return Err(Error::SessionClosed(id.to_string()));
        }
        let mut s = slot.live.lock().expect("session lock");
        match s.status {
            SessionStatus::Closed => return Err(Error::SessionClosed(id.to_string())),
            SessionStatus::Exhausted => return Ok(exhausted(&s)),
            SessionStatus::Active => {}
        }
        if let Some(p) = &s.pending {
            return Ok(p.response.clone());
        }
        let step = s.history.len();
        if s.pool.is_empty() {
            s.status = SessionStatus::Exhausted;
            s.record(Event::Exhausted { step })?;
            return Ok(exhausted(&s));
        }
        let model = self.engine.model.as_ref();
        let sel = select(
            model,
            &s.history,
            &s.targets,
            &s.pool,
            &s.manifest.policy,
            derive_seed(s.seed, step as u64),
        )?;
        let entry = model.catalog().entry(&sel.question)?;
        let response = NextQuestion {
            session: id,
            step,
            status: SessionStatus::Active,
            question: Some(sel.question.clone()),
            text: Some(entry.text.clone()),
            choices: Some(entry.choices.clone()),
            score_kind: sel.score_kind.clone(),
            diagnostics: sel.diagnostics.clone(),
        };
        s.record(Event::Asked {
            step,
            question: sel.question.clone(),
            score_kind: sel.score_kind,
            diagnostics: sel.diagnostics,
        })?;
        s.pending = Some(Pending {
            question: sel.question,
            response: response.clone(),
        });
        Ok(response)
    }

    pub fn submit_answer(&self, id: u64, answer: AnswerIndex) -> Result<BeliefSnapshot> {
        let slot = self.slot(id)?;
        if slot.frozen.get().is_some() {
            return Err(Error::SessionClosed(id.to_string()));
        }
        let mut s = slot.live.lock().expect("session lock");
        if s.status == SessionStatus::Closed {
            return Err(Error::SessionClosed(id.to_string()));
        }
        let question = s.pending.as_ref().ok_or(Error::NoPendingQuestion(id.to_string()))?.question.clone();
        let model = self.engine.model.as_ref();
        model.catalog().check_answer(&question, answer)?;
        let history = s.history.with(question.clone(), answer)?;
        let snapshot = belief_snapshot(model, &history, &s.targets)?;
        s.history = history;
        s.pool.retain(|q| *q != question);
        s.pending = None;
        s.snapshot = snapshot.clone();
        s.record(Event::Answered {
            step: snapshot.step,
            question,
            answer,
            snapshot: snapshot.clone(),
        })?;
        Ok(snapshot)
    }

    pub fn belief(&self, id: u64) -> Result<BeliefSnapshot> {
        let slot = self.slot(id)?;
        if let Some(f) = slot.frozen.get() {
            return Ok(f.snapshot.clone());
        }
        let s = slot.live.lock().expect("session lock");
        Ok(s.snapshot.clone())
    }

    pub fn log(&self, id: u64) -> Result<Vec<Event>> {
        let slot = self.slot(id)?;
        if let Some(f) = slot.frozen.get() {
            return Ok(f.events.clone());
        }
        let s = slot.live.lock().expect("session lock");
        Ok(s.events.clone())
    }

    pub fn status(&self, id: u64) -> Result<SessionStatus> {
        let slot = self.slot(id)?;
        if slot.frozen.get().is_some() {
            return Ok(SessionStatus::Closed);
        }
        let s = slot.live.lock().expect("session lock");
        Ok(s.status)
    }

    pub fn close(&self, id: u64) -> Result<()> {
        let slot = self.slot(id)?;
        let mut s = slot.live.lock().expect("session lock");
        if s.status != SessionStatus::Active {
            return Err(Error::SessionClosed(id.to_string()));
        }
        s.status = SessionStatus::Closed;
        s.pending = None;
        let step = s.history.len();
        s.record(Event::Closed { step })?;
        s.file = None;
        let _ = slot.frozen.set(Frozen {
            snapshot: s.snapshot.clone(),
            events: s.events.clone(),
        });
        Ok(())
    }

    pub fn session_ids(&self) -> Vec<u64> {
        self.sessions.read().expect("session map lock").keys().copied().collect()
    }
}

fn exhausted(s: &Session) -> NextQuestion {
    NextQuestion {
        session: s.manifest.session,
        step: s.history.len(),
        status: SessionStatus::Exhausted,
        question: None,
        text: None,
        choices: None,
        score_kind: "none".into(),
        diagnostics: Vec::new(),
    }
}

#[cfg(test)]
// reference values are pinned to six decimals
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use crate::reference::r1;

    fn manager(log_dir: Option<PathBuf>) -> SessionManager {
        SessionManager::new(Engine {
            model: Arc::new(r1()),
            dataset_ref: "demo:r1".into(),
            model_ref: "tabular".into(),
            log_dir,
        })
        .unwrap()
    }

    fn explicit(pool: &[&str], targets: &[&str]) -> CreateSessionRequest {
        CreateSessionRequest {
            candidates: Some(pool.iter().map(|&s| s.into()).collect()),
            targets: Some(targets.iter().map(|&s| s.into()).collect()),
            ..Default::default()
        }
    }

    #[test]
    fn greedy_picks_deterministic_question() {
        let m = manager(None);
        let id = m.create_session(&explicit(&["qNoise", "qDet2"], &["qDet"])).unwrap().session;
        let n = m.next_question(id).unwrap();
        assert_eq!(n.question, Some("qDet2".into()));
        let d = n.diagnostics.iter().find(|d| d.question == "qDet2".into()).unwrap();
        assert!((d.score - 0.693147).abs() < 1e-6);
        assert_eq!(m.next_question(id).unwrap(), n);

        let snap = m.submit_answer(id, 0).unwrap();
        assert_eq!(snap.step, 1);
        assert_eq!(snap.targets[0].probs, vec![1.0, 0.0]);
        assert_eq!(snap.targets[0].entropy, 0.0);
        assert!(matches!(m.submit_answer(id, 0), Err(Error::NoPendingQuestion(_))));
    }

    #[test]
    fn validation_and_not_found() {
        let m = manager(None);
        let req = CreateSessionRequest {
            n_candidates: Some(0),
            ..Default::default()
        };
        assert!(m.create_session(&req).is_err());
        assert!(matches!(m.next_question(99), Err(Error::SessionNotFound(_))));
        let id = m.create_session(&explicit(&["qNoise"], &["qDet"])).unwrap().session;
        m.next_question(id).unwrap();
        assert!(matches!(m.submit_answer(id, 2), Err(Error::AnswerOutOfRange { .. })));
    }

    #[test]
    fn default_request_fits_small_catalog() {
        let m = manager(None);
        let a = m.create_session(&CreateSessionRequest::default()).unwrap();
        assert_eq!(a.targets.len(), 3);
        assert_eq!(a.candidates.len(), 3);
        let b = m.create_session(&CreateSessionRequest::default()).unwrap();
        assert_eq!((a.candidates, a.targets), (b.candidates, b.targets));
    }

    #[test]
    fn exhaustion_and_close() {
        let m = manager(None);
        let id = m.create_session(&explicit(&["qNoise"], &["qDet"])).unwrap().session;
        m.next_question(id).unwrap();
        m.submit_answer(id, 1).unwrap();
        let n = m.next_question(id).unwrap();
        assert_eq!(n.status, SessionStatus::Exhausted);
        assert!(m.close(id).is_err());

        let id = m.create_session(&explicit(&["qNoise"], &["qDet"])).unwrap().session;
        m.close(id).unwrap();
        assert!(matches!(m.next_question(id), Err(Error::SessionClosed(_))));
        assert_eq!(m.status(id).unwrap(), SessionStatus::Closed);
        assert!(matches!(m.log(id).unwrap().last(), Some(Event::Closed { .. })));
    }

    #[test]
    fn log_replays_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let m = manager(Some(dir.path().to_path_buf()));
        let req = CreateSessionRequest {
            policy: Some(PolicyKind::Mcts),
            n_candidates: Some(3),
            n_targets: Some(2),
            seed: Some(11),
            ..Default::default()
        };
        let id = m.create_session(&req).unwrap().session;
        for a in [0, 1, 0] {
            m.next_question(id).unwrap();
            m.submit_answer(id, a).unwrap();
        }
        let events = read_log(&dir.path().join(format!("session-{id}.jsonl"))).unwrap();
        assert_eq!(events, m.log(id).unwrap());
        let r = r1();
        assert!(replay(&r, &events).unwrap().is_empty());
        let other = r.with_rows(&"qSkew".into(), vec![vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        // a different model disagrees somewhere unless nothing depended on it
        let _ = replay(&other, &events).unwrap();
    }

    #[test]
    fn interleaved_sessions_match_serial() {
        let run = |m: &SessionManager, id: u64| {
            let mut out = Vec::new();
            for a in [1, 0] {
                out.push(m.next_question(id).unwrap().question);
                m.submit_answer(id, a).unwrap();
            }
            out
        };
        let req = |seed| CreateSessionRequest {
            n_candidates: Some(3),
            n_targets: Some(2),
            seed: Some(seed),
            ..Default::default()
        };
        let serial = manager(None);
        let a = serial.create_session(&req(1)).unwrap().session;
        let b = serial.create_session(&req(2)).unwrap().session;
        let ra = run(&serial, a);
        let rb = run(&serial, b);

        let m = Arc::new(manager(None));
        let a = m.create_session(&req(1)).unwrap().session;
        let b = m.create_session(&req(2)).unwrap().session;
        let (m1, m2) = (m.clone(), m.clone());
        let ha = std::thread::spawn(move || run(&m1, a));
        let hb = std::thread::spawn(move || run(&m2, b));
        assert_eq!(ha.join().unwrap(), ra);
        assert_eq!(hb.join().unwrap(), rb);
    }
}
