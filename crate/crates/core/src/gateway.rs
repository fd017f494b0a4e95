//! Remote predictive models. A served language model that can score
//! continuations is queried with the history rendered as one QA transcript;
//! the log-probabilities of the answer choices are exponentiated and
//! renormalized over the choice set.
//!
//! Wire contract (any inference server can be shimmed to it):
//!
//! ```text
//! POST {endpoint}  {"prompt": "...", "continuations": [" yes", " no"]}
//!               -> {"logprobs": [-0.105, -2.302]}
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::PredictiveModel;
use crate::rng;
use crate::types::{Distribution, History, QuestionCatalog, QuestionId, TargetSet};

/// The only prompt layout so far. Bumping it invalidates cached responses.
pub const PROMPT_TEMPLATE: &str = "qa-v1";

fn default_template() -> String {
    PROMPT_TEMPLATE.into()
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    2
}

fn default_backoff_ms() -> u64 {
    200
}

fn default_in_flight() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteModelConfig {
    pub endpoint: String,
    #[serde(default = "default_template")]
    pub template: String,
    /// Answer strings sent as continuations, overriding the catalog's
    /// choice labels for the listed questions.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub choices: BTreeMap<QuestionId, Vec<String>>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_path: Option<PathBuf>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl RemoteModelConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            template: default_template(),
            choices: BTreeMap::new(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff_ms(),
            cache_path: None,
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self, catalog: &QuestionCatalog) -> Result<()> {
        if self.endpoint.is_empty() {
            return Err(Error::InvalidConfig("empty endpoint".into()));
        }
        if self.template != PROMPT_TEMPLATE {
            return Err(Error::InvalidConfig(format!(
                "unknown prompt template `{}` (supported: {PROMPT_TEMPLATE})",
                self.template
            )));
        }
        if self.timeout_ms == 0 {
            return Err(Error::InvalidConfig("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidConfig("max_in_flight must be positive".into()));
        }
        for (q, labels) in &self.choices {
            let a = catalog.alphabet(q)?;
            if labels.len() != a {
                return Err(Error::InvalidConfig(format!(
                    "question `{q}` has {a} choices but {} answer strings",
                    labels.len()
                )));
            }
        }
        Ok(())
    }

    fn labels<'a>(&'a self, catalog: &'a QuestionCatalog, q: &QuestionId) -> Result<&'a [String]> {
        match self.choices.get(q) {
            Some(l) => Ok(l),
            None => Ok(&catalog.entry(q)?.choices),
        }
    }
}

/// `Q: {text}\nA: {answer}\n` per step, then `Q: {text}\nA:`.
pub fn render_prompt(
    config: &RemoteModelConfig,
    catalog: &QuestionCatalog,
    history: &History,
    question: &QuestionId,
) -> Result<String> {
    let mut s = String::new();
    for st in history.steps() {
        let labels = config.labels(catalog, &st.question)?;
        catalog.check_answer(&st.question, st.answer)?;
        s.push_str(&format!("Q: {}\nA: {}\n", catalog.entry(&st.question)?.text, labels[st.answer]));
    }
    s.push_str(&format!("Q: {}\nA:", catalog.entry(question)?.text));
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogprobRequest {
    pub prompt: String,
    pub continuations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogprobResponse {
    pub logprobs: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TransportError {
    /// Worth retrying: connection failure, timeout, server error.
    Network(String),
    /// The server answered with something that is not a logprob response.
    Protocol(String),
}

pub trait Transport: Send + Sync {
    fn request(&self, req: &LogprobRequest) -> std::result::Result<LogprobResponse, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn request(&self, req: &LogprobRequest) -> std::result::Result<LogprobResponse, TransportError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        resp.body_mut()
            .read_json::<LogprobResponse>()
            .map_err(|e| TransportError::Protocol(format!("bad response body: {e}")))
    }
}

/// Exponentiates and renormalizes over the choice set. Every choice needs a
/// finite or `-inf` log-probability, and at least one must be finite.
pub fn normalize_logprobs(labels: &[String], logprobs: &[Option<f64>]) -> Result<Distribution> {
    if logprobs.len() > labels.len() {
        return Err(Error::Protocol(format!(
            "{} logprobs for {} choices",
            logprobs.len(),
            labels.len()
        )));
    }
    let mut lp = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        match logprobs.get(i).copied().flatten() {
            Some(v) if !v.is_nan() && v != f64::INFINITY => lp.push(v),
            Some(v) => return Err(Error::Protocol(format!("logprob {v} for choice `{label}`"))),
            None => return Err(Error::Protocol(format!("missing logprob for choice `{label}`"))),
        }
    }
    let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Protocol("every choice has zero probability".into()));
    }
    let w: Vec<f64> = lp.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = w.iter().sum();
    Ok(Distribution::categorical(w.iter().map(|v| v / s).collect()))
}

fn fetch(
    transport: &dyn Transport,
    config: &RemoteModelConfig,
    labels: &[String],
    req: &LogprobRequest,
) -> Result<Distribution> {
    let attempts = config.max_retries + 1;
    let mut last = String::new();
    for i in 0..attempts {
        if i > 0 {
            std::thread::sleep(Duration::from_millis(config.retry_backoff_ms * i as u64));
        }
        match transport.request(req) {
            Ok(r) => return normalize_logprobs(labels, &r.logprobs),
            Err(TransportError::Protocol(m)) => return Err(Error::Protocol(m)),
            Err(TransportError::Network(m)) => last = m,
        }
    }
    Err(Error::Unavailable { attempts, reason: last })
}

fn request_for(
    config: &RemoteModelConfig,
    catalog: &QuestionCatalog,
    history: &History,
    question: &QuestionId,
) -> Result<(LogprobRequest, Vec<String>)> {
    let labels = config.labels(catalog, question)?.to_vec();
    let req = LogprobRequest {
        prompt: render_prompt(config, catalog, history, question)?,
        continuations: labels.iter().map(|l| format!(" {l}")).collect(),
    };
    Ok((req, labels))
}

/// One uncached request with retries.
pub fn remote_predictive_distribution(
    transport: &dyn Transport,
    config: &RemoteModelConfig,
    history: &History,
    question: &QuestionId,
    catalog: &QuestionCatalog,
) -> Result<Distribution> {
    let (req, labels) = request_for(config, catalog, history, question)?;
    fetch(transport, config, &labels, &req)
}

/// `template|sha256(history)|question`.
pub fn cache_key(template: &str, history: &History, question: &QuestionId) -> String {
    let h = Sha256::digest(serde_json::to_vec(history).expect("history serializes"));
    let hex = h.iter().fold(String::with_capacity(64), |mut s, b| {
        s.push_str(&format!("{b:02x}"));
        s
    });
    format!("{template}|{hex}|{question}")
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    probs: Vec<f64>,
}

struct Cache {
    entries: HashMap<String, Distribution>,
    file: Option<File>,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut n = self.count.lock().expect("in-flight lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// A served model behind the predictive contract, with a persistent
/// response cache.
pub struct RemoteModel {
    config: RemoteModelConfig,
    catalog: Arc<QuestionCatalog>,
    transport: Box<dyn Transport>,
    cache: Mutex<Cache>,
    calls: AtomicU64,
    in_flight: InFlight,
}

impl RemoteModel {
    pub fn new(config: RemoteModelConfig, catalog: Arc<QuestionCatalog>) -> Result<Self> {
        let t = HttpTransport::new(config.endpoint.clone(), Duration::from_millis(config.timeout_ms));
        Self::with_transport(config, catalog, Box::new(t))
    }

    pub fn with_transport(
        config: RemoteModelConfig,
        catalog: Arc<QuestionCatalog>,
        transport: Box<dyn Transport>,
    ) -> Result<Self> {
        config.validate(&catalog)?;
        let mut entries = HashMap::new();
        let file = match &config.cache_path {
            None => None,
            Some(path) => {
                if path.exists() {
                    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                        let line = line?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let c: CacheLine = serde_json::from_str(&line).map_err(|e| {
                            Error::Dataset(format!("{}:{}: bad cache line: {e}", path.display(), i + 1))
                        })?;
                        entries.insert(c.key, Distribution::categorical(c.probs));
                    }
                } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(path)?)
            }
        };
        let max = config.max_in_flight;
        Ok(Self {
            config,
            catalog,
            transport,
            cache: Mutex::new(Cache { entries, file }),
            calls: AtomicU64::new(0),
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
                max,
            },
        })
    }

    pub fn config(&self) -> &RemoteModelConfig {
        &self.config
    }

    /// Requests sent to the transport, retries included.
    pub fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().expect("cache lock").entries.len()
    }
}

struct Counting<'a> {
    inner: &'a dyn Transport,
    calls: &'a AtomicU64,
}

impl Transport for Counting<'_> {
    fn request(&self, req: &LogprobRequest) -> std::result::Result<LogprobResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.request(req)
    }
}

impl PredictiveModel for RemoteModel {
    fn catalog(&self) -> &QuestionCatalog {
        &self.catalog
    }

    fn predictive(&self, history: &History, question: &QuestionId) -> Result<Distribution> {
        let key = cache_key(&self.config.template, history, question);
        if let Some(d) = self.cache.lock().expect("cache lock").entries.get(&key) {
            return Ok(d.clone());
        }
        let (req, labels) = request_for(&self.config, &self.catalog, history, question)?;
        let d = {
            let _slot = self.in_flight.acquire();
            let t = Counting {
                inner: self.transport.as_ref(),
                calls: &self.calls,
            };
            fetch(&t, &self.config, &labels, &req)?
        };
        let mut cache = self.cache.lock().expect("cache lock");
        if let Some(existing) = cache.entries.get(&key) {
            // a concurrent request got there first
            return Ok(existing.clone());
        }
        if let Some(f) = cache.file.as_mut() {
            let line = serde_json::to_string(&CacheLine {
                key: key.clone(),
                probs: d.probs.clone(),
            })?;
            writeln!(f, "{line}")?;
        }
        cache.entries.insert(key, d.clone());
        Ok(d)
    }
}

/// Routes every call through a shared model handle and counts them. With
/// [`ModelGateway::new`] each trait method forwards to the inner model;
/// [`ModelGateway::predictive_only`] exposes just the one-step conditional,
/// as a remote server would, so joints come from the chain rule.
pub struct ModelGateway {
    inner: Arc<dyn PredictiveModel>,
    forward_all: bool,
    calls: AtomicU64,
}

impl ModelGateway {
    pub fn new(inner: Arc<dyn PredictiveModel>) -> Self {
        Self {
            inner,
            forward_all: true,
            calls: AtomicU64::new(0),
        }
    }

    pub fn predictive_only(inner: Arc<dyn PredictiveModel>) -> Self {
        Self {
            inner,
            forward_all: false,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl PredictiveModel for ModelGateway {
    fn catalog(&self) -> &QuestionCatalog {
        self.inner.catalog()
    }

    fn predictive(&self, history: &History, question: &QuestionId) -> Result<Distribution> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predictive(history, question)
    }

    fn support_cap(&self) -> usize {
        self.inner.support_cap()
    }

    fn joint(&self, history: &History, questions: &[QuestionId]) -> Result<Distribution> {
        if self.forward_all {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.joint(history, questions)
        } else {
            crate::model::chain_rule_joint(self, history, questions)
        }
    }

    fn target_entropy(&self, history: &History, targets: &TargetSet) -> Result<f64> {
        if self.forward_all {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.target_entropy(history, targets)
        } else {
            Ok(crate::entropy::entropy(&self.joint(history, targets.questions())?))
        }
    }

    fn candidate_eigs(&self, history: &History, targets: &TargetSet, candidates: &[QuestionId]) -> Result<Vec<f64>> {
        if self.forward_all {
            self.calls.fetch_add(1, Ordering::Relaxed);
            self.inner.candidate_eigs(history, targets, candidates)
        } else {
            candidates
                .iter()
                .map(|c| crate::info_gain::expected_information_gain(self, history, targets, c).map(|e| e.value))
                .collect()
        }
    }
}

/// Largest pairwise total-variation distance between the predictives under
/// `n_perms` orderings of the history (the first is the given order).
pub fn permutation_probe<M: PredictiveModel + ?Sized>(
    model: &M,
    history: &History,
    question: &QuestionId,
    n_perms: usize,
    seed: u64,
) -> Result<f64> {
    if history.len() < 2 || n_perms < 2 {
        model.predictive(history, question)?;
        return Ok(0.0);
    }
    let mut r = rng::rng(seed);
    let mut dists = vec![model.predictive(history, question)?];
    let mut order: Vec<usize> = (0..history.len()).collect();
    for _ in 1..n_perms {
        order.shuffle(&mut r);
        dists.push(model.predictive(&history.permuted(&order), question)?);
    }
    let mut max: f64 = 0.0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            max = max.max(dists[i].total_variation(&dists[j]));
        }
    }
    Ok(max)
}
