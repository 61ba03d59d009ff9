//! Restored-text + question prompting against a text-model endpoint.
//!
//! Prompts come from editable text templates. A batch runs with a fixed
//! number of worker threads (the in-flight bound) feeding a single writer
//! that appends predictions JSONL as results arrive, so an interrupted run
//! resumes by skipping qa_ids already written.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::annotation::FactBase;
use crate::eval::Prediction;
use crate::qa::QaItem;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("{qa_id}: context id {id:?} not in the fact base")]
    UnknownContext { qa_id: String, id: String },
    #[error("{qa_id}: no restored document for image {image_id:?}")]
    MissingDocument { qa_id: String, image_id: String },
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_base_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts count from 1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Full URL requests are POSTed to.
    pub base_url: String,
    /// Environment variable holding the bearer token; no auth header if unset.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub model: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Where the answer sits in the response body: a JSON pointer
    /// (`/choices/0/message/content`) or a dotted path (`choices.0.message.content`).
    #[serde(default = "default_field")]
    pub response_field: String,
}

fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> f64 {
    60.0
}
fn default_field() -> String {
    "text".into()
}

impl EndpointConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self, BaselineError> {
        let cfg: EndpointConfig = serde_json::from_slice(bytes).map_err(|e| BaselineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.max_in_flight == 0 {
            return Err(BaselineError::Config("max_in_flight must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(BaselineError::Config("timeout_secs must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BaselineError::Config("retry.max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub qa_id: String,
    pub prompt: String,
    /// Name of the template used (`plain` or `context`).
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub plain: String,
    pub context: String,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        PromptTemplates {
            plain: include_str!("../templates/plain.txt").to_string(),
            context: include_str!("../templates/context.txt").to_string(),
        }
    }

    /// Reads `plain.txt` and `context.txt` from `dir`, falling back to the
    /// built-in text for either file that is absent.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let builtin = Self::builtin();
        let read = |name: &str, fallback: String| match fs::read_to_string(dir.join(name)) {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(fallback),
            Err(e) => Err(e),
        };
        Ok(PromptTemplates { plain: read("plain.txt", builtin.plain)?, context: read("context.txt", builtin.context)? })
    }
}

/// Single-pass `{name}` substitution; unknown placeholders stay verbatim and
/// substituted text is never rescanned.
fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').and_then(|close| {
            let name = &after[..close];
            slots.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        }) {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Fills the template for one item. Items with context ids get the
/// `context` template listing each gold fact and, for multiple-choice
/// items, the facts behind the distracting options too.
pub fn build_prompt(
    restored: &str,
    qa: &QaItem,
    facts: &FactBase,
    templates: &PromptTemplates,
) -> Result<PromptRecord, BaselineError> {
    let options = match &qa.options {
        Some(opts) => {
            let mut s = String::from("Options:\n");
            for (label, o) in ('A'..).zip(opts) {
                s.push_str(&format!("{label}. {o}\n"));
            }
            s
        }
        None => String::new(),
    };
    if qa.context_ids.is_empty() {
        let prompt = render(&templates.plain, &[("document", restored), ("question", &qa.question), ("options", &options)]);
        return Ok(PromptRecord { qa_id: qa.qa_id.clone(), prompt, template: "plain".into() });
    }

    let gold = qa
        .context_ids
        .iter()
        .map(|id| facts.get(id).ok_or_else(|| BaselineError::UnknownContext { qa_id: qa.qa_id.clone(), id: id.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    // Option order first so the gold fact's position gives nothing away.
    let mut shown: Vec<_> =
        qa.options.iter().flatten().filter_map(|t| facts.facts().iter().find(|f| &f.title == t)).collect();
    for f in gold {
        if !shown.iter().any(|s| s.id == f.id) {
            shown.push(f);
        }
    }
    let context: Vec<String> = shown.iter().map(|f| format!("- {}: {}", f.title, f.description)).collect();
    let prompt = render(
        &templates.context,
        &[("document", restored), ("context", &context.join("\n")), ("question", &qa.question), ("options", &options)],
    );
    Ok(PromptRecord { qa_id: qa.qa_id.clone(), prompt, template: "context".into() })
}

/// Prompts for every bank item; `docs` maps image id to restored text.
pub fn build_prompts(
    bank: &[QaItem],
    docs: &HashMap<String, String>,
    facts: &FactBase,
    templates: &PromptTemplates,
) -> Result<Vec<PromptRecord>, BaselineError> {
    bank.iter()
        .map(|qa| {
            let doc = docs.get(&qa.image_id).ok_or_else(|| BaselineError::MissingDocument {
                qa_id: qa.qa_id.clone(),
                image_id: qa.image_id.clone(),
            })?;
            build_prompt(doc, qa, facts, templates)
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum EndpointError {
    /// Rejected credentials; the whole run stops.
    #[error("auth: {0}")]
    Auth(String),
    /// Worth retrying (timeouts, connection errors, 429, 5xx).
    #[error("transient: {0}")]
    Transient(String),
    /// Not worth retrying (other 4xx, malformed responses).
    #[error("rejected: {0}")]
    Rejected(String),
}

pub trait ChatEndpoint: Sync {
    fn complete(&self, prompt: &PromptRecord) -> Result<String, EndpointError>;
}

/// Minimal chat wire shape: `{"model", "messages": [{"role", "content"}]}`
/// with the qa_id in an `X-Request-Id` header.
pub struct HttpEndpoint {
    config: EndpointConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    /// Reads the token from `config.auth_env`; a named but unset variable is
    /// a config error.
    pub fn new(config: EndpointConfig) -> Result<Self, BaselineError> {
        config.validate()?;
        let token = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BaselineError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpEndpoint { config, token, agent })
    }

    fn extract(&self, body: &serde_json::Value) -> Option<String> {
        let field = &self.config.response_field;
        let pointer = if field.starts_with('/') {
            field.clone()
        } else {
            format!("/{}", field.replace('.', "/"))
        };
        body.pointer(&pointer).and_then(|v| v.as_str()).map(String::from)
    }
}

impl ChatEndpoint for HttpEndpoint {
    fn complete(&self, prompt: &PromptRecord) -> Result<String, EndpointError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt.prompt}],
        });
        let mut req = self.agent.post(&self.config.base_url).header("X-Request-Id", &prompt.qa_id);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| EndpointError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        match status {
            401 | 403 => return Err(EndpointError::Auth(format!("HTTP {status}"))),
            429 | 500..=599 => return Err(EndpointError::Transient(format!("HTTP {status}"))),
            400..=499 => return Err(EndpointError::Rejected(format!("HTTP {status}"))),
            _ => {}
        }
        let json: serde_json::Value =
            resp.body_mut().read_json().map_err(|e| EndpointError::Transient(e.to_string()))?;
        self.extract(&json)
            .ok_or_else(|| EndpointError::Rejected(format!("response has no {:?} field", self.config.response_field)))
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Stop after this many new predictions (used to exercise resumption).
    pub limit: Option<usize>,
}

impl From<&EndpointConfig> for BatchOptions {
    fn from(c: &EndpointConfig) -> Self {
        BatchOptions { max_in_flight: c.max_in_flight, retry: c.retry.clone(), limit: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchSummary {
    /// Already present in the output before this run.
    pub skipped: usize,
    pub written: usize,
    /// qa_id → error message for items written with empty text.
    pub failures: BTreeMap<String, String>,
    /// qa_id → attempts made in this run.
    pub attempts: BTreeMap<String, u32>,
}

/// Completed predictions in `path`. A torn final line (interrupted write)
/// is dropped and the file truncated to its last complete record.
fn load_existing(path: &Path) -> std::io::Result<HashSet<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashSet::new()),
        Err(e) => return Err(e),
    };
    let mut done = HashSet::new();
    let mut keep = 0;
    for line in text.split_inclusive('\n') {
        if !line.ends_with('\n') {
            break;
        }
        match serde_json::from_str::<Prediction>(line) {
            Ok(p) => {
                done.insert(p.qa_id);
                keep += line.len();
            }
            Err(_) => break,
        }
    }
    if keep < text.len() {
        log::warn!("{}: dropping {} trailing bytes of a partial record", path.display(), text.len() - keep);
        OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
    }
    Ok(done)
}

enum Outcome {
    Done { qa_id: String, text: String, attempts: u32, error: Option<String> },
    AuthFailed(String),
}

fn attempt_item(endpoint: &dyn ChatEndpoint, p: &PromptRecord, retry: &RetryPolicy) -> Outcome {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match endpoint.complete(p) {
            Ok(text) => return Outcome::Done { qa_id: p.qa_id.clone(), text, attempts: attempt, error: None },
            Err(EndpointError::Auth(m)) => return Outcome::AuthFailed(m),
            Err(EndpointError::Transient(m)) if attempt < retry.max_attempts => {
                log::debug!("{}: attempt {attempt} failed: {m}", p.qa_id);
                std::thread::sleep(retry.backoff(attempt));
            }
            Err(e) => {
                return Outcome::Done { qa_id: p.qa_id.clone(), text: String::new(), attempts: attempt, error: Some(e.to_string()) }
            }
        }
    }
}

/// Sends every prompt not already answered in `out`, appending one
/// prediction line per completed item. Items failing after retries are
/// written with empty text; an auth failure stops the run with an error
/// after flushing what has completed.
pub fn run_batch(
    prompts: &[PromptRecord],
    endpoint: &dyn ChatEndpoint,
    opts: &BatchOptions,
    out: &Path,
) -> Result<BatchSummary, BaselineError> {
    let done = load_existing(out)?;
    let pending: Vec<&PromptRecord> = prompts.iter().filter(|p| !done.contains(&p.qa_id)).collect();
    let pending = match opts.limit {
        Some(k) => &pending[..k.min(pending.len())],
        None => &pending[..],
    };
    let mut summary =
        BatchSummary { skipped: prompts.len() - prompts.iter().filter(|p| !done.contains(&p.qa_id)).count(), ..Default::default() };

    let mut writer = BufWriter::new(OpenOptions::new().create(true).append(true).open(out)?);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = opts.max_in_flight.max(1).min(pending.len().max(1));
    let retry = &opts.retry;

    let mut auth_error = None;
    std::thread::scope(|scope| -> Result<(), BaselineError> {
        let (tx, rx) = mpsc::channel();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort) = (&next, &abort);
            scope.spawn(move || {
                while !abort.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(p) = pending.get(i) else { break };
                    let outcome = attempt_item(endpoint, p, retry);
                    if matches!(outcome, Outcome::AuthFailed(_)) {
                        abort.store(true, Ordering::Relaxed);
                    }
                    if tx.send(outcome).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for outcome in rx {
            match outcome {
                Outcome::Done { qa_id, text, attempts, error } => {
                    if let Some(e) = error {
                        log::error!("{qa_id}: giving up after {attempts} attempt(s): {e}");
                        summary.failures.insert(qa_id.clone(), e);
                    }
                    serde_json::to_writer(&mut writer, &Prediction { qa_id: qa_id.clone(), text })
                        .map_err(std::io::Error::from)?;
                    writer.write_all(b"\n")?;
                    writer.flush()?;
                    summary.attempts.insert(qa_id, attempts);
                    summary.written += 1;
                }
                Outcome::AuthFailed(m) => {
                    auth_error.get_or_insert(m);
                }
            }
        }
        Ok(())
    })?;
    match auth_error {
        Some(m) => Err(BaselineError::Auth(m)),
        None => Ok(summary),
    }
}

/// Reads predictions JSONL written by [`run_batch`].
pub fn read_predictions_file(path: &Path) -> Result<Vec<Prediction>, BaselineError> {
    let text = fs::read_to_string(path)?;
    crate::eval::read_predictions(&text).map_err(|e| BaselineError::Config(e.to_string()))
}

/// Writes prompt records (dry run) as JSONL.
pub fn write_prompts(prompts: &[PromptRecord], path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in prompts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
