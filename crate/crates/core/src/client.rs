//! Chat-completion client.
//!
//! A [`Client`] fronts one [`ChatBackend`] (live HTTP or a scripted mock)
//! with a content-addressed response cache, bounded transport retries and a
//! limit on in-flight requests.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::domain::{Decoding, EndpointConfig, Role};
use crate::prompts::{PromptText, TemplateId};

pub const DEFAULT_MAX_RETRIES: u32 = 2;
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("request to {model} timed out")]
    Timeout { model: String },
    #[error("transport error talking to {model}: {message}")]
    Transport { model: String, message: String },
    #[error("{model} answered with HTTP status {code}")]
    HttpStatus { model: String, code: u16 },
    #[error("malformed completion response from {model}: {message}")]
    MalformedResponse { model: String, message: String },
    #[error("environment variable `{0}` holding the API key is not set")]
    MissingApiKey(String),
    #[error(
        "no mock rule matches {role}/{template}/{question_id} (reask {reask}, attempt {attempt})"
    )]
    NoMatchingRule {
        role: Role,
        template: TemplateId,
        question_id: String,
        reask: u32,
        attempt: u32,
    },
    #[error("response cache error: {0}")]
    Cache(String),
}

impl ClientError {
    /// Transport-level failures are retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Timeout { .. }
            | ClientError::Transport { .. }
            | ClientError::MalformedResponse { .. } => true,
            ClientError::HttpStatus { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// One call to one endpoint.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub endpoint: &'a EndpointConfig,
    pub prompt: &'a PromptText,
    pub question_id: &'a str,
    pub reask: u32,
    /// 1-based transport attempt, set by the client.
    pub attempt: u32,
}

impl<'a> CompletionRequest<'a> {
    pub fn new(endpoint: &'a EndpointConfig, prompt: &'a PromptText, question_id: &'a str) -> Self {
        Self {
            endpoint,
            prompt,
            question_id,
            reask: 0,
            attempt: 1,
        }
    }

    pub fn with_reask(mut self, reask: u32) -> Self {
        self.reask = reask;
        self
    }

    pub fn cache_key(&self) -> String {
        cache_key(
            &self.endpoint.model_id,
            self.prompt.template_id,
            &self.prompt.slot_digest,
            &self.endpoint.decoding,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseSource {
    Live,
    Mock,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    /// Assistant message content only.
    pub text: String,
    pub latency: Duration,
    pub source: ResponseSource,
}

/// Stable digest addressing one cached completion.
///
/// Covers everything that influences the model output: model, template,
/// substituted slots, temperature and token budget. The timeout does not
/// change what a model says and is left out.
pub fn cache_key(
    model_id: &str,
    template_id: TemplateId,
    slot_digest: &str,
    decoding: &Decoding,
) -> String {
    let mut h = Sha256::new();
    h.update(b"cure-cache-v1");
    for part in [model_id, &format!("{template_id:?}"), slot_digest] {
        h.update((part.len() as u64).to_be_bytes());
        h.update(part.as_bytes());
    }
    h.update(decoding.temperature.to_bits().to_be_bytes());
    h.update(decoding.max_tokens.to_be_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub text: String,
    pub timestamp: String,
    pub model_id: String,
}

/// Key/value store of completions, optionally backed by a directory.
///
/// On disk each entry is `<dir>/<key[..2]>/<key>.json`, written through a
/// temporary file and renamed into place.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<String, CachedResponse>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| ClientError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: Some(dir),
            mem: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path_for(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2.min(key.len())])
            .join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CachedResponse> {
        if let Some(hit) = self.mem.read().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let dir = self.dir.as_ref()?;
        let raw = fs::read(Self::path_for(dir, key)).ok()?;
        let entry: CachedResponse = serde_json::from_slice(&raw).ok()?;
        self.mem
            .write()
            .expect("cache lock")
            .insert(key.to_string(), entry.clone());
        Some(entry)
    }

    pub fn put(&self, key: &str, entry: CachedResponse) -> Result<(), ClientError> {
        if let Some(dir) = &self.dir {
            let path = Self::path_for(dir, key);
            let parent = path.parent().expect("cache path has a parent");
            let io = |e: std::io::Error| ClientError::Cache(format!("{}: {e}", path.display()));
            fs::create_dir_all(parent).map_err(io)?;
            let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io)?;
            serde_json::to_writer(&mut tmp, &entry)
                .map_err(|e| ClientError::Cache(e.to_string()))?;
            tmp.flush().map_err(io)?;
            tmp.persist(&path).map_err(|e| io(e.error))?;
        }
        self.mem
            .write()
            .expect("cache lock")
            .insert(key.to_string(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            None => self.mem.read().expect("cache lock").len(),
            Some(dir) => walk_json_files(dir),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json_files(dir: &Path) -> usize {
    let Ok(entries) = fs::read_dir(dir) else {
        return 0;
    };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json_files(&p)
            } else {
                usize::from(p.extension().is_some_and(|x| x == "json"))
            }
        })
        .sum()
}

/// Something that can turn a request into assistant text.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn send(&self, req: &CompletionRequest<'_>) -> Result<String, ClientError>;

    fn source(&self) -> ResponseSource;
}

/// OpenAI-style `POST {base_url}/chat/completions`.
#[derive(Debug, Clone, Default)]
pub struct HttpBackend {
    http: reqwest::Client,
}

impl HttpBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request_body(req: &CompletionRequest<'_>) -> Value {
        json!({
            "model": req.endpoint.model_id,
            "messages": [{"role": "user", "content": req.prompt.body}],
            "temperature": req.endpoint.decoding.temperature,
            "max_tokens": req.endpoint.decoding.max_tokens,
        })
    }

    pub fn extract_content(body: &Value) -> Option<&str> {
        body.get("choices")?
            .get(0)?
            .get("message")?
            .get("content")?
            .as_str()
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn send(&self, req: &CompletionRequest<'_>) -> Result<String, ClientError> {
        let ep = req.endpoint;
        let model = || ep.model_id.clone();
        let url = format!(
            "{}/chat/completions",
            ep.base_url.as_str().trim_end_matches('/')
        );

        let mut builder = self
            .http
            .post(&url)
            .timeout(ep.decoding.timeout)
            .json(&Self::request_body(req));
        if let Some(var) = &ep.api_key_ref {
            let key = std::env::var(var).map_err(|_| ClientError::MissingApiKey(var.clone()))?;
            builder = builder.bearer_auth(key);
        }

        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                ClientError::Timeout { model: model() }
            } else {
                ClientError::Transport {
                    model: model(),
                    message: e.to_string(),
                }
            }
        };
        let resp = builder.send().await.map_err(classify)?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ClientError::HttpStatus {
                model: model(),
                code: status.as_u16(),
            });
        }
        let body: Value = resp.json().await.map_err(|e| {
            if e.is_timeout() {
                ClientError::Timeout { model: model() }
            } else {
                ClientError::MalformedResponse {
                    model: model(),
                    message: e.to_string(),
                }
            }
        })?;
        Self::extract_content(&body)
            .map(str::to_string)
            .ok_or_else(|| ClientError::MalformedResponse {
                model: model(),
                message: "no choices[0].message.content".into(),
            })
    }

    fn source(&self) -> ResponseSource {
        ResponseSource::Live
    }
}

/// Which requests a mock rule applies to. Absent fields match anything.
///
/// `question_id` may end in `*` to match by prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<TemplateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reask: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
}

impl Matcher {
    pub fn role(role: Role) -> Self {
        Self {
            role: Some(role),
            ..Self::default()
        }
    }

    pub fn template(mut self, t: TemplateId) -> Self {
        self.template = Some(t);
        self
    }

    pub fn question(mut self, id: impl Into<String>) -> Self {
        self.question_id = Some(id.into());
        self
    }

    pub fn reask(mut self, n: u32) -> Self {
        self.reask = Some(n);
        self
    }

    pub fn attempt(mut self, n: u32) -> Self {
        self.attempt = Some(n);
        self
    }

    pub fn matches(&self, req: &CompletionRequest<'_>) -> bool {
        self.role.is_none_or(|r| r == req.endpoint.role)
            && self.template.is_none_or(|t| t == req.prompt.template_id)
            && self.reask.is_none_or(|n| n == req.reask)
            && self.attempt.is_none_or(|n| n == req.attempt)
            && self
                .question_id
                .as_deref()
                .is_none_or(|q| match q.strip_suffix('*') {
                    Some(prefix) => req.question_id.starts_with(prefix),
                    None => q == req.question_id,
                })
    }

    fn exact_question(&self) -> Option<&str> {
        self.question_id.as_deref().filter(|q| !q.ends_with('*'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailKind {
    Timeout,
    Transport,
    Http(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockResponse {
    Text(String),
    /// Chooses one entry per request from a hash of the seed and the
    /// request identity, so the choice does not depend on call order.
    Pick {
        choices: Vec<String>,
        seed: u64,
    },
    Fail(FailKind),
}

impl MockResponse {
    pub fn text(s: impl Into<String>) -> Self {
        MockResponse::Text(s.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub when: Matcher,
    pub respond: MockResponse,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl MockRule {
    pub fn new(when: Matcher, respond: MockResponse) -> Self {
        Self {
            when,
            respond,
            delay_ms: None,
        }
    }

    pub fn delayed(mut self, ms: u64) -> Self {
        self.delay_ms = Some(ms);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("cannot read mock script {path}: {message}")]
    Io { path: String, message: String },
    #[error("mock script is not valid JSON: {0}")]
    Json(String),
    #[error("mock script has no rules")]
    Empty,
    #[error("rule {0} picks from an empty list")]
    EmptyPick(usize),
}

/// Ordered response rules; the first rule that matches a request wins.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    pub rules: Vec<MockRule>,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    pub fn push(&mut self, when: Matcher, respond: MockResponse) -> &mut Self {
        self.rules.push(MockRule::new(when, respond));
        self
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        if self.rules.is_empty() {
            return Err(ScriptError::Empty);
        }
        for (i, r) in self.rules.iter().enumerate() {
            if matches!(&r.respond, MockResponse::Pick { choices, .. } if choices.is_empty()) {
                return Err(ScriptError::EmptyPick(i));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ScriptError> {
        let script: MockScript =
            serde_json::from_str(s).map_err(|e| ScriptError::Json(e.to_string()))?;
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let raw = fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&raw)
    }
}

/// Replays a [`MockScript`]; never touches the network.
#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    by_question: HashMap<String, Vec<usize>>,
    general: Vec<usize>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        let mut by_question: HashMap<String, Vec<usize>> = HashMap::new();
        let mut general = Vec::new();
        for (i, rule) in script.rules.iter().enumerate() {
            match rule.when.exact_question() {
                Some(q) => by_question.entry(q.to_string()).or_default().push(i),
                None => general.push(i),
            }
        }
        Self {
            script,
            by_question,
            general,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn find_rule(&self, req: &CompletionRequest<'_>) -> Option<&MockRule> {
        let specific = self
            .by_question
            .get(req.question_id)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let first = |ids: &[usize]| {
            ids.iter()
                .copied()
                .find(|&i| self.script.rules[i].when.matches(req))
        };
        match (first(specific), first(&self.general)) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
        .map(|i| &self.script.rules[i])
    }
}

fn pick_index(seed: u64, req: &CompletionRequest<'_>, len: usize) -> usize {
    let mut h = Sha256::new();
    h.update(seed.to_be_bytes());
    h.update(req.endpoint.role.name().as_bytes());
    h.update([0]);
    h.update(format!("{:?}", req.prompt.template_id).as_bytes());
    h.update([0]);
    h.update(req.question_id.as_bytes());
    h.update(req.reask.to_be_bytes());
    let d = h.finalize();
    let n = u64::from_be_bytes(d[..8].try_into().expect("8 bytes"));
    (n % len as u64) as usize
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn send(&self, req: &CompletionRequest<'_>) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let model = req.endpoint.model_id.clone();
        let rule = self
            .find_rule(req)
            .ok_or_else(|| ClientError::NoMatchingRule {
                role: req.endpoint.role,
                template: req.prompt.template_id,
                question_id: req.question_id.to_string(),
                reask: req.reask,
                attempt: req.attempt,
            })?;
        if let Some(ms) = rule.delay_ms {
            let sleep = tokio::time::sleep(Duration::from_millis(ms));
            if tokio::time::timeout(req.endpoint.decoding.timeout, sleep)
                .await
                .is_err()
            {
                return Err(ClientError::Timeout { model });
            }
        }
        match &rule.respond {
            MockResponse::Text(t) => Ok(t.clone()),
            MockResponse::Pick { choices, seed } => {
                Ok(choices[pick_index(*seed, req, choices.len())].clone())
            }
            MockResponse::Fail(FailKind::Timeout) => Err(ClientError::Timeout { model }),
            MockResponse::Fail(FailKind::Transport) => Err(ClientError::Transport {
                model,
                message: "scripted transport failure".into(),
            }),
            MockResponse::Fail(FailKind::Http(code)) => {
                Err(ClientError::HttpStatus { model, code: *code })
            }
        }
    }

    fn source(&self) -> ResponseSource {
        ResponseSource::Mock
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub max_retries: u32,
    pub concurrency: usize,
    /// Sleep between transport retries, multiplied by the attempt number.
    pub retry_backoff: Duration,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            concurrency: DEFAULT_CONCURRENCY,
            retry_backoff: Duration::ZERO,
        }
    }
}

/// Caching, retrying front over a backend. Cheap to share behind an `Arc`.
pub struct Client {
    backend: Arc<dyn ChatBackend>,
    cache: Option<Arc<ResponseCache>>,
    limit: Semaphore,
    opts: ClientOptions,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl std::fmt::Debug for Client {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("source", &self.backend.source())
            .field(
                "cache",
                &self.cache.as_ref().map(|c| c.dir().map(Path::to_path_buf)),
            )
            .field("opts", &self.opts)
            .finish()
    }
}

impl Client {
    pub fn new(backend: Arc<dyn ChatBackend>, opts: ClientOptions) -> Self {
        Self {
            backend,
            cache: None,
            limit: Semaphore::new(opts.concurrency.max(1)),
            opts,
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::new(Arc::new(MockBackend::new(script)), ClientOptions::default())
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn options(&self) -> &ClientOptions {
        &self.opts
    }

    /// Requests that reached the backend, retries included.
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub async fn complete(&self, req: &CompletionRequest<'_>) -> Result<RawResponse, ClientError> {
        let started = Instant::now();
        let key = req.cache_key();
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(RawResponse {
                text: hit.text,
                latency: started.elapsed(),
                source: ResponseSource::Cache,
            });
        }

        let mut attempt_req = *req;
        let mut attempt = 1;
        loop {
            attempt_req.attempt = attempt;
            let result = {
                let _permit = self.limit.acquire().await.expect("semaphore never closed");
                self.backend_calls.fetch_add(1, Ordering::Relaxed);
                self.backend.send(&attempt_req).await
            };
            match result {
                Ok(text) => {
                    if let Some(cache) = &self.cache {
                        cache.put(
                            &key,
                            CachedResponse {
                                text: text.clone(),
                                timestamp: chrono::Utc::now().to_rfc3339(),
                                model_id: req.endpoint.model_id.clone(),
                            },
                        )?;
                    }
                    return Ok(RawResponse {
                        text,
                        latency: started.elapsed(),
                        source: self.backend.source(),
                    });
                }
                Err(e) if e.is_retryable() && attempt <= self.opts.max_retries => {
                    tracing::debug!(error = %e, attempt, "retrying request");
                    if !self.opts.retry_backoff.is_zero() {
                        tokio::time::sleep(self.opts.retry_backoff * attempt).await;
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
