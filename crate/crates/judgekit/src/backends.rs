//! Pluggable judge backends.
//!
//! Everything behind one contract: prompt text in, judge text out, with a
//! three-way error taxonomy (`Transient`, `Permanent`, `Exhausted`). Three
//! implementations ship:
//!
//! - [`MockJudge`]: deterministic test double scoring by content hash, with
//!   optional position/verbosity bias knobs for probe calibration
//! - [`ScriptedJudge`]: replays fixture files keyed by
//!   (sample, sub-aspect, mode, response index)
//! - [`RemoteJudge`]: client for an external generation service with
//!   timeouts, exponential backoff, and an in-flight cap

use crate::hash::{stable_hash, unit_fraction};
use crate::jsonl;
use crate::orchestrator::EvalMode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// Identifies which subtask a request serves; scripted backends key on this.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestKey {
    pub sample_id: String,
    pub sub_aspect: String,
    pub mode: EvalMode,
    /// Set in single mode, where each response is judged in its own call.
    pub response_index: Option<usize>,
}

impl fmt::Display for RequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.sample_id, self.sub_aspect, self.mode)?;
        if let Some(idx) = self.response_index {
            write!(f, "/r{idx}")?;
        }
        Ok(())
    }
}

/// One generation request. Decoding is greedy (temperature 0) unless a
/// caller explicitly overrides it.
#[derive(Debug, Clone)]
pub struct JudgeRequest {
    pub prompt: String,
    pub key: RequestKey,
    pub decode_temperature: f64,
    pub max_output_tokens: u32,
}

impl JudgeRequest {
    pub fn new(prompt: String, key: RequestKey) -> Self {
        JudgeRequest {
            prompt,
            key,
            decode_temperature: 0.0,
            max_output_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Error)]
pub enum JudgeError {
    /// Worth retrying: timeouts, connection failures, 5xx.
    #[error("transient backend failure: {0}")]
    Transient(String),
    /// Retrying cannot help: 4xx, missing fixtures, bad configuration.
    #[error("permanent backend failure: {0}")]
    Permanent(String),
    /// Retries were exhausted; carries the last cause.
    #[error("backend retries exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

/// The judge contract shared by all backends. Implementations must be safe
/// for concurrent calls.
pub trait Judge: Send + Sync {
    /// Stable identifier echoed into evaluation bundles for audit.
    fn id(&self) -> String;

    fn complete(&self, req: &JudgeRequest) -> Result<String, JudgeError>;
}

// ---------------------------------------------------------------------------
// Mock judge
// ---------------------------------------------------------------------------

/// Deterministic judge for tests and probe calibration.
///
/// Scores are a pure function of (seed, sub-aspect, response text), so with
/// both bias knobs at zero the verdict is identical regardless of response
/// presentation order. The bias knobs make a deterministic per-pair decision
/// by hashing the unordered pair of response texts into a unit bucket — no
/// RNG draws at call time, so measured rates are exact up to hash bucketing.
#[derive(Debug, Clone)]
pub struct MockJudge {
    seed: u64,
    /// Fraction of pairs for which the verdict is forced to Response 1.
    position_bias_rate: f64,
    /// Fraction of pairs for which the verdict is forced to the longer
    /// response. Position bias takes precedence when both trigger.
    verbosity_bias_rate: f64,
}

impl MockJudge {
    pub fn new(seed: u64) -> Self {
        MockJudge {
            seed,
            position_bias_rate: 0.0,
            verbosity_bias_rate: 0.0,
        }
    }

    pub fn with_position_bias(mut self, rate: f64) -> Self {
        self.position_bias_rate = rate;
        self
    }

    pub fn with_verbosity_bias(mut self, rate: f64) -> Self {
        self.verbosity_bias_rate = rate;
        self
    }

    fn content_score(&self, sub_aspect: &str, response: &str) -> i32 {
        (stable_hash(self.seed, &["score", sub_aspect, response]) % 6) as i32
    }

    fn rationale(&self, sub_aspect: &str, response: &str) -> String {
        let tag = stable_hash(self.seed, &["tag", sub_aspect, response]) % 997;
        format!("Mock assessment on criterion {sub_aspect} (content tag {tag:03}).")
    }

    fn pair_bucket(&self, salt: &str, r1: &str, r2: &str) -> f64 {
        // Unordered key: the same pair gets the same decision in both
        // presentation orders.
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        unit_fraction(stable_hash(self.seed, &[salt, lo, hi]))
    }

    /// Forced (winner, loser) scores, strictly ordered, with hash variety.
    fn forced_scores(&self, sub_aspect: &str, winner: &str, loser: &str) -> (i32, i32) {
        let hi = 4 + (stable_hash(self.seed, &["hi", sub_aspect, winner]) % 2) as i32;
        let lo = (stable_hash(self.seed, &["lo", sub_aspect, loser]) % 3) as i32;
        (hi, lo)
    }
}

impl Judge for MockJudge {
    fn id(&self) -> String {
        format!(
            "mock(seed={},pos={},verb={})",
            self.seed, self.position_bias_rate, self.verbosity_bias_rate
        )
    }

    fn complete(&self, req: &JudgeRequest) -> Result<String, JudgeError> {
        let sections = PromptSections::extract(&req.prompt);
        let sub = req.key.sub_aspect.as_str();
        match req.key.mode {
            EvalMode::Single => {
                let resp = sections
                    .single_response()
                    .unwrap_or_else(|| req.prompt.clone());
                let score = self.content_score(sub, &resp);
                Ok(format!(
                    "Analysis: {}\nScore: {}",
                    self.rationale(sub, &resp),
                    score
                ))
            }
            EvalMode::Pairwise => {
                let (r1, r2) = match (sections.response_1, sections.response_2) {
                    (Some(a), Some(b)) => (a, b),
                    // Non-canonical template: fall back to hashing the whole
                    // prompt. Still deterministic, but bias knobs and
                    // order-insensitivity only hold for canonical prompts.
                    _ => (req.prompt.clone(), req.prompt.clone()),
                };

                let position_forced = self.position_bias_rate > 0.0
                    && self.pair_bucket("position-bias", &r1, &r2) < self.position_bias_rate;
                let verbosity_forced = self.verbosity_bias_rate > 0.0
                    && r1.chars().count() != r2.chars().count()
                    && self.pair_bucket("verbosity-bias", &r1, &r2) < self.verbosity_bias_rate;

                let (s1, s2) = if position_forced {
                    self.forced_scores(sub, &r1, &r2)
                } else if verbosity_forced {
                    // forced_scores returns (winner, loser); map back to
                    // presentation order.
                    if r1.chars().count() > r2.chars().count() {
                        self.forced_scores(sub, &r1, &r2)
                    } else {
                        let (hi, lo) = self.forced_scores(sub, &r2, &r1);
                        (lo, hi)
                    }
                } else {
                    (self.content_score(sub, &r1), self.content_score(sub, &r2))
                };

                Ok(format!(
                    "Evaluation of Response 1:\nAnalysis: {}\nScore: {}\nEvaluation of Response 2:\nAnalysis: {}\nScore: {}",
                    self.rationale(sub, &r1),
                    s1,
                    self.rationale(sub, &r2),
                    s2
                ))
            }
        }
    }
}

/// Sections carved out of a canonical prompt by its header lines.
struct PromptSections {
    response: Option<String>,
    response_1: Option<String>,
    response_2: Option<String>,
}

impl PromptSections {
    const HEADERS: [&'static str; 6] = [
        "Question:",
        "Response 1:",
        "Response 2:",
        "Response:",
        "Reference Information:",
        "Output format:",
    ];

    fn extract(prompt: &str) -> PromptSections {
        let lines: Vec<&str> = prompt.lines().collect();
        let mut sections: BTreeMap<&str, String> = BTreeMap::new();
        let mut current: Option<(&str, Vec<&str>)> = None;
        for line in &lines {
            if let Some(header) = Self::HEADERS.iter().find(|h| line.trim() == **h) {
                if let Some((name, body)) = current.take() {
                    sections.insert(name, body.join("\n").trim().to_string());
                }
                current = Some((header, Vec::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push(line);
            }
        }
        if let Some((name, body)) = current.take() {
            sections.insert(name, body.join("\n").trim().to_string());
        }
        PromptSections {
            response: sections.get("Response:").cloned(),
            response_1: sections.get("Response 1:").cloned(),
            response_2: sections.get("Response 2:").cloned(),
        }
    }

    fn single_response(&self) -> Option<String> {
        self.response.clone().or_else(|| self.response_1.clone())
    }
}

// ---------------------------------------------------------------------------
// Scripted judge
// ---------------------------------------------------------------------------

/// One stored judge output in a fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub sample_id: String,
    pub sub_aspect: String,
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_index: Option<usize>,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum ScriptedLoadError {
    #[error("fixture file: {0}")]
    Read(#[from] jsonl::JsonlError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate fixture key {0}")]
    DuplicateKey(String),
}

#[derive(Debug, Error)]
#[error("missing fixture for key {0}")]
pub struct MissingFixture(pub String);

/// Replays stored judge texts exactly, keyed by request identity.
pub struct ScriptedJudge {
    fixtures: BTreeMap<RequestKey, String>,
    source: String,
}

impl ScriptedJudge {
    pub fn from_records(
        records: Vec<FixtureRecord>,
        source: &str,
    ) -> Result<ScriptedJudge, ScriptedLoadError> {
        let mut fixtures = BTreeMap::new();
        for rec in records {
            let key = RequestKey {
                sample_id: rec.sample_id,
                sub_aspect: rec.sub_aspect,
                mode: rec.mode,
                response_index: rec.response_index,
            };
            if fixtures.insert(key.clone(), rec.text).is_some() {
                return Err(ScriptedLoadError::DuplicateKey(key.to_string()));
            }
        }
        Ok(ScriptedJudge {
            fixtures,
            source: source.to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<ScriptedJudge, ScriptedLoadError> {
        let file = std::fs::File::open(path)?;
        let records = jsonl::read_all(std::io::BufReader::new(file))?;
        Self::from_records(records, &path.display().to_string())
    }

    /// Exact stored text for a key.
    pub fn fixture(&self, key: &RequestKey) -> Result<&str, MissingFixture> {
        self.fixtures
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| MissingFixture(key.to_string()))
    }
}

impl Judge for ScriptedJudge {
    fn id(&self) -> String {
        format!("scripted({})", self.source)
    }

    fn complete(&self, req: &JudgeRequest) -> Result<String, JudgeError> {
        self.fixture(&req.key)
            .map(str::to_string)
            .map_err(|e| JudgeError::Permanent(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Remote judge
// ---------------------------------------------------------------------------

/// Request/response shape spoken to the remote endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireFormat {
    /// `POST {prompt, temperature, max_tokens}` returning `{text}`.
    #[default]
    Minimal,
    /// Chat-completions shape: `{model, messages, temperature, max_tokens}`
    /// returning `{choices: [{message: {content}}]}`.
    ChatCompletions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token. Tokens are
    /// never stored in config files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub wire: WireFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_in_flight_cap")]
    pub in_flight_cap: usize,
}

fn default_timeout_secs() -> f64 {
    30.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    250
}
fn default_in_flight_cap() -> usize {
    4
}

#[derive(Debug, Error)]
pub enum BackendBuildError {
    #[error("invalid backend config: {0}")]
    Invalid(String),
    #[error("scripted backend: {0}")]
    Scripted(#[from] ScriptedLoadError),
    #[error("http client: {0}")]
    Http(String),
}

/// Blocking client for a chat-completion-style generation service.
pub struct RemoteJudge {
    cfg: RemoteConfig,
    client: reqwest::blocking::Client,
    gate: Semaphore,
}

impl RemoteJudge {
    pub fn new(cfg: RemoteConfig) -> Result<RemoteJudge, BackendBuildError> {
        if cfg.timeout_secs <= 0.0 {
            return Err(BackendBuildError::Invalid("timeout_secs must be > 0".into()));
        }
        if cfg.in_flight_cap == 0 {
            return Err(BackendBuildError::Invalid("in_flight_cap must be >= 1".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendBuildError::Http(e.to_string()))?;
        let gate = Semaphore::new(cfg.in_flight_cap);
        Ok(RemoteJudge { cfg, client, gate })
    }

    fn request_body(&self, req: &JudgeRequest) -> serde_json::Value {
        match self.cfg.wire {
            WireFormat::Minimal => serde_json::json!({
                "prompt": req.prompt,
                "temperature": req.decode_temperature,
                "max_tokens": req.max_output_tokens,
            }),
            WireFormat::ChatCompletions => serde_json::json!({
                "model": self.cfg.model.clone().unwrap_or_default(),
                "messages": [{"role": "user", "content": req.prompt}],
                "temperature": req.decode_temperature,
                "max_tokens": req.max_output_tokens,
            }),
        }
    }

    fn extract_text(&self, body: &serde_json::Value) -> Option<String> {
        match self.cfg.wire {
            WireFormat::Minimal => body.get("text")?.as_str().map(str::to_string),
            WireFormat::ChatCompletions => body
                .get("choices")?
                .get(0)?
                .get("message")?
                .get("content")?
                .as_str()
                .map(str::to_string),
        }
    }

    fn auth_token(&self) -> Result<Option<String>, JudgeError> {
        match &self.cfg.auth_token_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                JudgeError::Permanent(format!("auth token env var {var} not set"))
            }),
        }
    }

    /// One HTTP round trip, classified into the error taxonomy.
    fn attempt(&self, req: &JudgeRequest, token: Option<&str>) -> Result<String, JudgeError> {
        let mut http = self.client.post(&self.cfg.endpoint).json(&self.request_body(req));
        if let Some(token) = token {
            http = http.bearer_auth(token);
        }
        let response = http.send().map_err(|e| {
            JudgeError::Transient(if e.is_timeout() {
                format!("timeout after {}s", self.cfg.timeout_secs)
            } else {
                format!("request failed: {e}")
            })
        })?;
        let status = response.status();
        if status.is_client_error() {
            return Err(JudgeError::Permanent(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(JudgeError::Transient(format!("http status {status}")));
        }
        let body: serde_json::Value = response
            .json()
            .map_err(|e| JudgeError::Permanent(format!("malformed response body: {e}")))?;
        self.extract_text(&body)
            .ok_or_else(|| JudgeError::Permanent("response missing completion text".into()))
    }
}

impl Judge for RemoteJudge {
    fn id(&self) -> String {
        format!("remote({})", self.cfg.endpoint)
    }

    fn complete(&self, req: &JudgeRequest) -> Result<String, JudgeError> {
        let _permit = self.gate.acquire();
        let token = self.auth_token()?;
        let mut last = String::new();
        // At most max_retries + 1 requests per call.
        for attempt in 0..=self.cfg.max_retries {
            match self.attempt(req, token.as_deref()) {
                Ok(text) => return Ok(text),
                Err(JudgeError::Permanent(msg)) => return Err(JudgeError::Permanent(msg)),
                Err(JudgeError::Transient(msg)) => {
                    log::warn!(
                        "remote judge transient failure (attempt {}/{}): {msg}",
                        attempt + 1,
                        self.cfg.max_retries + 1
                    );
                    last = msg;
                    if attempt < self.cfg.max_retries {
                        let backoff = self.cfg.backoff_base_ms.saturating_mul(1 << attempt.min(16));
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
                Err(other) => return Err(other),
            }
        }
        Err(JudgeError::Exhausted {
            attempts: self.cfg.max_retries + 1,
            last,
        })
    }
}

/// Counting semaphore bounding concurrent remote calls.
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct SemaphorePermit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(permits: usize) -> Semaphore {
        Semaphore {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphorePermit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphorePermit(self)
    }
}

impl Drop for SemaphorePermit<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().unwrap();
        *permits += 1;
        self.0.cv.notify_one();
    }
}

// ---------------------------------------------------------------------------
// Backend config
// ---------------------------------------------------------------------------

/// Declarative backend selection for config files and the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock {
        seed: u64,
        #[serde(default)]
        position_bias_rate: f64,
        #[serde(default)]
        verbosity_bias_rate: f64,
    },
    Scripted {
        fixture_path: PathBuf,
    },
    Remote(RemoteConfig),
}

impl BackendConfig {
    pub fn build(&self) -> Result<Arc<dyn Judge>, BackendBuildError> {
        match self {
            BackendConfig::Mock {
                seed,
                position_bias_rate,
                verbosity_bias_rate,
            } => Ok(Arc::new(
                MockJudge::new(*seed)
                    .with_position_bias(*position_bias_rate)
                    .with_verbosity_bias(*verbosity_bias_rate),
            )),
            BackendConfig::Scripted { fixture_path } => {
                Ok(Arc::new(ScriptedJudge::from_path(fixture_path)?))
            }
            BackendConfig::Remote(cfg) => Ok(Arc::new(RemoteJudge::new(cfg.clone())?)),
        }
    }
}
