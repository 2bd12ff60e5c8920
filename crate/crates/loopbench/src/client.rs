//! Transport layer to OpenAI-compatible chat-completion endpoints with strict
//! structured outputs, plus a scripted offline backend for deterministic
//! tests.
//!
//! Scripted rules read the canonical prompt text the same way a model would,
//! so replaying a script also exercises prompt fidelity end to end.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Identifies which agent-round produced a request, for trace logging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMeta {
    pub run_id: String,
    pub node_id: usize,
    pub round: u32,
}

/// One chat-completion request. The strict response schema is always
/// attached.
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub schema: serde_json::Value,
    pub timeout: Duration,
    /// Provider-specific knobs (e.g. reasoning effort), passed through
    /// opaquely at the top level of the request body.
    pub extra_params: BTreeMap<String, serde_json::Value>,
    pub meta: RequestMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// The model's raw message content plus delivery metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResponse {
    pub content: Vec<u8>,
    pub attempts: u32,
    pub usage: Option<TokenUsage>,
}

/// A completion source. Shareable across the concurrent in-flight requests
/// of one round.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse>;

    /// Whether identical runs against this backend produce identical bytes.
    /// Deterministic runs skip wall-clock fields in traces.
    fn deterministic(&self) -> bool;
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// A protocol rule a scripted agent can follow by reading its own prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptRule {
    /// Always answer with the current color.
    KeepOwnColor,
    /// Deterministic best response: the color least used among neighbors,
    /// preferring the current color on ties, then the lowest index.
    BestResponse,
    /// Switch to the next palette color when in conflict, otherwise hold.
    FlipOnConflict,
}

impl ScriptRule {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "keep_own_color" => Ok(Self::KeepOwnColor),
            "best_response" => Ok(Self::BestResponse),
            "flip_on_conflict" => Ok(Self::FlipOnConflict),
            other => Err(Error::Config(format!("unknown script rule: {other}"))),
        }
    }
}

/// One script slot: canned bytes replayed verbatim, or a rule evaluated
/// against the prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptEntry {
    Canned(Vec<u8>),
    Rule(ScriptRule),
}

/// Mapping from (node, round) to responses, with an optional default rule.
/// Total over the run horizon once a default is set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BackendScript {
    entries: BTreeMap<(usize, u32), ScriptEntry>,
    default: Option<ScriptRule>,
}

impl BackendScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_default(mut self, rule: ScriptRule) -> Self {
        self.default = Some(rule);
        self
    }

    pub fn set(&mut self, node: usize, round: u32, entry: ScriptEntry) {
        self.entries.insert((node, round), entry);
    }

    pub fn set_canned(&mut self, node: usize, round: u32, response: &serde_json::Value) {
        self.set(node, round, ScriptEntry::Canned(response.to_string().into_bytes()));
    }

    /// Parses a script file: a JSON object mapping `"node:round"` to either a
    /// canned response object or a rule name string. The reserved key
    /// `"default"` names the fallback rule.
    pub fn from_json(content: &str) -> Result<Self> {
        let doc: BTreeMap<String, serde_json::Value> = serde_json::from_str(content)
            .map_err(|e| Error::Config(format!("script file is not a JSON object: {e}")))?;
        let mut script = Self::new();
        for (key, value) in doc {
            if key == "default" {
                let name = value
                    .as_str()
                    .ok_or_else(|| Error::Config("script default must be a rule name".into()))?;
                script.default = Some(ScriptRule::from_name(name)?);
                continue;
            }
            let (node_str, round_str) = key.split_once(':').ok_or_else(|| {
                Error::Config(format!("script key {key:?} is not \"node:round\""))
            })?;
            let node: usize = node_str
                .parse()
                .map_err(|_| Error::Config(format!("bad node id in script key {key:?}")))?;
            let round: u32 = round_str
                .parse()
                .map_err(|_| Error::Config(format!("bad round in script key {key:?}")))?;
            let entry = match &value {
                serde_json::Value::String(name) => ScriptEntry::Rule(ScriptRule::from_name(name)?),
                serde_json::Value::Object(_) => {
                    ScriptEntry::Canned(value.to_string().into_bytes())
                }
                _ => {
                    return Err(Error::Config(format!(
                        "script entry {key:?} must be a response object or rule name"
                    )))
                }
            };
            script.entries.insert((node, round), entry);
        }
        Ok(script)
    }
}

/// What a scripted rule can read back out of the canonical prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
struct PromptView {
    own_color: usize,
    neighbor_colors: Vec<usize>,
    palette_size: usize,
    current_conflicts: usize,
}

fn prompt_field<'a>(user: &'a str, prefix: &str) -> Result<&'a str> {
    user.lines()
        .find_map(|l| l.strip_prefix(prefix))
        .ok_or_else(|| Error::Parse {
            msg: format!("prompt lacks canonical line {prefix:?}"),
            payload: user.to_string(),
        })
}

fn parse_usize_list(text: &str) -> Vec<usize> {
    text.trim_matches(|c| c == '[' || c == ']' || c == '{' || c == '}')
        .split(',')
        .filter_map(|part| part.trim().parse().ok())
        .collect()
}

impl PromptView {
    fn parse(user: &str) -> Result<Self> {
        let own_color = prompt_field(user, "- Your current color: ")?
            .trim()
            .parse()
            .map_err(|_| Error::Parse {
                msg: "bad current color".into(),
                payload: user.to_string(),
            })?;
        // "{1: 0, 2: 0}" -> values only.
        let neighbor_colors = prompt_field(user, "- Neighbors' colors: ")?
            .trim_matches(|c| c == '{' || c == '}')
            .split(',')
            .filter_map(|pair| pair.split_once(':').and_then(|(_, v)| v.trim().parse().ok()))
            .collect();
        let palette_size = parse_usize_list(prompt_field(user, "- Available colors: ")?).len();
        let current_conflicts = prompt_field(user, "- Current conflict count: ")?
            .split_whitespace()
            .next()
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| Error::Parse {
                msg: "bad conflict count".into(),
                payload: user.to_string(),
            })?;
        Ok(Self {
            own_color,
            neighbor_colors,
            palette_size,
            current_conflicts,
        })
    }

    fn best_response(&self) -> usize {
        let mut counts = vec![0usize; self.palette_size];
        for &c in &self.neighbor_colors {
            counts[c] += 1;
        }
        let min = *counts.iter().min().expect("palette is non-empty");
        if counts[self.own_color] == min {
            self.own_color
        } else {
            (0..self.palette_size).find(|&c| counts[c] == min).unwrap()
        }
    }
}

fn decision_bytes(color: usize, strategy: &str) -> Vec<u8> {
    serde_json::json!({ "color": color, "strategy": strategy })
        .to_string()
        .into_bytes()
}

/// Deterministic offline backend replaying a [`BackendScript`]. Usable
/// anywhere a live backend is; zero network use.
pub struct ScriptedBackend {
    script: BackendScript,
}

impl ScriptedBackend {
    pub fn new(script: BackendScript) -> Self {
        Self { script }
    }

    pub fn shared(script: BackendScript) -> Arc<dyn Backend> {
        Arc::new(Self::new(script))
    }

    fn apply_rule(rule: ScriptRule, user: &str) -> Result<Vec<u8>> {
        let view = PromptView::parse(user)?;
        Ok(match rule {
            ScriptRule::KeepOwnColor => {
                decision_bytes(view.own_color, "[SAME] keep current color")
            }
            ScriptRule::BestResponse => {
                decision_bytes(view.best_response(), "[SAME] pick the least used neighbor color")
            }
            ScriptRule::FlipOnConflict => {
                if view.current_conflicts > 0 {
                    decision_bytes(
                        (view.own_color + 1) % view.palette_size,
                        "[NEW] flip to escape conflict",
                    )
                } else {
                    decision_bytes(view.own_color, "[SAME] hold while conflict free")
                }
            }
        })
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        let key = (req.meta.node_id, req.meta.round);
        let content = match self.script.entries.get(&key) {
            Some(ScriptEntry::Canned(bytes)) => bytes.clone(),
            Some(ScriptEntry::Rule(rule)) => Self::apply_rule(*rule, &req.user)?,
            None => match self.script.default {
                Some(rule) => Self::apply_rule(rule, &req.user)?,
                None => {
                    return Err(Error::ScriptGap {
                        node: req.meta.node_id,
                        round: req.meta.round,
                    })
                }
            },
        };
        Ok(CompletionResponse {
            content,
            attempts: 1,
            usage: None,
        })
    }

    fn deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Transient-fault handling for the live backend.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, retry_index: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(retry_index)
    }
}

/// A raw HTTP reply, status plus body.
#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

/// Transport-level failure before any HTTP status was obtained. All variants
/// are treated as transient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFault {
    Timeout,
    Connect(String),
    Other(String),
}

impl fmt::Display for TransportFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Timeout => write!(f, "timeout"),
            Self::Connect(msg) => write!(f, "connect: {msg}"),
            Self::Other(msg) => write!(f, "{msg}"),
        }
    }
}

/// Minimal HTTP POST abstraction so retry behavior is testable offline.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> std::result::Result<HttpReply, TransportFault>;
}

/// Live transport over a blocking reqwest client.
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| Error::Config(format!("failed to build http client: {e}")))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> std::result::Result<HttpReply, TransportFault> {
        let response = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .json(body)
            .timeout(timeout)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    TransportFault::Timeout
                } else if e.is_connect() {
                    TransportFault::Connect(e.to_string())
                } else {
                    TransportFault::Other(e.to_string())
                }
            })?;
        let status = response.status().as_u16();
        let body = response
            .bytes()
            .map_err(|e| TransportFault::Other(format!("reading body: {e}")))?
            .to_vec();
        Ok(HttpReply { status, body })
    }
}

/// Configuration for the live backend. The credential is redacted from all
/// debug output.
#[derive(Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: String,
    pub retry: RetryPolicy,
}

impl fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpConfig")
            .field("base_url", &self.base_url)
            .field("api_key", &"***")
            .field("retry", &self.retry)
            .finish()
    }
}

pub const ENV_API_BASE: &str = "LOOPBENCH_API_BASE";
pub const ENV_API_KEY: &str = "LOOPBENCH_API_KEY";

impl HttpConfig {
    /// Reads `LOOPBENCH_API_BASE` and `LOOPBENCH_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let base_url = std::env::var(ENV_API_BASE)
            .map_err(|_| Error::Config(format!("{ENV_API_BASE} is not set")))?;
        let api_key = std::env::var(ENV_API_KEY)
            .map_err(|_| Error::Config(format!("{ENV_API_KEY} is not set")))?;
        Ok(Self {
            base_url,
            api_key,
            retry: RetryPolicy::default(),
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Live backend for OpenAI-compatible `/v1/chat/completions` endpoints.
///
/// Strict `json_schema` response format on every request; transient failures
/// (timeouts, 429, 5xx) retried with exponential backoff; auth failures never
/// retried; empty content retried once before erroring.
pub struct HttpBackend {
    config: HttpConfig,
    transport: Arc<dyn Transport>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig, transport: Arc<dyn Transport>) -> Self {
        Self { config, transport }
    }

    pub fn from_env() -> Result<Self> {
        Ok(Self::new(HttpConfig::from_env()?, Arc::new(ReqwestTransport::new()?)))
    }

    fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(req: &CompletionRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": req.model,
            "messages": [
                { "role": "system", "content": req.system },
                { "role": "user", "content": req.user },
            ],
            "temperature": req.temperature,
            "response_format": {
                "type": "json_schema",
                "json_schema": {
                    "name": "color_decision",
                    "strict": true,
                    "schema": req.schema,
                },
            },
        });
        for (key, value) in &req.extra_params {
            body[key] = value.clone();
        }
        body
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse> {
        let url = self.url();
        let body = Self::body(req);
        let retry = &self.config.retry;
        let mut attempts: u32 = 0;
        let mut empty_retried = false;

        loop {
            attempts += 1;
            let outcome = self
                .transport
                .post_json(&url, &self.config.api_key, &body, req.timeout);

            let transient_msg = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let parsed: ChatResponse =
                        serde_json::from_slice(&reply.body).map_err(|e| Error::Transport {
                            attempts,
                            msg: format!("unparseable completion body: {e}"),
                        })?;
                    let content = parsed
                        .choices
                        .first()
                        .and_then(|c| c.message.content.as_deref())
                        .unwrap_or("");
                    if content.is_empty() {
                        if empty_retried {
                            return Err(Error::Transport {
                                attempts,
                                msg: "empty completion content".into(),
                            });
                        }
                        empty_retried = true;
                        "empty completion content".to_string()
                    } else {
                        return Ok(CompletionResponse {
                            content: content.as_bytes().to_vec(),
                            attempts,
                            usage: parsed.usage.map(|u| TokenUsage {
                                prompt_tokens: u.prompt_tokens,
                                completion_tokens: u.completion_tokens,
                            }),
                        });
                    }
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(Error::Auth(format!(
                        "endpoint rejected credentials (http {})",
                        reply.status
                    )));
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    format!("http {}", reply.status)
                }
                Ok(reply) => {
                    return Err(Error::Transport {
                        attempts,
                        msg: format!(
                            "http {}: {}",
                            reply.status,
                            String::from_utf8_lossy(&reply.body)
                        ),
                    });
                }
                Err(fault) => fault.to_string(),
            };

            let retry_index = attempts - 1;
            if retry_index >= retry.max_retries {
                return Err(Error::Transport {
                    attempts,
                    msg: transient_msg,
                });
            }
            let delay = retry.delay(retry_index);
            log::warn!(
                "node {} round {}: attempt {attempts} failed ({transient_msg}), retrying in {delay:?}",
                req.meta.node_id,
                req.meta.round
            );
            std::thread::sleep(delay);
        }
    }

    fn deterministic(&self) -> bool {
        false
    }
}
