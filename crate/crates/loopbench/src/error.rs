//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Instance generator rejected its parameters (e.g. a cycle shorter than 3).
    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    /// A coloring or series does not match the graph it was paired with.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Brute-force enumeration would exceed the desk-scale state guard.
    /// Callers should supply `conf_best` explicitly instead.
    #[error("instance too large: {0}")]
    Capacity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `conf_initial == conf_best`: the proximity denominator is undefined.
    /// The runner resamples random initial colorings when it sees this.
    #[error("degenerate series: conf_initial ({conf_initial}) equals conf_best ({conf_best})")]
    DegenerateSeries { conf_initial: usize, conf_best: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// An operation was invoked out of order (e.g. note injection after round 0,
    /// or observing a round not yet recorded).
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// Response bytes were not a valid decision document. Carries the raw
    /// payload for trace logging.
    #[error("parse error: {msg}; payload: {payload}")]
    Parse { msg: String, payload: String },

    /// A decision parsed but violated the schema (color out of enum, empty
    /// strategy). Carries the raw payload for trace logging.
    #[error("validation error: {msg}; payload: {payload}")]
    Validation { msg: String, payload: String },

    /// A scripted backend had no entry and no default rule for this agent-round.
    #[error("script gap: no response for node {node} round {round} and no default rule")]
    ScriptGap { node: usize, round: u32 },

    /// Transport failed after exhausting the retry budget.
    #[error("transport error after {attempts} attempt(s): {msg}")]
    Transport { attempts: u32, msg: String },

    /// Credentials were rejected; never retried.
    #[error("auth failure: {0}")]
    Auth(String),

    #[error("trace format error: found version {found}, expected {expected}")]
    TraceVersion { found: u32, expected: u32 },

    #[error("trace format error: {0}")]
    TraceFormat(String),

    /// Persistent agent failure beyond the per-round fallback policy. The
    /// partial trace is preserved for post-mortem.
    #[error("aborted run: {reason}")]
    Aborted {
        reason: String,
        partial: Box<crate::sim::RunTrace>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
