use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed edit: {0}")]
    MalformedEdit(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown query type `{label}` at line {line}")]
    UnknownQueryType { line: usize, label: String },

    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("edit memory is empty")]
    EmptyMemory,

    #[error("size {size} out of range 1..={available}")]
    SizeOutOfRange { size: usize, available: usize },

    #[error("request timed out")]
    Timeout,

    #[error("rate limited by upstream")]
    RateLimited,

    #[error("upstream error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Upstream { status: Option<u16>, message: String },

    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: Box<Error> },

    #[error("scripted response sequence exhausted")]
    ScriptExhausted,

    #[error("no scripted response matches the prompt")]
    NoScriptMatch,

    #[error("scripted failure: {0}")]
    ScriptedFailure(String),

    #[error("empty field `{0}`")]
    EmptyField(&'static str),

    #[error("unfilled placeholder `{{{0}}}` in template")]
    UnfilledPlaceholder(String),

    #[error("demonstration library is empty")]
    EmptyDemoLibrary,

    #[error("NLI provider unavailable: {0}")]
    NliUnavailable(String),

    #[error("no records to aggregate")]
    EmptyInput,

    #[error("series has zero variance")]
    ZeroVariance,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedEdit(_) => "MalformedEdit",
            Error::Parse { .. } => "ParseError",
            Error::UnknownQueryType { .. } => "UnknownQueryType",
            Error::ProviderUnavailable(_) => "ProviderUnavailable",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::EmptyMemory => "EmptyMemory",
            Error::SizeOutOfRange { .. } => "SizeOutOfRange",
            Error::Timeout => "Timeout",
            Error::RateLimited => "RateLimited",
            Error::Upstream { .. } => "UpstreamError",
            Error::ExhaustedRetries { .. } => "ExhaustedRetries",
            Error::ScriptExhausted => "ScriptExhausted",
            Error::NoScriptMatch => "NoScriptMatch",
            Error::ScriptedFailure(_) => "ScriptedFailure",
            Error::EmptyField(_) => "EmptyField",
            Error::UnfilledPlaceholder(_) => "UnfilledPlaceholder",
            Error::EmptyDemoLibrary => "EmptyDemoLibrary",
            Error::NliUnavailable(_) => "NliUnavailable",
            Error::EmptyInput => "EmptyInput",
            Error::ZeroVariance => "ZeroVariance",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::Precondition(_) => "Precondition",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "ParseError",
        }
    }

    /// Whether a retry of the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            Error::Timeout | Error::RateLimited => true,
            Error::Upstream { status: None, .. } => true,
            Error::Upstream {
                status: Some(s), ..
            } => *s >= 500,
            _ => false,
        }
    }
}
