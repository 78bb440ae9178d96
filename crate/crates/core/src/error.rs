use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),

    #[error("unknown sample id {0:?}")]
    UnknownSampleId(String),

    #[error("invalid sample {id:?}: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("insufficient shots: have {have}, want {want}")]
    InsufficientShots { have: usize, want: usize },

    #[error("insufficient {label} samples for prefix pool: have {have}, want {want}")]
    InsufficientSamples {
        label: &'static str,
        have: usize,
        want: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("token scores are empty")]
    EmptyTokenScores,

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("degenerate log-likelihood (zero denominator)")]
    DegenerateLL,

    #[error("token scores were computed on different texts")]
    TextMismatch,

    #[error("invalid token scores: {0}")]
    InvalidTokenScores(String),

    #[error("provider lacks capability {0:?}")]
    Capability(&'static str),

    #[error("no trace for context {context_id:?}, sample {sample:?}")]
    MissingTrace { context_id: String, sample: String },

    #[error("offset attribution produced zero target tokens")]
    DegenerateTokenization,

    #[error("word {0:?} is outside the synthetic vocabulary and smoothing is zero")]
    OutOfVocabulary(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("invalid provider uri {0:?}")]
    ProviderUri(String),

    #[error("member shots required but the prefix pool has none")]
    MissingMemberShots,

    #[error("non-member shots required but the prefix pool has none")]
    MissingNonmemberShots,

    #[error("method {method} requires {what}")]
    MissingInput { method: String, what: String },

    #[error("dataset needs at least one member and one non-member for evaluation")]
    SingleClass,

    #[error("prefix sample {0:?} leaked into the evaluation scores")]
    PoolLeak(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors raised by a model backend (as opposed to malformed inputs).
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            Error::Transport(_) | Error::MissingTrace { .. } | Error::DegenerateTokenization
        )
    }

    pub fn is_capability(&self) -> bool {
        matches!(self, Error::Capability(_))
    }
}
