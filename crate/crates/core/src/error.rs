use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid item {0}: side information is empty")]
    InvalidItem(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("snapshot error: {0}")]
    Snapshot(String),
    #[error("tag extraction failed for user {user}: {reason}")]
    TagExtractionFailed { user: String, reason: String },
    #[error("invalid k: {k} clusters requested from {distinct} distinct vectors")]
    InvalidK { k: usize, distinct: usize },
    #[error("no negative sample available for user {user} in domain {domain}")]
    NoNegativeAvailable { user: String, domain: String },
    #[error("dataset too small: {eligible} eligible users, {requested} requested")]
    DatasetTooSmall { eligible: usize, requested: usize },
    #[error("evaluation pool too small: {eligible} eligible distractors, {required} required")]
    EvalPoolTooSmall { eligible: usize, required: usize },
    #[error("invalid rank {rank}: must be in 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("replay error: {0}")]
    Replay(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure comes from the environment (network, backend)
    /// rather than from user-supplied input.
    pub fn is_environmental(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_))
    }

    /// True for backend failures a simulation step can degrade around.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, Error::BackendUnavailable(_) | Error::MalformedResponse(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
