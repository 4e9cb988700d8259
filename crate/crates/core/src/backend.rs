//! Failures of pluggable model backends (taggers and span extractors).

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("model server unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("model server protocol violation: {0}")]
    ProtocolViolation(String),
}
