use thiserror::Error;

/// Errors surfaced by model construction, the tape, tasks, and I/O.
#[derive(Debug, Error)]
pub enum NtmError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}{context}")]
    Numeric { op: String, context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("episode format error: {0}")]
    EpisodeFormat(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NtmError>;
