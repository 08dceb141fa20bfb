use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    Vocab { token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: run `{command}` first")]
    MissingArtifact {
        path: PathBuf,
        command: &'static str,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for this error class (0 is reserved for success).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Config(_) | Error::Invalid(_) => 2,
            _ => 1,
        }
    }
}
