use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("{what} index {index} out of range (bound {bound})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parameter count {p} exceeds the dense-matrix cap {cap}")]
    TooLarge { p: usize, cap: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed content: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("{path}: checksum mismatch (manifest {expected}, file {actual})")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("unknown scenario variant `{found}`; expected one of: {}", known.join(", "))]
    UnknownScenario {
        found: String,
        known: Vec<&'static str>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Malformed {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2: configuration or usage error, 3: data or log integrity error,
    /// 4: numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) | Error::UndefinedCorrelation(_) => 4,
            Error::Malformed { .. }
            | Error::ChecksumMismatch { .. }
            | Error::Truncated { .. }
            | Error::UnsupportedVersion { .. }
            | Error::FingerprintMismatch(_) => 3,
            _ => 2,
        }
    }
}
