use std::path::PathBuf;

/// Errors produced anywhere in the clustering pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or input value violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A line of an NDJSON file could not be parsed.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A parsed document is structurally valid JSON but misses or
    /// misuses a field.
    #[error("schema error: {0}")]
    Schema(String),

    /// Array shapes do not agree (parameters vs config, matrix sizes).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A NaN or infinity showed up where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An atlas or file was written by an incompatible format version.
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    /// An internal invariant broke. This is a bug, not a user error.
    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the command-line tool when reporting failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Invariant(_) => "invariant",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
