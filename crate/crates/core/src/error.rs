use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed LEB128 encoding at offset {offset}")]
    MalformedEncoding { offset: usize },

    #[error("invalid module: {0}")]
    InvalidModule(String),

    #[error("malformed module at offset {offset}: {reason}")]
    MalformedModule { offset: usize, reason: String },

    #[error("unsupported opcode {opcode} at offset {offset}")]
    UnsupportedOpcode { offset: usize, opcode: String },

    #[error("module cannot be instrumented: {0}")]
    NotInstrumentable(String),

    #[error("invalid gadget density {0}")]
    InvalidDensity(f64),

    #[error("binary is empty")]
    EmptyBinary,

    #[error("adversarial image changes pixel ({row}, {col}) outside the editable mask")]
    MaskViolation { row: usize, col: usize },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("invalid target label {0}, expected 0 or 1")]
    InvalidTarget(u8),

    #[error("degenerate dataset: {0}")]
    DegenerateDataset(String),

    #[error("invalid fold count {0}, need at least 2")]
    InvalidFolds(usize),

    #[error("incompatible model file: {0}")]
    IncompatibleModel(String),

    #[error("no editable pixel in the attack mask")]
    NothingEditable,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("duplicate sample id {0}")]
    DuplicateId(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(offset: usize, reason: impl Into<String>) -> Self {
        Error::MalformedModule {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
