use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LiqssError> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum LiqssError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv file has no header row")]
    MissingHeader,
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("non-numeric cell {value:?} at row {row}, column {col}")]
    NonNumeric { row: usize, col: usize, value: String },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("target column {0:?} not found in header")]
    TargetNotFound(String),
    #[error("duplicate KPI name {0:?}")]
    DuplicateKpiName(String),
    #[error("series too short: need at least {needed} rows, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("invalid split ratios: train={train}, val={val}")]
    InvalidRatio { train: f64, val: f64 },
    #[error("split of {n} windows leaves an empty partition")]
    EmptySplit { n: usize },
    #[error("invalid tensor-train modes: {0}")]
    InvalidModes(String),
    #[error("mode product mismatch: {0}")]
    ModeMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("time step {0} is below the positivity floor 1e-6")]
    BelowFloor(f64),
    #[error("singular triangular system (zero pivot at {0})")]
    SingularMatrix(usize),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {0:?}")]
    VersionMismatch(String),
    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty evaluation set")]
    EmptyTestSet,
    #[error("baseline {0} has zero error; skill score undefined")]
    ZeroBaseline(&'static str),
    #[error("{0}")]
    Config(String),
}

impl LiqssError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LiqssError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable identifier printed as the error prefix by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            LiqssError::Io { .. } => "IoError",
            LiqssError::MissingHeader => "MissingHeader",
            LiqssError::Csv(_) => "CsvError",
            LiqssError::NonNumeric { .. } => "NonNumeric",
            LiqssError::NonFiniteValue { .. } => "NonFiniteValue",
            LiqssError::TargetNotFound(_) => "TargetNotFound",
            LiqssError::DuplicateKpiName(_) => "DuplicateKpiName",
            LiqssError::TooShort { .. } => "TooShort",
            LiqssError::InvalidSize(_) => "InvalidSize",
            LiqssError::InvalidRatio { .. } => "ConfigError",
            LiqssError::EmptySplit { .. } => "EmptySplit",
            LiqssError::InvalidModes(_) => "InvalidModes",
            LiqssError::ModeMismatch(_) => "ModeMismatch",
            LiqssError::DimensionMismatch { .. } => "DimensionMismatch",
            LiqssError::ShapeMismatch(_) => "ShapeMismatch",
            LiqssError::BelowFloor(_) => "BelowFloor",
            LiqssError::SingularMatrix(_) => "SingularMatrix",
            LiqssError::CorruptCheckpoint(_) => "CorruptCheckpoint",
            LiqssError::VersionMismatch(_) => "VersionMismatch",
            LiqssError::ChecksumMismatch { .. } => "ChecksumMismatch",
            LiqssError::NonFiniteLoss { .. } => "NonFiniteLoss",
            LiqssError::EmptyTestSet => "EmptyTestSet",
            LiqssError::ZeroBaseline(_) => "ZeroBaseline",
            LiqssError::Config(_) => "ConfigError",
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            LiqssError::InvalidRatio { .. }
            | LiqssError::InvalidModes(_)
            | LiqssError::ModeMismatch(_)
            | LiqssError::BelowFloor(_)
            | LiqssError::Config(_) => ErrorKind::Config,
            LiqssError::Io { .. }
            | LiqssError::MissingHeader
            | LiqssError::Csv(_)
            | LiqssError::NonNumeric { .. }
            | LiqssError::NonFiniteValue { .. }
            | LiqssError::TargetNotFound(_)
            | LiqssError::DuplicateKpiName(_)
            | LiqssError::TooShort { .. }
            | LiqssError::InvalidSize(_)
            | LiqssError::EmptySplit { .. }
            | LiqssError::ShapeMismatch(_)
            | LiqssError::DimensionMismatch { .. }
            | LiqssError::CorruptCheckpoint(_)
            | LiqssError::VersionMismatch(_)
            | LiqssError::ChecksumMismatch { .. }
            | LiqssError::EmptyTestSet => ErrorKind::Data,
            LiqssError::SingularMatrix(_)
            | LiqssError::NonFiniteLoss { .. }
            | LiqssError::ZeroBaseline(_) => ErrorKind::Runtime,
        }
    }
}
