use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Variants map onto the failure classes callers need to tell apart: bad
/// arguments, bad configuration, bad data, and numeric faults.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing entity: {0}")]
    MissingEntity(String),

    #[error("empty pool: mask selects no tokens")]
    EmptyPool,

    #[error("invalid label {label} at {location}: {reason}")]
    InvalidLabel {
        label: String,
        location: String,
        reason: String,
    },

    #[error("data integrity: {0}")]
    DataIntegrity(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("freeze violation: {0}")]
    FreezeViolation(String),

    #[error("non-deterministic closure: {0}")]
    NonDeterministic(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake_case name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Config(_) => "config",
            Error::InvalidInput(_) => "invalid_input",
            Error::MissingEntity(_) => "missing_entity",
            Error::EmptyPool => "empty_pool",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::DataIntegrity(_) => "data_integrity",
            Error::Parse { .. } => "parse",
            Error::InfeasibleSplit(_) => "infeasible_split",
            Error::InvalidManifest(_) => "invalid_manifest",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::EmptyInput(_) => "empty_input",
            Error::NumericFault(_) => "numeric_fault",
            Error::FreezeViolation(_) => "freeze_violation",
            Error::NonDeterministic(_) => "non_deterministic",
            Error::Estimation(_) => "estimation",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
