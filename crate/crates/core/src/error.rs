use std::path::PathBuf;

use chrono::NaiveDate;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate text_id {0:?}")]
    DuplicateText(String),

    #[error("duplicate name {0:?}")]
    DuplicateName(String),

    #[error("date {date} outside calendar {start}..={end}")]
    DateOutOfRange {
        date: NaiveDate,
        start: NaiveDate,
        end: NaiveDate,
    },

    #[error("calendar start {start} is after end {end}")]
    InvertedCalendar { start: NaiveDate, end: NaiveDate },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("zero vector for key {0:?}")]
    ZeroVector(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown bond {0:?}")]
    UnknownBond(String),

    #[error("unknown industry {0:?}")]
    UnknownIndustry(String),

    #[error("bond {0:?} has no industry mapping")]
    NoIndustry(String),

    #[error("zero-variance row or column: {0}")]
    ZeroVariance(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero target at indices {0:?}")]
    ZeroTarget(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("series of length {len} too short (need at least {min})")]
    TooShort { len: usize, min: usize },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn schema(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Stable machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::DuplicateText(_) => "duplicate_text",
            Error::DuplicateName(_) => "duplicate_name",
            Error::DateOutOfRange { .. } => "date_out_of_range",
            Error::InvertedCalendar { .. } => "inverted_calendar",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::Shape { .. } => "shape",
            Error::ZeroVector(_) => "zero_vector",
            Error::Empty(_) => "empty",
            Error::UnknownBond(_) => "unknown_bond",
            Error::UnknownIndustry(_) => "unknown_industry",
            Error::NoIndustry(_) => "no_industry",
            Error::ZeroVariance(_) => "zero_variance",
            Error::NonFinite(_) => "non_finite",
            Error::ZeroTarget(_) => "zero_target",
            Error::Config(_) => "config",
            Error::TooShort { .. } => "too_short",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
