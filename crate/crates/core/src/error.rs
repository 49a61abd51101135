//! Crate-wide error type.

use std::fmt;

/// Errors surfaced by the engine. Variants map onto the CLI exit-code
/// contract: config/contract problems exit 2, numeric faults exit 3,
/// I/O and parse problems exit 4.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible for the requested operation.
    Shape { op: &'static str, detail: String },
    /// An input value outside an operation's domain (log of a
    /// non-positive value, division by zero, ...).
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// Operands recorded on different tapes.
    TapeMismatch { op: &'static str },
    /// An API contract was violated (non-scalar loss, out-of-range epoch, ...).
    Contract(String),
    /// A masked-softmax row with a valid query but no valid keys.
    DegenerateSoftmaxRow { batch: usize, query: usize },
    /// A session with zero valid positions reached the model.
    EmptySession { id: String },
    /// NaN or infinity produced during computation.
    NumericFault { op: String },
    /// Invalid configuration.
    Config(String),
    /// Malformed dataset line.
    Parse { line: usize, detail: String },
    /// Structurally inconsistent dataset (embedding width drift, label
    /// disagreement within a session, ...).
    Schema(String),
    /// Metric requested on an output that cannot support it.
    UnsupportedMetric(String),
    /// Too few records for the requested statistic.
    InsufficientData(String),
    /// Correlation undefined (zero variance in a coordinate).
    UndefinedCorrelation(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::Domain { op, index, value } => {
                write!(f, "{op}: domain error at flat index {index} (value {value})")
            }
            Error::TapeMismatch { op } => write!(f, "{op}: operands belong to different tapes"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::DegenerateSoftmaxRow { batch, query } => write!(
                f,
                "masked_softmax: query {query} of batch row {batch} is valid but has no valid keys"
            ),
            Error::EmptySession { id } => write!(f, "session {id:?} has no valid positions"),
            Error::NumericFault { op } => write!(f, "numeric fault: non-finite value in {op}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse { line, detail } => write!(f, "parse error at line {line}: {detail}"),
            Error::Schema(msg) => write!(f, "schema error: {msg}"),
            Error::UnsupportedMetric(msg) => write!(f, "unsupported metric: {msg}"),
            Error::InsufficientData(msg) => write!(f, "insufficient data: {msg}"),
            Error::UndefinedCorrelation(msg) => write!(f, "undefined correlation: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    /// Exit code for the CLI contract: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericFault { .. } => 3,
            Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 4,
            _ => 2,
        }
    }
}
