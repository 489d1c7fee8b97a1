use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid field `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("{0}")]
    Invariant(String),
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown sensor_id {0}")]
    UnknownSensor(u32),
    #[error("zero distance between transmitter and sensor")]
    ZeroDistance,
    #[error("angle {0} outside [0, pi]")]
    AngleOutOfRange(f64),
    #[error("calibration failed for sensor {sensor}: {reason}")]
    Calibration { sensor: u32, reason: String },
    #[error("row width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the filesystem rather than by content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
