use thiserror::Error;

/// Errors raised by the normalization library, calibration and simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zero variance: input statistics are degenerate")]
    ZeroVariance,

    #[error("zero variance at sample {sample}, layer {layer}")]
    ZeroVarianceAt { sample: usize, layer: usize },

    #[error("invalid ISD {0}: must be finite and positive")]
    InvalidIsd(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("no valid skip range: {0}")]
    NoValidRange(String),

    #[error("layer {k} outside skip window [{start}, {end}]")]
    OutOfRange { k: usize, start: usize, end: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
