use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input too short: {got} samples, need at least {min}")]
    TooShort { got: usize, min: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bin index {index} out of range for {bins} bins")]
    BinOutOfRange { index: usize, bins: usize },

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss in batch sample {index} (frequency {freq})")]
    NonFiniteLoss { index: usize, freq: u32 },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error in `{tensor}`: {reason}")]
    Integrity { tensor: String, reason: String },

    #[error("unsupported mode: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
