use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("value {value} at flat index {index} is outside the symmetric {bits}-bit range")]
    OutOfRange { index: usize, value: i64, bits: u32 },

    #[error("unsupported bit width {0}")]
    BitWidth(u32),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel max {cmax} exceeds tensor max {tmax}")]
    ChannelAboveTensorMax { cmax: f64, tmax: f64 },

    #[error("integer overflow: {0}")]
    Overflow(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("tracing was not enabled for this run")]
    TracingDisabled,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
