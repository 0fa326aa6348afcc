use thiserror::Error;

/// Every failure the library can report.
///
/// The variants line up with the process exit codes used by the command-line
/// runner, so callers can map an error to an exit status without inspecting
/// the message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite value produced at sampler step {step}")]
    NonFinite { step: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
