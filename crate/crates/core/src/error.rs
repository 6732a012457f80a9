use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("statistics error: {0}")]
    Statistics(String),
    #[error("numeric fault in {layer} at timestep {timestep}: {detail}")]
    Numeric {
        layer: String,
        timestep: usize,
        detail: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("version mismatch: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
