use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error at site {site}: {msg}")]
    Domain { site: String, msg: String },

    #[error("resource error: {0}")]
    Resource(String),

    #[error("window too small: radius {required} required, have {have}")]
    WindowTooSmall { required: usize, have: usize },

    #[error("unknown site '{0}'")]
    UnknownSite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
