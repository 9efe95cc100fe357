use thiserror::Error;

pub type Result<T, E = Ps2Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Ps2Error {
    /// Invalid problem or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an operation's preconditions (bad ids, shape mismatch).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Ps2Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Ps2Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Ps2Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Ps2Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<serde_json::Error> for Ps2Error {
    fn from(err: serde_json::Error) -> Self {
        Ps2Error::Serialization(err.to_string())
    }
}
