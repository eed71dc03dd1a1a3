use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate gradient at ({}, {}, {})", .0[0], .0[1], .0[2])]
    DegenerateGradient([f64; 3]),

    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("missing input `{}`: {source}", .path.display())]
    MissingInput {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("i/o error on `{}`: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Maps an open/read failure to `MissingInput` when the file is absent.
    pub(crate) fn from_io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput { path, source }
        } else {
            Error::Io { path, source }
        }
    }
}
