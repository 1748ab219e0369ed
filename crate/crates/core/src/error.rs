use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

impl Error {
    /// Stable identifier for each failure class, used by the CLI and by the
    /// file-format tests to tell corruption modes apart.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io { .. } => "io",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Truncated(_) => "truncated",
            Error::Checksum(_) => "checksum",
            Error::NonFinite(_) => "non-finite",
            Error::MissingParam(_) => "missing-param",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;
