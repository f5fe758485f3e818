use std::path::PathBuf;

/// Errors raised across the pipeline.
///
/// The CLI maps [`Error::exit_code`] onto its 0/1/2 contract: input, format,
/// and I/O problems exit with 1, numeric failures with 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid input `{field}`: {detail}")]
    Input { field: String, detail: String },

    #[error("contract violated in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Input {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
