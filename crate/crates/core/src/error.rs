use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid region [{x1}, {x2}] x [{y1}, {y2}]: {reason}")]
    InvalidRegion {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("region {region} is not a proposal of image `{image}`")]
    ProposalNotFound { image: String, region: String },

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("metric undefined: {0}")]
    Undefined(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing file {path} (record `{record}`)")]
    MissingFile { path: PathBuf, record: String },

    #[error("dimension mismatch in `{record}`: expected {expected}, found {found}")]
    DimensionMismatch {
        record: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("bad magic bytes in descriptor file {0}")]
    BadMagic(PathBuf),

    #[error("unsupported {kind} format version {found} in {path} (expected {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad or missing data files rather than bad
    /// configuration or arithmetic.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile { .. }
                | Error::DimensionMismatch { .. }
                | Error::DuplicateId(_)
                | Error::BadMagic(_)
                | Error::UnsupportedVersion { .. }
                | Error::Malformed { .. }
                | Error::Io { .. }
                | Error::UnknownImage(_)
                | Error::UnknownConcept(_)
                | Error::ProposalNotFound { .. }
        )
    }
}
