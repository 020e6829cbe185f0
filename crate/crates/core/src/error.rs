//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("hidden layer has {n_hidden} units; exact enumeration supports at most {max}")]
    EnumerationBound { n_hidden: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("hidden state must be binary, found {0} at index {1}")]
    NonBinaryHidden(f64, usize),

    #[error("visible bit-flips are not defined for Gaussian visible units (unit {0})")]
    GaussianVisibleFlip(usize),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("model file checksum failure: {0}")]
    Checksum(String),

    #[error("unsupported model format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags the error with the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        })
    }
}
