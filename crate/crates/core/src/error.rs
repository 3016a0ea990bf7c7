use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file header: {0}")]
    Format(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("reference region mean {mean} is too close to zero after background subtraction")]
    DegenerateReference { mean: f64 },

    #[error("phantom geometry does not fit the volume: {0}")]
    Geometry(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: recon={recon}, kld={kld}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        recon: f64,
        kld: f64,
    },

    #[error("R^2 is undefined for a constant target (mae={mae}, rmse={rmse})")]
    UndefinedR2 { mae: f64, rmse: f64 },

    #[error("model integrity: {0}")]
    Integrity(String),

    #[error("refused: {0}")]
    Refused(String),
}

/// Coarse failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Map a CSV failure on `path`, keeping I/O errors as such.
    pub fn csv(path: impl Into<PathBuf>, e: csv::Error) -> Self {
        let path = path.into();
        match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io { path, source },
            other => Error::Format(format!("{}: {other:?}", path.display())),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Refused(_) => ErrorClass::Config,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Corrupt(_)
            | Error::Unsupported(_)
            | Error::Shape(_)
            | Error::Geometry(_)
            | Error::Integrity(_) => ErrorClass::Data,
            Error::Contract(_)
            | Error::DegenerateReference { .. }
            | Error::NonFiniteLoss { .. }
            | Error::UndefinedR2 { .. } => ErrorClass::Numeric,
        }
    }
}
