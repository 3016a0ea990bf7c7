use striavae::{Error, ErrorClass};
use thiserror::Error as ThisError;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Config(_) => ErrorClass::Config,
            CliError::Core(e) => e.class(),
            CliError::Stage { source, .. } => source.class(),
        }
    }

    /// 1 configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Config => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numeric => 3,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            CliError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_class() {
        let stage = |e: CliError| CliError::Stage {
            stage: "train",
            source: Box::new(e),
        };
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(stage(Error::Shape("x".into()).into()).exit_code(), 2);
        let nan = Error::NonFiniteLoss {
            epoch: 1,
            batch: 0,
            recon: f64::NAN,
            kld: 0.0,
        };
        let e = stage(nan.into());
        assert_eq!(e.exit_code(), 3);
        assert_eq!(e.stage(), Some("train"));
        assert!(e.to_string().starts_with("stage train failed"));
    }
}
