use std::path::PathBuf;

use thiserror::Error;

/// Every failure mode in the crate funnels into this enum.
#[derive(Debug, Error)]
pub enum GammaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NumericDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GammaError>;

impl GammaError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        GammaError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        GammaError::Io {
            context: context.into(),
            source,
        }
    }
}
