use std::path::PathBuf;

use crate::training::StepRecord;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite activation at `{layer}`")]
    NonFiniteActivation { layer: String },

    #[error("non-finite loss at step {}", record.step)]
    NonFiniteLoss { record: Box<StepRecord> },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt checkpoint {}: {message}", path.display())]
    CorruptCheckpoint { path: PathBuf, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },

    #[error("config hash mismatch: checkpoint has {found}, expected {expected}")]
    HashMismatch { found: String, expected: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
