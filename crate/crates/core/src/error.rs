use std::path::PathBuf;

use crate::ids::{ItemId, UserId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("item {item} not live at hour {hour}")]
    ItemNotLive { item: ItemId, hour: u64 },

    #[error("unknown user {0}")]
    UnknownUser(UserId),

    #[error("missing scorer table: {0}")]
    MissingTable(&'static str),

    #[error("source {0} cannot be retrieved online")]
    UnknownSource(String),

    #[error("stage violation: {0}")]
    StageViolation(String),

    #[error("store rejected entry for user {user}: {reason}")]
    StoreRejected { user: UserId, reason: String },

    #[error("cannot draw {requested} distinct items from a catalog of {available}")]
    HoldoutTooLarge { requested: usize, available: usize },

    #[error("hour {0} is outside the off-peak window")]
    OutsideOffPeak(u64),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation failures map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidConfig { .. } | Error::UnknownExperiment(_))
    }
}
