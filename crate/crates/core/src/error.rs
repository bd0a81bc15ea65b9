use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid sizes, rates, fractions or toggles.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Patient volume whose interquartile range is zero.
    #[error("degenerate volume {patient_id}: interquartile range is zero")]
    DegenerateVolume { patient_id: String },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {what} is not finite")]
    Diverged {
        epoch: usize,
        iteration: usize,
        what: String,
    },

    /// A required artifact (checkpoint, dataset, history) does not exist.
    #[error("missing {what}: {path}")]
    Missing { what: String, path: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
