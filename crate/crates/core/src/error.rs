use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("capacity exceeded on site {site}: requested {requested} cores, site has {available}")]
    CapacityExceeded {
        site: String,
        requested: u32,
        available: u32,
    },

    #[error("submission rejected on site {site}: {active} pilots already queued or active (max {max})")]
    RejectedSubmission { site: String, active: u32, max: u32 },

    #[error("unschedulable: {0}")]
    Unschedulable(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("infeasible plan: {0}")]
    InfeasiblePlan(String),

    #[error("incomplete trace: {0}")]
    IncompleteTrace(String),

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
