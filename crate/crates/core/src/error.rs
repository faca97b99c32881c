use crate::lp::LpError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("instance has no {0} schedule")]
    MissingSchedule(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("linear program: {0}")]
    Lp(#[from] LpError),

    #[error("policy `{0}` needs a consumption plan")]
    PlanMissing(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("experiment aborted: {failed} of {total} trials failed (first: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
