use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// The dyadic histogram of PrivateVariance lost every bin to the stability threshold.
    #[error("insufficient data for scale estimation ({pairs} pairs)")]
    InsufficientScaleData { pairs: usize },

    /// The private truncation interval of the mean estimator could not be located.
    #[error("insufficient sample for private range (n = {n})")]
    InsufficientRange { n: usize },

    #[error("round {round} failed: {source}")]
    RoundFailed {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("iterates diverged at round {round}: {detail}")]
    Diverged { round: usize, detail: String },

    #[error("protocol violation at site {site}, round {round}: {detail}")]
    ProtocolViolation {
        site: u32,
        round: usize,
        detail: String,
    },

    #[error("aggregation infeasible: {0}")]
    AggregationInfeasible(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ (Error::RoundFailed { .. } | Error::Diverged { .. } | Error::ProtocolViolation { .. }) => e,
            e => Error::RoundFailed {
                round,
                source: Box::new(e),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
