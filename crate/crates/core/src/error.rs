use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Bracketed root search ran out of iterations.
    #[error("root finder did not converge after {iterations} iterations, last bracket [{lo:e}, {hi:e}]")]
    SolverFailure { iterations: usize, lo: f64, hi: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("degenerate source: {0}")]
    DegenerateSource(String),

    #[error("no pulses sent for source pair {0}")]
    MissingStatistics(&'static str),

    #[error("decoy bound denominator is {0:e}; decoy intensities are too close after fluctuation widening")]
    NonPositiveDenominator(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("bound undefined: {0}")]
    UndefinedBound(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
