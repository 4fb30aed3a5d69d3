use thiserror::Error;

/// Errors raised by the analysis and simulation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("integration diverged at t = {time} s")]
    Divergence { time: f64, last_finite: Vec<f64> },

    #[error("reachable set diverged after {steps} steps")]
    ReachDivergence { steps: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("covariance is singular (reciprocal condition {rcond:.3e}); near-dependent signals: {signals:?}")]
    SingularCovariance { rcond: f64, signals: Vec<usize> },

    #[error("RoT time went backwards: last poll at {last} s, now {now} s")]
    TimeRegression { last: f64, now: f64 },

    #[error("RoT cannot be rearmed before it has fired")]
    RearmBeforeFire,

    #[error("distribution has zero mass")]
    ZeroMass,

    #[error("no safe cells in restart-time map")]
    NoSafeCells,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
