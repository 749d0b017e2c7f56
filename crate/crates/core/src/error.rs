use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: missing value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: non-finite value in column `{column}`")]
    NonFiniteValue { row: usize, column: String },
    #[error("row {row}: observed time {value} is not positive")]
    NonPositiveTime { row: usize, value: f64 },
    #[error("row {row}: cause code {code} outside 0..={max}")]
    UnknownCauseCode { row: usize, code: i64, max: u8 },
    #[error("cluster `{0}` has no subjects")]
    EmptyCluster(String),
    #[error("need at least {needed} clusters, found {found}")]
    TooFewClusters { needed: usize, found: usize },
    #[error("tau {tau} exceeds the largest observed time {max_time}")]
    TauBeyondFollowUp { tau: f64, max_time: f64 },
    #[error("tau must be positive and finite, got {0}")]
    InvalidTau(f64),
    #[error("covariate count mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no uncensored observation to anchor the analysis horizon")]
    NoUncensoredTimes,
    #[error("censoring survival estimate vanishes at or before tau = {tau}")]
    GhatZeroBeforeTau { tau: f64 },
    #[error("censoring survival estimate is zero at t = {t}")]
    DivisionByZeroGhat { t: f64 },
    #[error("censoring times were not recorded for this dataset")]
    CensoringTimeUnavailable,
    #[error("design matrix is singular (reciprocal condition number {rcond:e})")]
    SingularDesign { rcond: f64 },
    #[error("no cause-{cause} events in (0, tau]")]
    NoEventsForCause { cause: u8 },
    #[error("covariate {index} has fewer than two distinct values")]
    DegenerateCovariate { index: usize },
    #[error("{failed} of {total} bootstrap refits failed")]
    BootstrapFitFailure { failed: usize, total: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerical estimators (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::GhatZeroBeforeTau { .. }
                | Error::DivisionByZeroGhat { .. }
                | Error::SingularDesign { .. }
                | Error::BootstrapFitFailure { .. }
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
