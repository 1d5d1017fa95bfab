use thiserror::Error;

use crate::data::Arm;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} has length {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: covariate row has {found} columns, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}: treatment value {value} is not 0 or 1")]
    NonBinaryTreatment { row: usize, value: f64 },
    #[error("single treatment arm: every unit has a = {0}")]
    SingleTreatmentArm(u8),
    #[error("row {row}: non-finite value in column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("need at least 2 units, got {0}")]
    TooFewUnits(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("propensity design matrix is rank deficient")]
    RankDeficient,
    #[error("logistic fit did not converge after {0} Newton iterations (possible separation)")]
    NotConverged(usize),
    #[error("logistic fit diverged: the treatment is (quasi-)separated by the covariates")]
    Separation,
    #[error("augmented precision matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("cannot build {k} strata from {n} units")]
    TooManyStrata { k: usize, n: usize },
    #[error("stratum {} has no {arm} units", .stratum + 1)]
    InvalidDesign { stratum: usize, arm: Arm },
    #[error("all {arm} residuals are zero; learning rate is undefined")]
    DegenerateOutcome { arm: Arm },
    #[error("{attempts} consecutive propensity draws gave an invalid design at K = {k}")]
    TooManyInvalidDesigns { k: usize, attempts: usize },
    #[error("no K in 2..={k_max} yields a valid design")]
    NoValidK { k_max: usize },
    #[error("scores must lie strictly inside (0, 1); row {row} has {value}")]
    ScoreOutOfRange { row: usize, value: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by the input data rather than numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::RaggedRow { .. }
                | Error::NonBinaryTreatment { .. }
                | Error::SingleTreatmentArm(_)
                | Error::NonFinite { .. }
                | Error::TooFewUnits(_)
                | Error::Malformed(_)
                | Error::ScoreOutOfRange { .. }
                | Error::Csv(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::TooManyStrata { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
