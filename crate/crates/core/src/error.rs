use thiserror::Error;

use crate::design::ValidationReport;
use crate::numeric::NumericError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Numeric(#[from] NumericError),

    #[error("invalid population: {0}")]
    InvalidPopulation(ValidationReport),

    #[error("enumeration would produce {count} assignments, above the cap of {cap}")]
    CountExceedsCap { count: u128, cap: u128 },

    /// A covariance matrix failed its Cholesky factorization. `pivot` is the
    /// covariate direction (column index) that degenerated.
    #[error("{matrix} is singular{}: covariate direction {pivot} is degenerate",
        .stratum.as_ref().map(|s| format!(" in stratum {s}")).unwrap_or_default())]
    SingularCovariance {
        matrix: &'static str,
        stratum: Option<String>,
        pivot: usize,
    },

    #[error("no acceptable assignment after {attempts} attempts{}",
        .stratum.as_ref().map(|s| format!(" in stratum {s}")).unwrap_or_default())]
    AttemptsExhausted { attempts: u64, stratum: Option<String> },

    #[error("stratum {stratum} has an empty treatment arm")]
    EmptyArm { stratum: String },

    #[error("stratum {stratum} has {count} unit(s) in arm {arm}; at least 2 are needed")]
    InsufficientArm { stratum: String, arm: u8, count: usize },

    #[error("potential outcomes are required (simulation/oracle mode only)")]
    MissingPotentialOutcomes,

    #[error("observed outcomes are required")]
    MissingOutcomes,

    #[error("assignment does not match the population: {0}")]
    AssignmentMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn singular(matrix: &'static str, stratum: Option<&str>, err: NumericError) -> Self {
        match err {
            NumericError::Singular { pivot } => Error::SingularCovariance {
                matrix,
                stratum: stratum.map(str::to_owned),
                pivot,
            },
            other => Error::Numeric(other),
        }
    }
}
