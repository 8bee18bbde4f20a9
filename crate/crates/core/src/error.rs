use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("value outside support: {0}")]
    OutsideSupport(String),
    #[error("weights do not sum to one (sum = {0})")]
    Unnormalized(f64),
    #[error("measure has no atoms")]
    EmptyMeasure,
    #[error("zero density at observation {index}")]
    ZeroDensity { index: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code for the error class.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::OutsideSupport(_) => "outside_support",
            Error::Unnormalized(_) => "unnormalized_weights",
            Error::EmptyMeasure => "empty_measure",
            Error::ZeroDensity { .. } => "zero_density",
            Error::Singular(_) => "singular",
            Error::Unsupported(_) => "unsupported",
            Error::FitFailed(_) => "fit_failed",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Errors caused by malformed inputs rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::InvalidParameter(_)
                | Error::OutsideSupport(_)
                | Error::Unnormalized(_)
                | Error::EmptyMeasure
                | Error::Unsupported(_)
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
