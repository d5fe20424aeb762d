//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A square system whose largest available pivot fell under the threshold.
    #[error("singular system (pivot magnitude {pivot:.3e})")]
    Singular { pivot: f64 },

    #[error("rank-deficient matrix (column {column} is dependent)")]
    RankDeficient { column: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Starting point outside the model domain.
    #[error("parameter outside the model domain: {0}")]
    OutsideDomain(String),

    #[error("{what} did not converge after {iterations} iterations")]
    Convergence {
        what: String,
        iterations: usize,
        /// Best objective value reached, when meaningful.
        last_value: Option<f64>,
        /// Last iterate.
        last_theta: Option<Vec<f64>>,
    },

    /// The objective is unbounded on the feasible set.
    #[error("unbounded: {0}")]
    Unbounded(String),

    /// Negative Hessian at the optimum is not positive definite.
    #[error("curvature error: {0}")]
    Curvature(String),

    /// Elimination of the multiplier failed (vanishing pivot derivative).
    #[error("elimination failure: {0}")]
    Elimination(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no usable rows in {0}")]
    EmptyData(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                _ => unreachable!(),
            }
        } else {
            Error::Csv(e)
        }
    }
}

impl Error {
    /// Stable machine-readable code, used in CLI reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Singular { .. } => "singular",
            Error::RankDeficient { .. } => "rank",
            Error::Dimension(_) => "dimension",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::OutsideDomain(_) => "outside_domain",
            Error::Convergence { .. } => "convergence",
            Error::Unbounded(_) => "unbounded",
            Error::Curvature(_) => "curvature",
            Error::Elimination(_) => "elimination",
            Error::UnsupportedModel(_) => "unsupported_model",
            Error::DegenerateRange(_) => "degenerate_range",
            Error::Schema(_) => "schema",
            Error::EmptyData(_) => "empty_data",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
