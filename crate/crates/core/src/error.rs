use thiserror::Error;

/// Errors raised by the geometry kernels and the experiment runner.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: argument out of domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("point {point:?} lies outside the domain of chart {chart}")]
    OutsideChart { chart: usize, point: Vec<f64> },

    #[error("forms live on different atlases (S^{0} vs S^{1})")]
    AtlasMismatch(usize, usize),

    #[error("form is not positive definite: minimum eigenvalue {0:e}")]
    NotPositiveDefinite(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
