use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Eigendecomposition or quadrature did not converge. The offending
    /// matrix, when there is one, is echoed in `detail`.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("singular matrix (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("under-determined regression: {samples} samples for {unknowns} unknowns")]
    Underdetermined { samples: usize, unknowns: usize },

    #[error("optimization did not converge: {message} (best iterate {best:?})")]
    Optimization { message: String, best: Vec<f64> },

    #[error("near-singular grid covariance at step {step}: {source}")]
    NearSingularCovariance {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Error {
        match self {
            e @ (Error::AtStep { .. } | Error::NearSingularCovariance { .. }) => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for errors caused by the numerics rather than by the caller's input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Numerical { .. }
            | Error::Singular { .. }
            | Error::Optimization { .. }
            | Error::NearSingularCovariance { .. }
            | Error::InvalidState(_) => true,
            Error::AtStep { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
