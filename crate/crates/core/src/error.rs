use thiserror::Error;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("kernel is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("singular kernel: {0}")]
    SingularKernel(String),

    #[error("correlation matrix is indefinite (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    Indefinite {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },

    #[error("ill-conditioned conditioning block (condition number {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("underdetermined reconstruction; unconstrained modes {0:?}")]
    Underdetermined(Vec<usize>),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Whether the error reflects a numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularKernel(_)
                | Error::Indefinite { .. }
                | Error::IllConditioned { .. }
                | Error::LinearAlgebra(_)
                | Error::ModelMismatch(_)
                | Error::Underdetermined(_)
        )
    }
}
