use alloc::string::String;

/// Errors raised by the estimation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SaeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient areas: {areas} areas for {params} regression coefficients")]
    InsufficientAreas { areas: usize, params: usize },

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,

    #[error("I - rho W is singular at rho = {rho}")]
    SingularSpatial { rho: f64 },

    #[error("rho = {rho} outside validity interval ({min}, {max})")]
    RhoOutOfRange { rho: f64, min: f64, max: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("eigenvalue computation failed")]
    EigenFailure,

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },
}

pub type Result<T> = core::result::Result<T, SaeError>;
