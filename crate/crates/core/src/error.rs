use thiserror::Error;

/// Errors raised by the estimation, calibration and monitoring routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A moment matrix is singular or too badly conditioned to invert.
    #[error("moment matrix is singular or ill-conditioned (condition number {cond:e})")]
    SingularMoments { cond: f64 },

    #[error("least-squares fit did not converge after {iterations} iterations (projected gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },

    #[error("window of {n} observations cannot identify {q} parameters")]
    DegenerateWindow { n: usize, q: usize },

    #[error("argument out of domain: {0}")]
    Domain(String),

    #[error("closed-end horizon of {horizon} observations exceeded")]
    HorizonExceeded { horizon: usize },

    /// The bootstrap variance estimate collapsed to zero.
    #[error("bootstrap variance is degenerate: {0}")]
    DegenerateBootstrap(String),

    #[error("summary requested on an empty sample")]
    EmptySample,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// True for failures caused by the numbers rather than by the caller's inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SingularMoments { .. }
                | Error::NoConvergence { .. }
                | Error::DegenerateBootstrap(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
