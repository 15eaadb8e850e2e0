use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical blow-up at t = {time:.4} s")]
    Blowup { time: f64 },

    #[error("simulation failed at sample {index}: {source}")]
    Simulation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("history buffer not ready: {filled} of {needed} entries")]
    NotReady { filled: usize, needed: usize },

    #[error("dataset is empty: no snapshot pairs could be formed")]
    EmptyDataset,

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:.3e})")]
    DareNotConverged { iterations: usize, residual: f64 },

    #[error("closed loop is unstable (spectral radius {spectral_radius:.6}); pair (A, B) not stabilizable")]
    NotStabilizable { spectral_radius: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("QP is primal infeasible")]
    Infeasible,

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { context: context.into(), message: message.into() }
    }

    /// True when the failure stems from user-supplied configuration or files
    /// rather than from the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Io { .. } | Error::InvalidInput(_) | Error::Dimension(_)
        )
    }
}
