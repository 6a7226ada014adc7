use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants map onto the exit-code classes used by the CLI: configuration
/// problems versus domain failures (numerics, infeasibility, I/O).
#[derive(Debug, Error)]
pub enum KlsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("integration diverged at t = {time:.3} s: machine `{machine}` has a non-finite state")]
    Divergence { time: f64, machine: String },

    #[error("insufficient history for window ending at t = {time:.3} s (needs {needed} samples, have {available})")]
    Window {
        time: f64,
        needed: usize,
        available: usize,
    },

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged: loss {loss:.3e} exceeds 10x the initial {initial:.3e}; try a smaller learning rate")]
    TrainingDiverged { loss: f64, initial: f64 },

    #[error("ill-conditioned least-squares problem: {0}")]
    Conditioning(String),

    #[error("control problem infeasible even at full shedding: constraint at step {step} violated by {violation:.3e} pu")]
    Infeasible { step: usize, violation: f64 },

    #[error("bound not applicable: Neumann series does not converge (norm {norm:.3e})")]
    BoundInapplicable { norm: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl KlsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KlsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from user configuration rather than the
    /// data or numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, KlsError::Config(_) | KlsError::Argument(_))
    }
}

pub type Result<T> = std::result::Result<T, KlsError>;
