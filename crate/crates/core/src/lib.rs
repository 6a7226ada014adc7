pub mod baselines;
pub mod control;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grid;
pub mod koopman;
mod matrix_io;
pub mod predictor;
pub mod sls;
pub mod stats;

pub use error::{KlsError, Result};
