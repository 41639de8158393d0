//! Crate-wide error type for the solvers.

use crate::linalg::LinalgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("non-positive water height h = {value:.6e} at cell {cell} ({context})")]
    NonPositiveHeight {
        context: &'static str,
        cell: usize,
        value: f64,
    },
    #[error("non-finite value at cell {cell} ({context})")]
    NonFinite { context: &'static str, cell: usize },
    #[error("shape mismatch in {context}: {detail}")]
    ShapeMismatch {
        context: &'static str,
        detail: String,
    },
    #[error("micro block is empty (n_moments = 0)")]
    EmptyMicroBlock,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("rank {r} out of range 1..={max}")]
    RankOutOfRange { r: usize, max: usize },
    #[error("singular linear system in {context} at cell {cell}")]
    SingularSystem { context: &'static str, cell: usize },
    #[error("solver aborted at step {step}, t = {time:.6e}: {source}")]
    StepFailed {
        step: usize,
        time: f64,
        #[source]
        source: Box<SolverError>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl SolverError {
    pub fn at_step(self, step: usize, time: f64) -> SolverError {
        SolverError::StepFailed {
            step,
            time,
            source: Box::new(self),
        }
    }
}
