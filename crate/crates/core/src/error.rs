//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("solver failed: residual {residual:.3e} after {iters} sweeps")]
    SolverFailure { residual: f64, iters: usize },

    #[error("numerical instability: {0}")]
    Stability(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("divergence at step {step}: {message}")]
    Divergence { step: usize, message: String },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI for its one-line error output.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Config(_) => "config-error",
            Error::Index(_) => "index-error",
            Error::Shape(_) => "shape-error",
            Error::SolverFailure { .. } => "solver-failure",
            Error::Stability(_) => "stability-error",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Load(_) => "load-error",
            Error::Parse(_) => "parse-error",
            Error::Precondition(_) => "precondition-error",
            Error::Divergence { .. } => "divergence-error",
            Error::Pipeline(_) => "pipeline-error",
            Error::Io(_) => "io-error",
        }
    }
}
