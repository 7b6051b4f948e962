use crate::tree::Violation;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BdtError {
    #[error("hyperparameter {name} must be finite and positive, got {value}")]
    InvalidHyperparameter { name: &'static str, value: f64 },

    #[error("invalid tree ({} violation(s)): {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidTree(Vec<Violation>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {0} not found")]
    UnknownNode(u32),

    #[error("covariance is not positive definite even after adding jitter {jitter:e}; try a larger sigma_y or add diagonal jitter")]
    SingularCovariance { jitter: f64 },

    #[error("slice sampler for {param} exceeded {steps} shrinkage steps (x0 = {x0}, interval = [{lo}, {hi}])")]
    SliceShrinkage {
        param: &'static str,
        steps: usize,
        x0: f64,
        lo: f64,
        hi: f64,
    },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unsupported tree document version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BdtError>;
