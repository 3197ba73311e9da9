use thiserror::Error;

/// Errors raised by the diagnostics core.
#[derive(Debug, Error)]
pub enum CqaError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("duplicate line between buses {0} and {1}; parallel lines must be aggregated")]
    DuplicateLine(usize, usize),

    #[error("case document error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("power flow did not converge after {iterations} iterations (final mismatch {final_mismatch:.3e})")]
    NonConvergence {
        iterations: usize,
        final_mismatch: f64,
        trace: Vec<f64>,
    },

    #[error("singular Newton matrix at iteration {iteration} (pivot ratio {pivot_ratio:.3e}); the operating point may be degenerate")]
    SingularJacobian { iteration: usize, pivot_ratio: f64 },

    #[error("point is infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CqaError>;
