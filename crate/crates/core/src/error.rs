use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, found {found}")]
    DimensionMismatch {
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite {what} (|theta| = {theta_norm:.3e}{})", index_suffix(*.index))]
    NonFinite {
        what: &'static str,
        theta_norm: f64,
        index: Option<usize>,
    },

    #[error("dense limit exceeded: K = {k} > {limit}")]
    DenseLimit { k: usize, limit: usize },

    #[error("Hessian is not symmetric: relative asymmetry {asymmetry:.3e}")]
    Asymmetric { asymmetry: f64 },

    #[error("precision matrix is not positive definite ({hessian}); use the GGN Hessian or a larger prior precision")]
    NotPositiveDefinite { hessian: &'static str },

    #[error("factorization is inaccurate: max |H Sigma - I| = {residual:.3e}")]
    IllConditioned { residual: f64 },

    #[error("training diverged{}", epoch_suffix(*.last_finite_epoch))]
    Diverged { last_finite_epoch: Option<usize> },

    #[error("ODE solver gave up at t = {t:.6} after {steps} steps: {reason}")]
    Solver {
        t: f64,
        steps: usize,
        reason: String,
        last_state: Vec<f64>,
    },

    #[error("{path}: line {line}, column {column}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        column: usize,
        message: String,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn index_suffix(index: Option<usize>) -> String {
    match index {
        Some(i) => format!(", data index {i}"),
        None => String::new(),
    }
}

fn epoch_suffix(epoch: Option<usize>) -> String {
    match epoch {
        Some(e) => format!(" after epoch {e}"),
        None => " at the initial point".into(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
