use thiserror::Error;

use crate::bootstrap::BootstrapRun;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("degenerate design: every {p}-row subdesign is singular")]
    DegenerateDesign { p: usize },

    #[error("solver did not converge after {iterations} iterations (duality gap {gap:.3e})")]
    Solver { iterations: usize, gap: f64 },

    #[error("numerical failure in cluster {cluster}: {message}")]
    Numerical { cluster: usize, message: String },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("majorization-minimization did not converge ({trace_len} iterates)")]
    MmNonConvergence { trace_len: usize },

    #[error("degenerate bootstrap replicates: {0}")]
    DegenerateReplicates(String),

    #[error("unreliable bootstrap run: {failed} of {total} replicates failed")]
    UnreliableBootstrap {
        failed: usize,
        total: usize,
        partial: Box<BootstrapRun>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
