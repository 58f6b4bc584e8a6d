use thiserror::Error;

/// Errors raised by model evaluation, fitting and simulation.
#[derive(Debug, Error)]
pub enum GeeError {
    #[error("link {link} saturates at linear predictor {u}")]
    LinkSaturated { link: &'static str, u: f64 },

    #[error("individual index {index} out of range (n = {n})")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A working correlation matrix failed the minimum-eigenvalue check.
    #[error("working correlation for individual {index} is singular (lambda_min = {lambda_min:.3e})")]
    SingularCorrelation { index: usize, lambda_min: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    /// The working-independence information matrix has no positive lower bound.
    #[error("design is rank deficient: lambda_min(H_indep) = {lambda_min:.3e}")]
    RankDeficient { lambda_min: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error at line {line}: {message}")]
    Data { line: u64, message: String },

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeeError>;
