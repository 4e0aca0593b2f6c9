use thiserror::Error;

/// Errors raised by loading, encoding and model fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("inconsistent design for subject `{subject}`, item `{item}`: {message}")]
    InconsistentDesign {
        subject: String,
        item: String,
        message: String,
    },

    #[error("structural error: {0}")]
    Structure(String),

    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    Singular(Vec<String>),

    #[error("perfect separation detected: |{column}| = {value:.3} and the deviance has not converged")]
    Separation { column: String, value: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimator undefined: {0}")]
    Undefined(String),

    #[error("not enough degrees of freedom: N = {n} must exceed q = {q}")]
    DegreesOfFreedom { n: usize, q: usize },

    #[error("no convergence after {iterations} iterations: {detail}")]
    NonConvergence { iterations: usize, detail: String },

    #[error("working covariance is singular for cluster {0}")]
    SingularCluster(String),

    #[error("monotone likelihood: coefficient `{column}` diverged past {limit}")]
    Divergence { column: String, limit: f64 },

    #[error("stratum {0} has no events")]
    EmptyStratum(String),

    #[error("unknown coefficient `{0}`")]
    Lookup(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("singular matrix: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
