use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("reducible: {0}")]
    Reducible(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("sign pattern violated (max violation {violation:.3e}): {context}")]
    SignPattern { violation: f64, context: String },
    #[error("excess censoring: {censored} of {total} trajectories exceeded max_steps")]
    Censoring { censored: u64, total: u64 },
    #[error("did not converge: {0}")]
    NoConvergence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 3 for configuration problems, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Json(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
