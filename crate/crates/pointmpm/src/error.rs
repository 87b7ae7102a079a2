use thiserror::Error;

/// Errors shared across the crate. Variants mirror the failure classes the
/// public operations can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("simplex error: {0}")]
    Simplex(String),
    #[error("ratio error: {0}")]
    Ratio(String),
    #[error("norm error: {0}")]
    Norm(String),
    #[error("shape spec error: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config problems, missing checkpoints and
    /// numerics failures get dedicated codes.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Checkpoint(_) => 3,
            Error::Numerics(_) => 4,
            _ => 1,
        }
    }
}
