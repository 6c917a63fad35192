use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum GamError {
    #[error("dimension mismatch at {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("maze format error: {0}")]
    Maze(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, GamError>;

impl GamError {
    /// Process exit code for the CLI (0 ok, 2 config, 3 precondition, 4 numerical).
    pub fn exit_code(&self) -> i32 {
        match self {
            GamError::Config(_) | GamError::Maze(_) | GamError::Serde(_) => 2,
            GamError::Precondition(_) | GamError::Io(_) => 3,
            GamError::Numerical(_) | GamError::Dimension { .. } => 4,
        }
    }
}

impl From<serde_json::Error> for GamError {
    fn from(e: serde_json::Error) -> Self {
        GamError::Serde(e.to_string())
    }
}
