use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum ChaosError {
    /// An argument violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite or otherwise unusable value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A trajectory left the representable range.
    #[error("blow-up at step {step}: {detail}")]
    BlowUp { step: usize, detail: String },

    /// A configuration document failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ChaosError>;

impl ChaosError {
    /// Process exit code for the CLI: 2 for validation problems, 3 for
    /// numeric blow-ups, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ChaosError::Config(_) | ChaosError::Domain(_) => 2,
            ChaosError::Numeric(_) | ChaosError::BlowUp { .. } => 3,
            _ => 1,
        }
    }
}
