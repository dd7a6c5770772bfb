use thiserror::Error;

/// Errors surfaced by the library.
///
/// The CLI maps `InvalidInput`, `DimensionMismatch`, `InvalidFeature`,
/// `Precondition`, and I/O failures to exit code 1, and
/// `AssumptionViolation`, `Stability`, `InfeasibleTruncation`, and
/// `DegenerateSupport` to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("assumption violated: {0}")]
    AssumptionViolation(String),

    #[error("stability requirement failed: {0}")]
    Stability(String),

    #[error("invalid feature matrix: {0}")]
    InvalidFeature(String),

    #[error("infeasible truncation at state {state}: {detail}")]
    InfeasibleTruncation { state: usize, detail: String },

    #[error("degenerate policy support: {0}")]
    DegenerateSupport(String),

    #[error("stepsize precondition violated: {0}")]
    Precondition(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AssumptionViolation(_)
            | Error::Stability(_)
            | Error::InfeasibleTruncation { .. }
            | Error::DegenerateSupport(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
