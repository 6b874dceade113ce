use thiserror::Error;

/// Errors raised by the lab. Variants split into input validation problems
/// and numerical failures; the CLI maps the two groups to distinct exit codes.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty data: {0}")]
    Empty(String),

    #[error("signed measure not allowed here")]
    SignedMeasure,

    #[error("point is not admissible: {0}")]
    PointNotAdmissible(String),

    #[error("zero mass: {0}")]
    ZeroMass(String),

    #[error("linear program unbounded: {0}")]
    Unbounded(String),

    #[error("linear program infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl LabError {
    /// True for failures caused by the data or the numerics rather than by
    /// malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            LabError::ZeroMass(_)
                | LabError::Unbounded(_)
                | LabError::Infeasible(_)
                | LabError::Numerical(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        LabError::InvalidInput(msg.into())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
