use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PviError {
    #[error("distribution is not normalizable: non-negative eta2 in dimensions {dims:?}")]
    NotNormalizable { dims: Vec<usize> },

    #[error("degenerate variance in dimension {dim}: mu2 <= mu1^2")]
    DegenerateVariance { dim: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("design matrix is not diagonal (off-diagonal mass {mass:.3e})")]
    NotDiagonal { mass: f64 },

    #[error("cavity distribution is not normalizable in dimensions {dims:?}")]
    CavityNotNormalizable { dims: Vec<usize> },

    #[error("objective became non-finite: {0}")]
    NonFiniteObjective(String),

    #[error("commit rejected: posterior precision non-positive in dimensions {dims:?}")]
    RejectedUnnormalizable { dims: Vec<usize> },

    #[error("aggregated posterior is not normalizable in dimensions {dims:?}")]
    AggregateNotNormalizable { dims: Vec<usize> },

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("target column '{0}' not found")]
    MissingTarget(String),

    #[error("grid oracles support at most 2 dimensions, got {0}")]
    DimensionTooHigh(usize),

    #[error("function evaluation was non-finite at coordinate {0}")]
    NonFiniteEvaluation(usize),

    #[error("trace schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl PviError {
    /// Whether the failure is numerical (as opposed to configuration or I/O).
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            PviError::Config(_)
                | PviError::Io(_)
                | PviError::Parse { .. }
                | PviError::MissingTarget(_)
                | PviError::SchemaMismatch(_)
                | PviError::Unsupported(_)
                | PviError::InfeasibleSplit(_)
        )
    }
}

impl From<std::io::Error> for PviError {
    fn from(e: std::io::Error) -> Self {
        PviError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PviError>;
