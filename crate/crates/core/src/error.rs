use thiserror::Error;

#[derive(Debug, Error)]
pub enum DflError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("step size {eta} exceeds 2/(mu+beta) = {limit}")]
    StepSizeTooLarge { eta: f64, limit: f64 },
    #[error("degenerate probes: {0}")]
    DegenerateProbes(String),
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
}

impl DflError {
    /// Stable name of the variant, used by the CLI when reporting failures.
    pub fn kind(&self) -> &'static str {
        match self {
            DflError::InvalidInput(_) => "InvalidInput",
            DflError::DimensionMismatch { .. } => "DimensionMismatch",
            DflError::InsufficientData(_) => "InsufficientData",
            DflError::InvalidTopology(_) => "InvalidTopology",
            DflError::InvalidSchedule(_) => "InvalidSchedule",
            DflError::Infeasible(_) => "Infeasible",
            DflError::StepSizeTooLarge { .. } => "StepSizeTooLarge",
            DflError::DegenerateProbes(_) => "DegenerateProbes",
            DflError::NotConverged(_) => "NotConverged",
            DflError::Io(_) => "Io",
            DflError::Parse(_) => "Parse",
            DflError::Config { .. } => "Config",
        }
    }
}

impl From<csv::Error> for DflError {
    fn from(e: csv::Error) -> Self {
        DflError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for DflError {
    fn from(e: serde_json::Error) -> Self {
        DflError::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DflError>;
