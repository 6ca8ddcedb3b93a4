use thiserror::Error;

/// Which factor a Newton update was operating on when it failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Column,
    Row,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Column => write!(f, "column"),
            Axis::Row => write!(f, "row"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("singular normal matrix at {axis} {index}")]
    Singular { axis: Axis, index: usize },

    #[error("exponent {value} exceeds the overflow guard at entry {index}")]
    Overflow { index: usize, value: f64 },

    #[error("non-finite loss at sweep {sweep}")]
    NonFiniteLoss { sweep: usize },

    #[error("KL divergence is infinite: reference has zero mass at state {state}")]
    InfiniteDivergence { state: usize },

    #[error("observation {observation} is impossible after action {action}")]
    ImpossibleObservation { action: usize, observation: usize },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Replaces the index carried by a [`Error::Singular`] error.
    pub fn at_index(self, index: usize) -> Self {
        match self {
            Error::Singular { axis, .. } => Error::Singular { axis, index },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Numerical(_)
            | Error::Singular { .. }
            | Error::Overflow { .. }
            | Error::NonFiniteLoss { .. }
            | Error::InfiniteDivergence { .. }
            | Error::Model(_) => 3,
            Error::Invariant(_) | Error::ImpossibleObservation { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
