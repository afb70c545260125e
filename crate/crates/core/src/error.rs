use thiserror::Error;

/// Errors raised by the toolkit.
///
/// Variants fall into two families that the CLI maps to distinct exit codes:
/// input/validation problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported qubit count {0} (only 1 or 2 qubits are supported)")]
    UnsupportedQubits(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not unitary (max deviation {0:.3e})")]
    NotUnitary(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("incomplete POVM: {0}")]
    IncompletePovm(String),

    #[error("protocol/readout mismatch: {0}")]
    ProtocolMismatch(String),

    #[error("element not found in group table (canonicalization failure)")]
    NotInGroup,

    #[error("group is not closed: twirl is not idempotent (deviation {0:.3e})")]
    NotClosed(f64),

    #[error("element unreachable within depth {0}")]
    Unreachable(usize),

    #[error("missing compiled word for gateset-induced leak policy")]
    MissingWord,

    #[error("channel is not completely positive (min Choi eigenvalue {0:.3e})")]
    NotCompletelyPositive(f64),

    #[error("channel is not trace preserving (deviation {0:.3e})")]
    NotTracePreserving(f64),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("missing curve {0}")]
    MissingCurve(String),

    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("plan invalid for dataset: {0}")]
    Plan(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by numerics rather than by invalid inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotCompletelyPositive(_)
                | Error::NotTracePreserving(_)
                | Error::Fit(_)
                | Error::NotInGroup
                | Error::NotClosed(_)
                | Error::Unreachable(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
