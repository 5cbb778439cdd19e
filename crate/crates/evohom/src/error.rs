use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvoError {
    #[error("grid or space mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("signal support outside the causal window: {0}")]
    SupportOutsideWindow(String),
    #[error("Neumann series not contractive (q = {q:.4}); increase nu")]
    NotContractive { q: f64 },
    #[error("Neumann series not contractive at frequency index {index} (q = {q:.4})")]
    NotContractiveAtFrequency { index: usize, q: f64 },
    #[error("operator kind is unbounded: {0}")]
    UnboundedKind(String),
    #[error("unsupported operator kind for this operation: {0}")]
    UnsupportedKind(String),
    #[error("operator is not coercive (estimate {c:.3e})")]
    NotCoercive { c: f64 },
    #[error("cell function is not coercive on the cell (estimate {c:.3e})")]
    NotCoerciveOnCell { c: f64 },
    #[error("implicit step matrix is singular at time index {index}")]
    SingularStep { index: usize },
    #[error("algebraic block is singular (coercivity estimate {c:.3e})")]
    SingularAlgebraicBlock { c: f64 },
    #[error("negative delay h = {0}")]
    NegativeDelay(f64),
    #[error("fractional exponent {0} outside [-1, 1]")]
    AlphaOutOfRange(f64),
    #[error("schedule needs at least 3 entries, got {0}")]
    ScheduleTooShort(usize),
    #[error("probe columns are not Cauchy along the schedule: {0}")]
    NonCauchy(String),
    #[error("limit is not translation invariant (impulse mismatch {mismatch:.3e})")]
    NotTranslationInvariant { mismatch: f64 },
    #[error("-1/eta = {0} lies on the spectrum of the curl surrogate")]
    EtaOnSpectrum(f64),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("unknown scenario: {0}")]
    ScenarioUnknown(String),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("no memory kernel available for this run")]
    NoKernelAvailable,
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvoError>;
