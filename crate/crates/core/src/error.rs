use thiserror::Error;

/// Errors raised by the operator toolkit.
#[derive(Debug, Error)]
pub enum RetoError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid base {0}: must be greater than 1")]
    InvalidBase(f64),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite gradient in parameter `{name}` (element {index})")]
    NonFiniteGradient { name: String, index: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: u64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate channel `{0}`: standard deviation below 1e-12")]
    DegenerateChannel(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RetoError>;
