use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum PalError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("label {label} out of range for {classes} classes")]
    Index { label: usize, classes: usize },

    #[error("insufficient capacity: {0}")]
    Capacity(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("infeasible generation: {0}")]
    Feasibility(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, PalError>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> PalError {
    PalError::Dimension { op, detail: detail.into() }
}
