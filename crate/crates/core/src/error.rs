use thiserror::Error;

/// Errors raised across the crate. Each variant maps to a stable `kind` string
/// used in CLI diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("synthesis error: {message} (residual {residual:e})")]
    Synthesis { message: String, residual: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("descriptor fit failed: {0}")]
    Descriptor(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("input missing: {0}")]
    InputMissing(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Validation(_) => "validation",
            Error::Synthesis { .. } => "synthesis",
            Error::Degenerate(_) => "degenerate",
            Error::Descriptor(_) => "descriptor",
            Error::Fit(_) => "fit",
            Error::InputMissing(_) => "input-missing",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
