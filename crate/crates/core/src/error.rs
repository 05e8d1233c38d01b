use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced in layer {layer} ({stage})")]
    Numeric { layer: usize, stage: &'static str },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unknown token {0:?}")]
    Lookup(String),

    #[error("template structure error: {0}")]
    Structure(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("only {found} of {wanted} prompts answered correctly after {attempts} attempts")]
    InsufficientAccuracy {
        wanted: usize,
        found: usize,
        attempts: usize,
    },

    #[error("exhaustive enumeration needs {needed} forward positions, cap is {cap}")]
    Budget { needed: u64, cap: u64 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error("no cell reaches {threshold:.4}; best is {best}")]
    Selection { threshold: f64, best: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Format { .. } => "format",
            Error::Lookup(_) => "lookup",
            Error::Structure(_) => "structure",
            Error::Argument(_) => "argument",
            Error::InsufficientAccuracy { .. } => "insufficient-accuracy",
            Error::Budget { .. } => "budget",
            Error::Integrity(_) => "integrity",
            Error::Missing(_) => "missing",
            Error::Selection { .. } => "selection",
            Error::Divergence { .. } => "divergence",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
