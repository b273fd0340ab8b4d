use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("ensemble needs at least 2 members, got {0}")]
    InsufficientEnsemble(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("all log-likelihoods are -inf, weights cannot be normalized")]
    DegenerateWeights,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid observation block: {0}")]
    InvalidBlock(String),

    #[error("time step {dt} s violates the CFL bound {limit} s")]
    StepSize { dt: f64, limit: f64 },

    #[error("model state blew up at grid point {index}")]
    Blowup { index: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io: {0}")]
    Io(String),

    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid-parameter",
            Error::InsufficientEnsemble(_) => "insufficient-ensemble",
            Error::Shape(_) => "shape",
            Error::DegenerateWeights => "degenerate-weights",
            Error::Numerical(_) => "numerical",
            Error::InvalidBlock(_) => "invalid-block",
            Error::StepSize { .. } => "step-size",
            Error::Blowup { .. } => "numerical-blowup",
            Error::InvalidInput(_) => "invalid-input",
            Error::Io(_) => "io",
            Error::Config { .. } => "config",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
