use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// `1 + lambda` fell to the singularity guard; the tether length reached zero.
    #[error("dynamics singularity: lambda = {lam} (1 + lambda must exceed {guard})")]
    Singularity { lam: f64, guard: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("sequence too short for {context}: need at least {needed}, got {actual}")]
    Length {
        context: &'static str,
        needed: usize,
        actual: usize,
    },

    #[error("matrix logarithm undefined: {0}")]
    LogDomain(String),

    #[error("zero matrix has no spectral normalization")]
    ZeroMatrix,

    #[error("online window not full: {filled}/{capacity}")]
    WindowNotFull { filled: usize, capacity: usize },

    #[error("trajectory {index} has no uncertainty labels")]
    MissingLabels { index: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Stable identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Singularity { .. } => "singularity",
            Error::Shape { .. } => "shape",
            Error::Length { .. } => "length",
            Error::LogDomain(_) => "log_domain",
            Error::ZeroMatrix => "zero_matrix",
            Error::WindowNotFull { .. } => "window_not_full",
            Error::MissingLabels { .. } => "missing_labels",
            Error::Divergence { .. } => "divergence",
            Error::Invalid(_) => "invalid",
            Error::Version { .. } => "version",
            Error::Malformed(_) => "malformed",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_)
            | Error::Shape { .. }
            | Error::Length { .. }
            | Error::MissingLabels { .. }
            | Error::Version { .. }
            | Error::Malformed(_) => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Malformed(e.to_string())
        }
    }
}
