use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    /// Input data violates a dataset invariant. `line` is the 1-based line in
    /// the source file when known.
    #[error("{}", fmt_validation(.line, .column, .message))]
    Validation {
        line: Option<usize>,
        column: Option<String>,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("model did not converge: {0}")]
    Convergence(String),

    #[error("separation detected: {0}")]
    Separation(String),

    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("calibration failed: {0}")]
    Calibration(String),
}

fn fmt_validation(line: &Option<usize>, column: &Option<String>, message: &str) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!("line {l}, column '{c}': {message}"),
        (Some(l), None) => format!("line {l}: {message}"),
        (None, Some(c)) => format!("column '{c}': {message}"),
        (None, None) => message.to_string(),
    }
}

impl Error {
    pub(crate) fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            line: None,
            column: None,
            message: message.into(),
        }
    }

    pub(crate) fn validation_at(
        line: usize,
        column: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Validation {
            line: Some(line),
            column: Some(column.into()),
            message: message.into(),
        }
    }

    /// Copy of the error (I/O and CSV errors keep only their message).
    pub fn duplicate(&self) -> Self {
        match self {
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), e.to_string())),
            Error::Csv(e) => Error::Config(format!("CSV error: {e}")),
            Error::Config(m) => Error::Config(m.clone()),
            Error::Validation { line, column, message } => Error::Validation {
                line: *line,
                column: column.clone(),
                message: message.clone(),
            },
            Error::Domain(m) => Error::Domain(m.clone()),
            Error::Convergence(m) => Error::Convergence(m.clone()),
            Error::Separation(m) => Error::Separation(m.clone()),
            Error::RankDeficient(m) => Error::RankDeficient(m.clone()),
            Error::Degenerate(m) => Error::Degenerate(m.clone()),
            Error::Calibration(m) => Error::Calibration(m.clone()),
        }
    }

    /// True for failures of an iterative fit (non-convergence, separation,
    /// singular design).
    pub fn is_fit_failure(&self) -> bool {
        matches!(
            self,
            Error::Convergence(_) | Error::Separation(_) | Error::RankDeficient(_)
        )
    }
}
