use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` not found")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: {message}")]
    InvalidValue {
        row: usize,
        column: String,
        message: String,
    },

    #[error("duplicate patient id `{id}` at row {row}")]
    DuplicateId { id: String, row: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("formula `{formula}`: {message}")]
    Formula { formula: String, message: String },

    #[error("unbound identifier `{0}`")]
    Unbound(String),

    #[error("division by zero while evaluating `{0}`")]
    DivisionByZero(String),

    #[error("regime index names do not match: expected {expected:?}, got {found:?}")]
    NameMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },

    #[error("rank-deficient design: column {column}{} depends on earlier columns", label.as_ref().map(|l| format!(" (`{l}`)")).unwrap_or_default())]
    RankDeficient {
        column: usize,
        label: Option<String>,
    },

    #[error("all regression weights are zero")]
    ZeroWeights,

    #[error("logistic regression needs both classes among positively weighted rows")]
    SingleClass,

    #[error("logistic regression did not converge: {0}")]
    NonConvergence(String),

    #[error("positivity violation at psi {psi:?}: no adherent weight at stage {stage}")]
    Positivity { psi: Vec<f64>, stage: usize },

    #[error("covariance matrix could not be factorized: {0}")]
    Conditioning(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient { .. }
            | Error::ZeroWeights
            | Error::SingleClass
            | Error::NonConvergence(_)
            | Error::Positivity { .. }
            | Error::Conditioning(_)
            | Error::DivisionByZero(_) => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn with_context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
