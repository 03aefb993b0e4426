use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}, line {line}: {message}")]
    MalformedFile {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("validation failed for material ids {ids:?}: {reason}")]
    Validation { ids: Vec<u32>, reason: String },

    #[error("catalog is empty")]
    EmptyCatalog,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("could not pack {count} particles of radius {radius} after {restarts} restarts")]
    PackingInfeasible {
        count: usize,
        radius: f64,
        restarts: usize,
    },

    #[error("degenerate material at element {element}: {reason}")]
    DegenerateMaterial { element: usize, reason: String },

    #[error(
        "linear solver did not converge after {iterations} iterations (relative residual {residual:e})"
    )]
    SolverDiverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("bulk modulus undefined for a traceless strain")]
    UndefinedBulkModulus,

    #[error("incompatible weights: {0}")]
    IncompatibleWeights(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },

    #[error("guidance failed at sampling step {step}: {source}")]
    GuidanceStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("all {0} chains of the batch failed")]
    AllChainsFailed(usize),

    #[error("evaluation failed: {0}")]
    EvaluationFailed(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse error classes, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Validation,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::MalformedFile { .. }
            | Error::Validation { .. }
            | Error::EmptyCatalog
            | Error::IncompatibleWeights(_)
            | Error::Io { .. }
            | Error::Json { .. } => ErrorClass::Validation,
            Error::GuidanceStep { source, .. } => source.class(),
            _ => ErrorClass::Numerical,
        }
    }
}
