use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no client updates to aggregate")]
    EmptyUpdates,

    #[error("invalid client weights: {0}")]
    InvalidWeights(String),

    #[error("client {client} changed the frozen A matrix of layer {layer}")]
    FrozenViolation { client: String, layer: String },

    #[error("strategy {0} requires a uniform LoRA rank across clients")]
    MixedRanks(&'static str),

    #[error("coefficient solver diverged at step {step}")]
    SolverDiverged { step: usize },

    #[error("brute-force grid of {evaluations} points exceeds the tractability guard")]
    IntractableInstance { evaluations: f64 },

    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("invalid task spec: {0}")]
    InvalidSpec(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("local training diverged for client {client} in round {round}")]
    DivergenceDetected { client: usize, round: usize },

    #[error("empty test set: {0}")]
    EmptyTestSet(String),

    #[error("invalid compression spec: {0}")]
    InvalidCompression(String),

    #[error("missing artifacts in {}", .0.display())]
    MissingArtifacts(PathBuf),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    ConfigValidation { field: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Whether this error stems from a numeric failure at run time (as
    /// opposed to bad input or configuration).
    pub fn is_numeric_failure(&self) -> bool {
        matches!(
            self.root(),
            Error::SolverDiverged { .. }
                | Error::DivergenceDetected { .. }
                | Error::NoConvergence { .. }
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(
            self.root(),
            Error::ConfigParse { .. } | Error::ConfigValidation { .. }
        )
    }
}
