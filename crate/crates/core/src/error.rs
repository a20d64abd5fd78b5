use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("forward cache does not belong to this network: {0}")]
    Cache(String),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("non-finite value in {path}")]
    Numeric { path: String },

    #[error("critic is outside its norm budget: kappa = {kappa}, budget = {budget}")]
    Infeasible { kappa: f64, budget: f64 },

    #[error("problem size {got} exceeds the limit of {limit}")]
    TooLarge { got: usize, limit: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(path: impl Into<String>) -> Self {
        Error::Numeric { path: path.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix a numeric error's parameter path with training context.
    pub fn within(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::Numeric { path } => Error::Numeric {
                path: format!("{}/{}", ctx.as_ref(), path),
            },
            other => other,
        }
    }

    /// Tag with the pipeline stage. An error that already carries a stage
    /// keeps the innermost one.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
