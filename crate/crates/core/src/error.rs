use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a documented constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A sequence does not fit the model's position budget.
    #[error("length error: sequence of {len} tokens exceeds limit {limit}")]
    Length { len: usize, limit: usize },

    /// Two arrays that must be congruent are not.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite or otherwise unusable numeric value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Corpus or report content is malformed or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// A run finished but its result misses a required threshold.
    #[error("gate not met: {0}")]
    Gate(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An error raised while executing a specific training step.
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_step(step: usize, source: Error) -> Self {
        Error::AtStep {
            step,
            source: Box::new(source),
        }
    }

    /// Innermost error, skipping step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" | "length" => 2,
            "data" | "io" | "shape" => 3,
            "numeric" => 4,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::Config(_) => "config",
            Error::Length { .. } => "length",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Data(_) => "data",
            Error::Io { .. } => "io",
            Error::Gate(_) => "gate",
            Error::AtStep { .. } => unreachable!(),
        }
    }
}
