//! Crate-wide error type.

use std::path::PathBuf;

/// Structural defects of a dependency-head array.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TreeError {
    #[error("tree has no root")]
    NoRoot,
    #[error("tree has multiple roots (tokens {first} and {second})")]
    MultipleRoots { first: usize, second: usize },
    #[error("cycle through token {node}")]
    Cycle { node: usize },
    #[error("token {node} has out-of-range parent {parent}")]
    ParentOutOfRange { node: usize, parent: i64 },
    #[error("empty head array")]
    Empty,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid record at line {line}: {reason}")]
    Record { line: usize, reason: String },

    #[error("invalid dependency tree: {0}")]
    Tree(#[from] TreeError),

    #[error("input construction failed: {0}")]
    Input(String),

    #[error("mandatory prefix of {prefix_len} sub-words leaves no room for the path under max_seq_length {max_len}")]
    PrefixTooLong { prefix_len: usize, max_len: usize },

    #[error("tensor {name}: expected shape {expected:?}, found {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("missing tensor {name}")]
    MissingTensor { name: String },

    #[error("non-finite activations at {layer}")]
    NonFinite { layer: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code class for the CLI: each error family maps to a distinct code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } => 2,
            Error::Record { .. } | Error::Tree(_) | Error::Input(_) | Error::PrefixTooLong { .. } => 3,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 4,
            Error::Shape { .. } | Error::MissingTensor { .. } | Error::Checkpoint(_) => 5,
            Error::Eval(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
