use std::fmt;

/// Errors raised by the engine, the fusion algebra and the file formats.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor dimension did not match what the operation requires.
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    /// An argument is outside the domain of the operation.
    InvalidArgument { op: &'static str, reason: String },
    /// Two kernels cannot be collapsed into one.
    Fusion(String),
    /// A graph failed its static check; `node` names the offender.
    Graph { node: String, reason: String },
    /// A serialized model, weights blob or CSV violated its format.
    Format(String),
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            dim,
            expected,
            actual,
        }
    }

    pub(crate) fn graph(node: impl Into<String>, reason: impl fmt::Display) -> Self {
        Error::Graph {
            node: node.into(),
            reason: reason.to_string(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                dim,
                expected,
                actual,
            } => write!(f, "{op}: dimension `{dim}` expected {expected}, got {actual}"),
            Error::InvalidArgument { op, reason } => write!(f, "{op}: {reason}"),
            Error::Fusion(reason) => write!(f, "fusion: {reason}"),
            Error::Graph { node, reason } => write!(f, "node `{node}`: {reason}"),
            Error::Format(reason) => write!(f, "{reason}"),
            Error::Io(reason) => write!(f, "{reason}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
