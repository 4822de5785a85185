use std::fmt;

/// Errors surfaced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform for the named primitive.
    Shape { op: &'static str, detail: String },
    /// A non-finite value appeared where finite arithmetic was required.
    NonFinite { context: String },
    /// Matrix is singular to working precision.
    Singular { context: String },
    /// An adaptive iteration failed to converge.
    NoConvergence { context: String },
    /// Invalid argument or configuration.
    Invalid { context: String },
    /// I/O or (de)serialization failure.
    Io { context: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    pub fn singular(context: impl Into<String>) -> Self {
        Error::Singular { context: context.into() }
    }

    pub fn no_convergence(context: impl Into<String>) -> Self {
        Error::NoConvergence { context: context.into() }
    }

    pub fn invalid(context: impl Into<String>) -> Self {
        Error::Invalid { context: context.into() }
    }

    pub fn io(context: impl Into<String>) -> Self {
        Error::Io { context: context.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::Singular { context } => write!(f, "singular matrix: {context}"),
            Error::NoConvergence { context } => write!(f, "no convergence: {context}"),
            Error::Invalid { context } => write!(f, "invalid argument: {context}"),
            Error::Io { context } => write!(f, "io error: {context}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
