use thiserror::Error;

/// Errors produced by tensor operations and the differentiation tape.
#[derive(Debug, Clone, Error)]
pub enum TapeError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// An input value lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// The differentiation graph is missing or inconsistent.
    #[error("graph error: {0}")]
    Graph(String),
}

pub type Result<T> = std::result::Result<T, TapeError>;
