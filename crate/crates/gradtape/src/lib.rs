//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Graph`] is an append-only tape of
//! operations, a [`Tensor`] is a row-major value that may point at a node on
//! that tape, and [`Tensor::backward`] walks the tape in reverse insertion
//! order. Everything is 64-bit floats and single-threaded per graph, which
//! keeps forward evaluation bit-reproducible and makes gradient checking
//! against central finite differences practical.

mod check;
mod error;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use error::{Result, TapeError};
pub use tensor::{BinaryKind, Graph, ReduceKind, Tensor, UnaryKind};
