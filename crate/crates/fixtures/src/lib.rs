//! Test-only firmware fixtures with exact ground truth.

pub mod asm;
pub mod compiled;
pub mod expr;
pub mod firmware;

pub use asm::{assemble, ByteKind, ListingLine, Program};

#[derive(Debug, thiserror::Error)]
pub enum AsmError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("syntax: {0}")]
    Syntax(String),
    #[error("line {0}: {1}")]
    Line(usize, String),
}
