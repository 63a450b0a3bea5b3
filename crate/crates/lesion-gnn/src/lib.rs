//! Lesion-graph classification engine.
//!
//! Patients are represented as graphs whose nodes are lesions (feature
//! vector + spatial position + anatomical region). Edges come from a
//! symmetric k-nearest-neighbor search over positions and carry Gaussian
//! distance-decay weights. A message-passing network enriches the node
//! features, a self-pruning module scores and keeps the top fraction of
//! nodes, and a sum readout feeds a small MLP head that predicts a binary
//! disease-activity label.
//!
//! Everything runs on a small dense-tensor engine with reverse-mode
//! automatic differentiation ([`tensor`]), so the whole pipeline is
//! differentiable end to end and checkable against finite differences.

pub mod cohort;
pub mod eval;
pub mod graph;
pub mod layers;
pub mod model;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape { op: &'static str, lhs: String, rhs: String },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
