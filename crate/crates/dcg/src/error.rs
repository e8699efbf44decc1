use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by measure construction, quantization, graph validation,
/// and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid source: {0}")]
    InvalidSource(String),

    #[error("quantile integration failed: {0}")]
    QuantileIntegration(String),

    #[error("invalid graph:\n{}", .0.join("\n"))]
    InvalidGraph(Vec<String>),

    #[error("path count for source '{source_id}' exceeds cap {cap}")]
    PathOverflow { source_id: String, cap: u64 },

    #[error("node '{node}': {reason}")]
    NodeUnsupported { node: String, reason: String },

    #[error("joint atom count {atoms} at node '{node}' exceeds cap {cap}")]
    AtomCapExceeded { node: String, atoms: u128, cap: u64 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("graph json: {0}")]
    GraphJson(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
