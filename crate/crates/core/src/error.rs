use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate direction: column {column} of {context} has norm {norm:e}")]
    DegenerateDirection { context: String, column: usize, norm: f64 },

    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric overflow in transformer block {block}: {stage}")]
    NumericOverflow { block: usize, stage: &'static str },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at round {round}, node {node}, step {step}: {reason}")]
    Training {
        round: usize,
        node: usize,
        step: usize,
        reason: String,
    },

    #[error("round {round}, node {node}: {source}")]
    Node {
        round: usize,
        node: usize,
        source: Box<Error>,
    },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
