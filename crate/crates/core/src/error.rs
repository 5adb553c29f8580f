use thiserror::Error;

/// Errors raised anywhere in the training and evaluation kit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate feature: row {row} has L2 norm {norm:e}")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("expected a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("out of range: {0}")]
    Range(String),

    #[error("attention trace covers {tokens} tokens but relevance needs the full image of {expected}")]
    TraceProvenance { tokens: usize, expected: usize },

    #[error("batch error: {0}")]
    Batch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("noise injection error: {0}")]
    Noise(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged: component `{component}` is {value} at epoch {epoch}, step {step}")]
    Divergence {
        component: String,
        value: f64,
        epoch: usize,
        step: usize,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
