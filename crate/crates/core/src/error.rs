use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("outer ratio {requested} is not an integer split of width {width}; nearest representable: {below} and {above}")]
    UnrepresentableRatio {
        requested: String,
        width: usize,
        below: String,
        above: String,
    },

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: usize, vocab: usize },

    #[error("no eligible targets: {0}")]
    Empty(String),

    #[error("undefined contribution ratio: both clamped increment sums are zero")]
    UndefinedRatio,

    #[error(
        "alignment refused for {run}: residual {residual:.6} exceeds threshold {threshold:.6}"
    )]
    AlignmentRefused {
        run: String,
        residual: f64,
        threshold: f64,
    },

    #[error("training diverged at step {step}: dev loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
