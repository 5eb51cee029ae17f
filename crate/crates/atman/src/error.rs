//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A softmax row whose entries are all -inf has no valid distribution.
    #[error("degenerate softmax row {row}: all entries are -inf")]
    DegenerateRow { row: usize },

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token id outside the vocabulary, or an untokenizable symbol.
    #[error("unknown symbol {symbol:?}")]
    UnknownSymbol { symbol: String },

    /// Token id out of range for the vocabulary.
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },

    /// Sequence longer than the model's maximum.
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    /// Task generation could not find admissible values within the retry budget.
    #[error("vocabulary overflow: no admissible instance after {retries} retries (seed {seed})")]
    VocabularyOverflow { retries: usize, seed: u64 },

    /// Malformed or unreadable checkpoint container.
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// Unknown or malformed key in a run configuration file.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
