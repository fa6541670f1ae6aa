use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("line {line}: invalid vocabulary token {token:?}: {reason}")]
    InvalidVocabToken {
        line: usize,
        token: String,
        reason: &'static str,
    },

    #[error("line {line}: invalid entity name {name:?}: {reason}")]
    InvalidEntityName {
        line: usize,
        name: String,
        reason: &'static str,
    },

    #[error("entity {0:?} already exists in the catalog")]
    DuplicateEntity(String),

    #[error("entity {name:?} tokenizes identically to existing entity {existing:?}")]
    TokenizationCollision { name: String, existing: String },

    #[error("unknown entity {0:?}")]
    UnknownEntity(String),

    #[error("cannot insert an empty token sequence")]
    EmptySequence,

    #[error("cannot build a trie from an empty set of sequences")]
    EmptyTrie,

    #[error("sequence contains reserved token {0}")]
    ReservedToken(TokenId),

    #[error("trie format: {0}")]
    TrieFormat(String),

    #[error("token sequence is not terminated by EOS")]
    MissingEos,

    #[error("label smoothing must lie in [0, 1), got {0}")]
    SmoothingOutOfRange(f64),

    #[error("smoothing pseudo-count must be positive and finite, got {0}")]
    InvalidAlpha(f64),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("training pair {0} has an empty target")]
    EmptyTarget(usize),

    #[error("scorer format: line {line}: {reason}")]
    ScorerFormat { line: usize, reason: String },

    #[error("markup: {0}")]
    Markup(String),

    #[error("markup text does not reproduce the source once annotations are stripped")]
    SourceMismatch,

    #[error("invalid span: {0}")]
    InvalidSpan(String),

    #[error("mention of {mention} tokens does not fit a context window of {window}")]
    MentionTooLong { mention: usize, window: usize },

    #[error("candidate set is empty")]
    EmptyCandidateSet,

    #[error("{what}: line {line}: {reason}")]
    Dataset {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    Metric(String),
}
