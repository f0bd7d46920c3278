use thiserror::Error;

use crate::bpe::TokenId;

/// Errors raised while building or using a vocabulary.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabError {
    #[error("line {line}: expected two subword fields, found {found}")]
    MalformedLine { line: usize, found: usize },
    #[error("line {line}: invalid escape in field {field:?}")]
    BadEscape { line: usize, field: String },
    #[error("line {line}: subword {subword:?} is not derivable from earlier merges or base bytes")]
    UnknownSubword { line: usize, subword: String },
    #[error("line {line}: duplicate merge ({left:?}, {right:?})")]
    DuplicateMerge { line: usize, left: String, right: String },
    #[error("invalid base alphabet: {0}")]
    BadBaseSpec(String),
    #[error("byte 0x{byte:02x} at offset {offset} is outside the base alphabet")]
    ByteOutOfAlphabet { byte: u8, offset: usize },
    #[error("unknown token id {0}")]
    UnknownTokenId(TokenId),
    #[error("unknown subword {0:?}")]
    UnknownToken(String),
    #[error("token {0} violates the canonical-token assumption: its derivation is a forest of {1} trees")]
    NoncanonicalToken(TokenId, usize),
    #[error("more than {limit} segmentations")]
    LimitExceeded { limit: usize },
    #[error("vocabulary mapping line {line}: {reason}")]
    MalformedMapping { line: usize, reason: String },
}

/// Errors raised by the canonicality layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanonicalityError {
    #[error("token {0} is excluded (not canonical on its own)")]
    ExcludedToken(TokenId),
    #[error("prefix is not canonical at position {0}")]
    PrefixNotCanonical(usize),
    #[error("override line {line}: {reason}")]
    MalformedOverrideLine { line: usize, reason: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Errors raised by language models, samplers and estimators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("smoothing constant must be positive and finite, got {0}")]
    InvalidSmoothing(f64),
    #[error("enumeration of {count} strings exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },
    #[error("next-token distribution has zero mass after masking")]
    ZeroNormalizer,
    #[error("sampling reached max_len {0} without EOS")]
    MaxLenExceeded(usize),
    #[error("no canonical sample after {0} attempts")]
    AttemptsExhausted(usize),
    #[error("all importance weights are zero")]
    AllZeroWeights,
    #[error("corpus string {index} has zero probability under the model")]
    InfiniteLoss { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("model file line {line}: {reason}")]
    MalformedModel { line: usize, reason: String },
    #[error("model was built for a different vocabulary")]
    VocabularyMismatch,
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Canonicality(#[from] CanonicalityError),
}
