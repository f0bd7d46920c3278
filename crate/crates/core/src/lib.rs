//! Canonical byte-pair encoding.
//!
//! A BPE encoder only ever produces a sparse subset of all token strings, the
//! *canonical* strings. This crate provides the tokenizer itself, fast tests
//! for canonicality (round-trip, bigram and incremental conflict search), and
//! inference over token-level language models that puts zero probability on
//! noncanonical strings: conditioning (rejection sampling, a locally masked
//! model with importance weights), a trainable masked architecture, and
//! noncanonical-bigram frequency analysis.

pub mod analysis;
pub mod bpe;
pub mod canonicality;
pub mod conditioning;
pub mod construction;
pub mod error;
pub mod escape;
pub mod parallel;
pub mod token_lm;

pub use bpe::{BaseSpec, DerivationTree, MergeFormat, Rank, TokenId, TokenString, Vocabulary};
