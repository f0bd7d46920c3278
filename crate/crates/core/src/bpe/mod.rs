//! Byte-pair encoding: vocabulary, encoder/decoder, canonicalization and
//! derivation trees.

mod derivation;
mod encode;
pub mod reference;
mod vocab;

use std::fmt;
use std::ops::Deref;

pub use derivation::DerivationTree;
pub use vocab::{BaseSpec, MergeFormat, Vocabulary};

/// Identifier of a token in a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

/// Priority of a merge pair: lower fires first. Pairs that are not merges
/// have [`Rank::INFINITY`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rank(pub u32);

impl Rank {
    pub const INFINITY: Rank = Rank(u32::MAX);

    pub fn is_finite(self) -> bool {
        self != Rank::INFINITY
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_finite() {
            write!(f, "{}", self.0)
        } else {
            f.write_str("∞")
        }
    }
}

/// A string of tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenString(pub Vec<TokenId>);

impl TokenString {
    pub fn new() -> Self {
        TokenString(Vec::new())
    }

    pub fn from_ids(ids: &[u32]) -> Self {
        TokenString(ids.iter().copied().map(TokenId).collect())
    }

    pub fn ids(&self) -> Vec<u32> {
        self.0.iter().map(|t| t.0).collect()
    }

    pub fn push(&mut self, token: TokenId) {
        self.0.push(token);
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenString {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenString {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenString(ids)
    }
}

impl FromIterator<TokenId> for TokenString {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        TokenString(iter.into_iter().collect())
    }
}

impl fmt::Display for TokenString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Small built-in vocabularies.
pub mod fixtures {
    use super::{BaseSpec, MergeFormat, Vocabulary};

    /// Merge list of the three-merge toy vocabulary over `{a, b, c}`.
    pub const TOY3_MERGES: &str = "a b\nc c\nab c\n";

    /// `Σ = {a, b, c}` with merges `(a,b)`, `(c,c)`, `(ab,c)`; token ids
    /// `a=0 b=1 c=2 ab=3 cc=4 abc=5`.
    pub fn toy3() -> Vocabulary {
        Vocabulary::from_merges(
            TOY3_MERGES,
            &BaseSpec::Explicit(b"abc".to_vec()),
            MergeFormat::Escaped,
        )
        .expect("toy vocabulary is well formed")
    }

    /// A single-byte vocabulary with no merges; every string is canonical.
    pub fn single_a() -> Vocabulary {
        Vocabulary::from_merges("", &BaseSpec::Explicit(b"a".to_vec()), MergeFormat::Escaped)
            .expect("empty merge list is well formed")
    }
}
