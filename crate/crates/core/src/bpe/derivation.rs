use std::sync::Arc;

use super::{Rank, TokenId, Vocabulary};
use crate::error::VocabError;

/// Binary merge tree recording how BPE builds a token from base bytes.
///
/// Every node carries the token its subtree yields, so `yield` is a table
/// lookup rather than a traversal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DerivationTree {
    Leaf(TokenId),
    Node {
        token: TokenId,
        left: Arc<DerivationTree>,
        right: Arc<DerivationTree>,
    },
}

impl DerivationTree {
    /// The token yielded by this subtree.
    pub fn token(&self) -> TokenId {
        match self {
            DerivationTree::Leaf(t) | DerivationTree::Node { token: t, .. } => *t,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, DerivationTree::Leaf(_))
    }

    pub fn children(&self) -> Option<(&Arc<DerivationTree>, &Arc<DerivationTree>)> {
        match self {
            DerivationTree::Leaf(_) => None,
            DerivationTree::Node { left, right, .. } => Some((left, right)),
        }
    }

    /// Concatenation of leaf subwords.
    pub fn yield_bytes(&self, vocab: &Vocabulary) -> Vec<u8> {
        match self {
            DerivationTree::Leaf(t) => vocab.subword(*t).map(<[u8]>::to_vec).unwrap_or_default(),
            DerivationTree::Node { left, right, .. } => {
                let mut out = left.yield_bytes(vocab);
                out.extend(right.yield_bytes(vocab));
                out
            }
        }
    }

    /// Rank of the merge at this node; `None` for leaves.
    pub fn merge_rank(&self, vocab: &Vocabulary) -> Option<Rank> {
        self.children()
            .map(|(l, r)| vocab.pair_rank(l.token(), r.token()))
    }

    /// Root and its left descendants, root first.
    pub fn left_spine(&self) -> Vec<&DerivationTree> {
        let mut spine = vec![self];
        let mut cur = self;
        while let Some((left, _)) = cur.children() {
            spine.push(left);
            cur = left;
        }
        spine
    }

    /// Root and its right descendants, root first.
    pub fn right_spine(&self) -> Vec<&DerivationTree> {
        let mut spine = vec![self];
        let mut cur = self;
        while let Some((_, right)) = cur.children() {
            spine.push(right);
            cur = right;
        }
        spine
    }

    /// Number of nodes.
    pub fn size(&self) -> usize {
        match self.children() {
            None => 1,
            Some((l, r)) => 1 + l.size() + r.size(),
        }
    }
}

impl Vocabulary {
    /// Derivation forest of `chars` as produced by the tree-building encoder.
    pub fn derivation_forest(&self, chars: &[u8]) -> Result<Vec<Arc<DerivationTree>>, VocabError> {
        let start = self.base_tokens(chars)?;
        let mut trees: Vec<Option<Arc<DerivationTree>>> = start
            .iter()
            .map(|&t| Some(Arc::new(DerivationTree::Leaf(t))))
            .collect();
        let survivors = self.merge_to_fixpoint(&start, |l, r, merged| {
            let left = trees[l].take().expect("live slot");
            let right = trees[r].take().expect("live slot");
            trees[l] = Some(Arc::new(DerivationTree::Node { token: merged, left, right }));
        });
        Ok(survivors
            .into_iter()
            .map(|(slot, _)| trees[slot].take().expect("live slot"))
            .collect())
    }

    /// The canonical derivation of a single token, memoized.
    ///
    /// Fails with [`VocabError::NoncanonicalToken`] when the token's own
    /// subword does not encode back to one token.
    pub fn derivation(&self, token: TokenId) -> Result<Arc<DerivationTree>, VocabError> {
        let cell = self
            .derivations
            .get(token.index())
            .ok_or(VocabError::UnknownTokenId(token))?;
        let entry = cell.get_or_init(|| {
            let chars = self.subword(token).expect("valid id").to_vec();
            let mut forest = self.derivation_forest(&chars).expect("subword within alphabet");
            if forest.len() == 1 {
                Ok(forest.pop().unwrap())
            } else {
                Err(forest.len())
            }
        });
        entry
            .clone()
            .map_err(|n| VocabError::NoncanonicalToken(token, n))
    }
}
