//! Direct transcriptions of the BPE rewrite loop.
//!
//! These scan the merge list in priority order on every step and are
//! quadratic or worse. They exist as oracles for the fast encoder and the
//! derivation cache; do not use them on long inputs.

use std::sync::Arc;

use super::{DerivationTree, TokenId, TokenString, Vocabulary};
use crate::error::VocabError;

/// One rewrite step: the first merge in list order that matches anywhere,
/// applied at its leftmost match. `None` when no merge applies.
fn rewrite(vocab: &Vocabulary, tokens: &[TokenId]) -> Option<Vec<TokenId>> {
    for (left, right, merged) in vocab.merges() {
        let (ls, rs) = (vocab.subword(left).ok()?, vocab.subword(right).ok()?);
        for n in 0..tokens.len().saturating_sub(1) {
            let pair = (vocab.subword(tokens[n]).ok()?, vocab.subword(tokens[n + 1]).ok()?);
            if pair == (ls, rs) {
                let mut out = tokens[..n].to_vec();
                out.push(merged);
                out.extend_from_slice(&tokens[n + 2..]);
                return Some(out);
            }
        }
    }
    None
}

/// Reference encoder: rewrite to fixpoint.
pub fn encode(vocab: &Vocabulary, chars: &[u8]) -> Result<TokenString, VocabError> {
    let mut tokens = vocab.base_tokens(chars)?;
    while let Some(next) = rewrite(vocab, &tokens) {
        tokens = next;
    }
    Ok(TokenString(tokens))
}

/// Reference canonicalizer built on [`encode`].
pub fn canonicalize(vocab: &Vocabulary, tokens: &[TokenId]) -> Result<TokenString, VocabError> {
    encode(vocab, &vocab.decode(tokens)?)
}

/// Reference derivation: the tree-building variant of the rewrite loop.
/// Returns the derivation forest of `chars`.
pub fn derivation_forest(vocab: &Vocabulary, chars: &[u8]) -> Result<Vec<Arc<DerivationTree>>, VocabError> {
    let mut forest: Vec<Arc<DerivationTree>> = vocab
        .base_tokens(chars)?
        .into_iter()
        .map(|t| Arc::new(DerivationTree::Leaf(t)))
        .collect();
    'outer: loop {
        for (left, right, merged) in vocab.merges() {
            let (ls, rs) = (vocab.subword(left)?, vocab.subword(right)?);
            for n in 0..forest.len().saturating_sub(1) {
                let pair = (vocab.subword(forest[n].token())?, vocab.subword(forest[n + 1].token())?);
                if pair == (ls, rs) {
                    let node = DerivationTree::Node {
                        token: merged,
                        left: forest[n].clone(),
                        right: forest[n + 1].clone(),
                    };
                    forest.splice(n..n + 2, [Arc::new(node)]);
                    continue 'outer;
                }
            }
        }
        return Ok(forest);
    }
}
