use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{Rank, TokenId, TokenString, Vocabulary};
use crate::error::VocabError;

const NONE: usize = usize::MAX;

struct Slot {
    token: TokenId,
    prev: usize,
    next: usize,
}

impl Vocabulary {
    /// Maps each byte to its base token.
    pub(super) fn base_tokens(&self, chars: &[u8]) -> Result<Vec<TokenId>, VocabError> {
        chars
            .iter()
            .enumerate()
            .map(|(offset, &byte)| {
                self.base_token(byte)
                    .ok_or(VocabError::ByteOutOfAlphabet { byte, offset })
            })
            .collect()
    }

    /// Applies merges to a token sequence until none applies. At every step
    /// the lowest-rank pair fires at its leftmost occurrence.
    ///
    /// `on_merge(left_slot, right_slot, merged)` is called for each merge;
    /// slot indices are positions in `start` and a merged symbol keeps the
    /// slot of its left part. Returns the surviving slots in order.
    pub(super) fn merge_to_fixpoint(
        &self,
        start: &[TokenId],
        mut on_merge: impl FnMut(usize, usize, TokenId),
    ) -> Vec<(usize, TokenId)> {
        let n = start.len();
        let mut slots: Vec<Slot> = start
            .iter()
            .enumerate()
            .map(|(i, &token)| Slot {
                token,
                prev: if i == 0 { NONE } else { i - 1 },
                next: if i + 1 == n { NONE } else { i + 1 },
            })
            .collect();
        let mut alive = vec![true; n];
        let mut heap: BinaryHeap<Reverse<(Rank, usize, TokenId, TokenId)>> = BinaryHeap::new();
        for i in 1..n {
            let (l, r) = (start[i - 1], start[i]);
            let rank = self.pair_rank(l, r);
            if rank.is_finite() {
                heap.push(Reverse((rank, i - 1, l, r)));
            }
        }
        while let Some(Reverse((_, pos, l, r))) = heap.pop() {
            if !alive[pos] || slots[pos].token != l {
                continue;
            }
            let next = slots[pos].next;
            if next == NONE || slots[next].token != r {
                continue;
            }
            let (_, merged) = self.merge_of(l, r).expect("queued pairs are merges");
            on_merge(pos, next, merged);
            alive[next] = false;
            let after = slots[next].next;
            slots[pos].token = merged;
            slots[pos].next = after;
            if after != NONE {
                slots[after].prev = pos;
                let rank = self.pair_rank(merged, slots[after].token);
                if rank.is_finite() {
                    heap.push(Reverse((rank, pos, merged, slots[after].token)));
                }
            }
            let before = slots[pos].prev;
            if before != NONE {
                let rank = self.pair_rank(slots[before].token, merged);
                if rank.is_finite() {
                    heap.push(Reverse((rank, before, slots[before].token, merged)));
                }
            }
        }
        let mut out = Vec::new();
        let mut cur = if n == 0 { NONE } else { 0 };
        while cur != NONE {
            out.push((cur, slots[cur].token));
            cur = slots[cur].next;
        }
        out
    }

    /// The BPE encoder `τ`.
    pub fn encode(&self, chars: &[u8]) -> Result<TokenString, VocabError> {
        let start = self.base_tokens(chars)?;
        Ok(self
            .merge_to_fixpoint(&start, |_, _, _| {})
            .into_iter()
            .map(|(_, t)| t)
            .collect())
    }

    /// The decoder `κ`: concatenation of subwords.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u8>, VocabError> {
        let mut out = Vec::new();
        for &t in tokens {
            out.extend_from_slice(self.subword(t)?);
        }
        Ok(out)
    }

    /// `encode(decode(tokens))`.
    pub fn canonicalize(&self, tokens: &[TokenId]) -> Result<TokenString, VocabError> {
        self.encode(&self.decode(tokens)?)
    }

    /// All segmentations of `chars` into subwords of this vocabulary,
    /// canonical or not, sorted lexicographically by id sequence.
    pub fn encodings_of(&self, chars: &[u8], limit: usize) -> Result<Vec<TokenString>, VocabError> {
        self.base_tokens(chars)?;
        let mut out = Vec::new();
        let mut current = Vec::new();
        self.segment(chars, 0, &mut current, &mut out, limit)?;
        out.sort();
        Ok(out)
    }

    fn segment(
        &self,
        chars: &[u8],
        pos: usize,
        current: &mut Vec<TokenId>,
        out: &mut Vec<TokenString>,
        limit: usize,
    ) -> Result<(), VocabError> {
        if pos == chars.len() {
            if out.len() == limit {
                return Err(VocabError::LimitExceeded { limit });
            }
            out.push(TokenString(current.clone()));
            return Ok(());
        }
        let longest = self.max_subword_len().min(chars.len() - pos);
        for len in 1..=longest {
            if let Some(t) = self.token_of(&chars[pos..pos + len]) {
                current.push(t);
                self.segment(chars, pos + len, current, out, limit)?;
                current.pop();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::fixtures::toy3;
    use crate::bpe::reference;
    use crate::bpe::{BaseSpec, MergeFormat};
    use proptest::prelude::*;

    fn ids(v: &Vocabulary, names: &[&str]) -> TokenString {
        names.iter().map(|n| v.token_of(n.as_bytes()).unwrap()).collect()
    }

    #[test]
    fn encode_examples() {
        let v = toy3();
        assert_eq!(v.encode(b"").unwrap(), TokenString::new());
        assert_eq!(v.encode(b"abcc").unwrap(), ids(&v, &["ab", "cc"]));
        assert_eq!(v.encode(b"abc").unwrap(), ids(&v, &["abc"]));
        assert_eq!(v.encode(b"ccc").unwrap(), ids(&v, &["cc", "c"]));
    }

    #[test]
    fn equal_rank_overlaps_resolve_leftmost() {
        let v = Vocabulary::from_merges("a a\n", &BaseSpec::Explicit(b"a".to_vec()), MergeFormat::Escaped).unwrap();
        assert_eq!(v.encode(b"aaa").unwrap(), ids(&v, &["aa", "a"]));
        assert_eq!(reference::encode(&v, b"aaa").unwrap(), ids(&v, &["aa", "a"]));
    }

    #[test]
    fn byte_outside_alphabet() {
        let v = toy3();
        assert_eq!(v.encode(b"abd"), Err(VocabError::ByteOutOfAlphabet { byte: b'd', offset: 2 }));
    }

    #[test]
    fn decode_examples() {
        let v = toy3();
        assert_eq!(v.decode(&[]).unwrap(), b"");
        assert_eq!(v.decode(&ids(&v, &["ab", "c"])).unwrap(), b"abc");
        assert_eq!(v.decode(&[TokenId(6)]), Err(VocabError::UnknownTokenId(TokenId(6))));
    }

    #[test]
    fn canonicalize_examples() {
        let v = toy3();
        assert_eq!(v.canonicalize(&ids(&v, &["ab", "c"])).unwrap(), ids(&v, &["abc"]));
        assert_eq!(v.canonicalize(&ids(&v, &["abc"])).unwrap(), ids(&v, &["abc"]));
    }

    #[test]
    fn encodings_examples() {
        let v = toy3();
        let got = v.encodings_of(b"abc", 100).unwrap();
        let mut want = vec![ids(&v, &["a", "b", "c"]), ids(&v, &["ab", "c"]), ids(&v, &["abc"])];
        want.sort();
        assert_eq!(got, want);
        assert_eq!(v.encodings_of(b"", 10).unwrap(), vec![TokenString::new()]);
        assert_eq!(v.encodings_of(b"cc", 10).unwrap(), vec![ids(&v, &["c", "c"]), ids(&v, &["cc"])]);
        assert_eq!(v.encodings_of(b"abc", 2), Err(VocabError::LimitExceeded { limit: 2 }));
    }

    /// Segmentation count by dynamic programming over prefix lengths.
    fn count_segmentations(v: &Vocabulary, chars: &[u8]) -> usize {
        let mut ways = vec![0usize; chars.len() + 1];
        ways[0] = 1;
        for end in 1..=chars.len() {
            for start in 0..end {
                if v.token_of(&chars[start..end]).is_some() {
                    ways[end] += ways[start];
                }
            }
        }
        ways[chars.len()]
    }

    fn toy_string() -> impl Strategy<Value = Vec<u8>> {
        proptest::collection::vec(prop_oneof![Just(b'a'), Just(b'b'), Just(b'c')], 0..14)
    }

    proptest! {
        #[test]
        fn fast_encoder_matches_reference(chars in toy_string()) {
            let v = toy3();
            prop_assert_eq!(v.encode(&chars).unwrap(), reference::encode(&v, &chars).unwrap());
        }

        #[test]
        fn encodings_agree_with_dp_count(chars in toy_string()) {
            let v = toy3();
            let all = v.encodings_of(&chars, 1 << 20).unwrap();
            prop_assert_eq!(all.len(), count_segmentations(&v, &chars));
            let canonical = v.encode(&chars).unwrap();
            let fixed: Vec<_> = all.iter().filter(|d| v.canonicalize(d).unwrap() == **d).collect();
            prop_assert_eq!(fixed, vec![&canonical]);
        }
    }
}
