//! Membership tests for the set of canonical token strings.
//!
//! A token string is canonical iff every adjacent pair is canonical, and the
//! canonical set is closed under prefixes. Checking a bigram only needs the
//! right spine of the left token's derivation and the left spine of the
//! right token's derivation, so extending a canonical prefix by one token
//! costs O(spine length) regardless of the prefix length.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, RwLock};

use crate::bpe::{Rank, TokenId, Vocabulary};
use crate::error::{CanonicalityError, VocabError};
use crate::escape;

/// The earliest straddling merge that proves a bigram noncanonical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conflict {
    /// Subtree on the right spine of the left token.
    pub left: TokenId,
    /// Subtree on the left spine of the right token.
    pub right: TokenId,
    pub left_yield: Vec<u8>,
    pub right_yield: Vec<u8>,
    pub rank: Rank,
}

impl fmt::Display for Conflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "⟨{}|{}⟩@{}",
            escape::escape(&self.left_yield),
            escape::escape(&self.right_yield),
            self.rank
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Override {
    Allow,
    Deny,
}

/// Forced verdicts for specific bigrams, keyed by `(left, right)`.
pub type Overrides = HashMap<(TokenId, TokenId), Override>;

/// Parses an override table: lines of `left_id right_id allow|deny`.
/// Blank lines and lines starting with `#` are ignored.
pub fn load_overrides(text: &str, vocab: &Vocabulary) -> Result<Overrides, CanonicalityError> {
    let mut out = Overrides::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let bad = |reason: String| CanonicalityError::MalformedOverrideLine { line, reason };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        let [left, right, verdict] = fields[..] else {
            return Err(bad(format!("expected 3 fields, found {}", fields.len())));
        };
        let id = |s: &str| -> Result<TokenId, CanonicalityError> {
            let t = TokenId(s.parse().map_err(|_| bad(format!("{s:?} is not a token id")))?);
            if vocab.contains(t) {
                Ok(t)
            } else {
                Err(VocabError::UnknownTokenId(t).into())
            }
        };
        let verdict = match verdict {
            "allow" => Override::Allow,
            "deny" => Override::Deny,
            other => return Err(bad(format!("verdict {other:?} is not allow|deny"))),
        };
        out.insert((id(left)?, id(right)?), verdict);
    }
    Ok(out)
}

/// Renders an override table in the format read by [`load_overrides`],
/// sorted by id pair.
pub fn format_overrides(overrides: &Overrides) -> String {
    let sorted: BTreeMap<_, _> = overrides.iter().collect();
    sorted
        .into_iter()
        .map(|((l, r), v)| {
            let v = match v {
                Override::Allow => "allow",
                Override::Deny => "deny",
            };
            format!("{l} {r} {v}\n")
        })
        .collect()
}

/// Tokens whose own subword does not encode back to them.
pub fn validate_vocabulary(vocab: &Vocabulary) -> Vec<TokenId> {
    vocab
        .tokens()
        .filter(|&t| vocab.derivation(t).is_err())
        .collect()
}

/// Allowed next outcomes after a prefix: one flag per token, then EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    allowed: Vec<bool>,
}

impl TokenMask {
    pub fn all(num_tokens: usize) -> Self {
        TokenMask { allowed: vec![true; num_tokens + 1] }
    }

    pub fn num_tokens(&self) -> usize {
        self.allowed.len() - 1
    }

    pub fn token(&self, t: TokenId) -> bool {
        t.index() < self.num_tokens() && self.allowed[t.index()]
    }

    pub fn eos(&self) -> bool {
        self.allowed[self.num_tokens()]
    }

    /// Flags indexed by outcome: tokens first, EOS last.
    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn set(&mut self, index: usize, allowed: bool) {
        self.allowed[index] = allowed;
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }
}

/// Memoized bigram canonicality relation with overrides and excluded tokens.
///
/// Precedence: override, then exclusion, then the conflict search.
#[derive(Debug)]
pub struct CanonicalityOracle {
    vocab: Arc<Vocabulary>,
    memo: RwLock<HashMap<(TokenId, TokenId), bool>>,
    overrides: Overrides,
    excluded: Vec<bool>,
}

impl CanonicalityOracle {
    /// Builds an oracle. Tokens violating the canonical-token assumption are
    /// soft-excluded: still decodable, never allowed as extensions.
    pub fn new(vocab: Arc<Vocabulary>) -> Self {
        let mut excluded = vec![false; vocab.len()];
        for t in validate_vocabulary(&vocab) {
            excluded[t.index()] = true;
        }
        CanonicalityOracle {
            vocab,
            memo: RwLock::new(HashMap::new()),
            overrides: Overrides::new(),
            excluded,
        }
    }

    pub fn with_overrides(mut self, overrides: Overrides) -> Self {
        self.overrides = overrides;
        self
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn overrides(&self) -> &Overrides {
        &self.overrides
    }

    pub fn excluded(&self) -> Vec<TokenId> {
        self.excluded
            .iter()
            .enumerate()
            .filter(|(_, e)| **e)
            .map(|(i, _)| TokenId(i as u32))
            .collect()
    }

    pub fn is_excluded(&self, t: TokenId) -> bool {
        self.excluded.get(t.index()).copied().unwrap_or(true)
    }

    /// Number of memoized bigram verdicts.
    pub fn memo_len(&self) -> usize {
        self.memo.read().unwrap().len()
    }

    /// `canonicalize(tokens) == tokens`.
    pub fn round_trip_canonical(&self, tokens: &[TokenId]) -> bool {
        self.vocab
            .canonicalize(tokens)
            .is_ok_and(|c| c[..] == *tokens)
    }

    /// Searches the right spine of `left` against the left spine of `right`
    /// for the first pair whose merge would fire before both of the merges
    /// that currently hold its halves in place.
    pub fn find_conflict(&self, left: TokenId, right: TokenId) -> Result<Option<Conflict>, CanonicalityError> {
        let derive = |t: TokenId| {
            self.vocab.derivation(t).map_err(|e| match e {
                VocabError::NoncanonicalToken(t, _) => CanonicalityError::ExcludedToken(t),
                other => other.into(),
            })
        };
        let (left_tree, right_tree) = (derive(left)?, derive(right)?);
        let vocab = &*self.vocab;
        let mut d = &*left_tree;
        let mut left_parent = Rank::INFINITY;
        loop {
            let mut d2 = &*right_tree;
            let mut right_parent = Rank::INFINITY;
            loop {
                let rank = vocab.pair_rank(d.token(), d2.token());
                if left_parent > rank && rank <= right_parent {
                    return Ok(Some(Conflict {
                        left: d.token(),
                        right: d2.token(),
                        left_yield: vocab.subword(d.token())?.to_vec(),
                        right_yield: vocab.subword(d2.token())?.to_vec(),
                        rank,
                    }));
                }
                match d2.children() {
                    None => break,
                    Some((l, _)) => {
                        right_parent = d2.merge_rank(vocab).unwrap();
                        d2 = l;
                    }
                }
            }
            match d.children() {
                None => break,
                Some((_, r)) => {
                    left_parent = d.merge_rank(vocab).unwrap();
                    d = r;
                }
            }
        }
        Ok(None)
    }

    /// Bigram canonicality, memoized.
    pub fn bigram_canonical(&self, left: TokenId, right: TokenId) -> bool {
        if let Some(v) = self.overrides.get(&(left, right)) {
            return *v == Override::Allow;
        }
        if self.is_excluded(left) || self.is_excluded(right) {
            return false;
        }
        if let Some(&v) = self.memo.read().unwrap().get(&(left, right)) {
            return v;
        }
        let verdict = matches!(self.find_conflict(left, right), Ok(None));
        self.memo.write().unwrap().insert((left, right), verdict);
        verdict
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), CanonicalityError> {
        for &t in tokens {
            if !self.vocab.contains(t) {
                return Err(VocabError::UnknownTokenId(t).into());
            }
            if self.is_excluded(t) {
                return Err(CanonicalityError::ExcludedToken(t));
            }
        }
        Ok(())
    }

    /// Canonicality via the bigram test.
    pub fn is_canonical(&self, tokens: &[TokenId]) -> Result<bool, CanonicalityError> {
        self.check_tokens(tokens)?;
        Ok(tokens.windows(2).all(|w| self.bigram_canonical(w[0], w[1])))
    }

    /// Whether `prefix · next` is canonical, given that `prefix` is.
    ///
    /// Only the last bigram is examined. A noncanonical final bigram of the
    /// prefix is reported as [`CanonicalityError::PrefixNotCanonical`]; other
    /// precondition violations go undetected.
    pub fn extend_canonical(&self, prefix: &[TokenId], next: TokenId) -> Result<bool, CanonicalityError> {
        match prefix {
            [] => Ok(self.vocab.contains(next) && !self.is_excluded(next)),
            [only] => {
                self.check_tokens(&[*only])?;
                Ok(self.bigram_canonical(*only, next))
            }
            [.., a, b] => {
                if !self.bigram_canonical(*a, *b) {
                    return Err(CanonicalityError::PrefixNotCanonical(prefix.len() - 1));
                }
                Ok(self.bigram_canonical(*b, next))
            }
        }
    }

    /// Mask of outcomes that keep `prefix` canonical. EOS is always allowed.
    pub fn allowed_next(&self, prefix: &[TokenId]) -> Result<TokenMask, CanonicalityError> {
        let n = self.vocab.len();
        let mut mask = TokenMask::all(n);
        match prefix.last() {
            None => {
                for (i, e) in self.excluded.iter().enumerate() {
                    mask.set(i, !e);
                }
            }
            Some(&last) => {
                if prefix.len() >= 2 && !self.bigram_canonical(prefix[prefix.len() - 2], last) {
                    return Err(CanonicalityError::PrefixNotCanonical(prefix.len() - 1));
                }
                self.check_tokens(&[last])?;
                for t in self.vocab.tokens() {
                    mask.set(t.index(), self.bigram_canonical(last, t));
                }
            }
        }
        Ok(mask)
    }

    /// Bigrams that occur in strings known to be canonical (e.g. produced
    /// by the deployed tokenizer, pre-tokenizer included) but that this
    /// oracle rejects, with their occurrence counts. Candidates for `allow`
    /// overrides.
    pub fn false_negatives<'a>(
        &self,
        corpus: impl IntoIterator<Item = &'a [TokenId]>,
    ) -> Vec<((TokenId, TokenId), usize)> {
        let mut counts: BTreeMap<(TokenId, TokenId), usize> = BTreeMap::new();
        for tokens in corpus {
            for w in tokens.windows(2) {
                if self.vocab.contains(w[0]) && self.vocab.contains(w[1]) && !self.bigram_canonical(w[0], w[1]) {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
        }
        counts.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::fixtures::toy3;
    use crate::bpe::{BaseSpec, MergeFormat, TokenString};

    fn oracle() -> CanonicalityOracle {
        CanonicalityOracle::new(Arc::new(toy3()))
    }

    fn t(o: &CanonicalityOracle, s: &str) -> TokenId {
        o.vocab().token_of(s.as_bytes()).unwrap()
    }

    fn ts(o: &CanonicalityOracle, names: &[&str]) -> Vec<TokenId> {
        names.iter().map(|n| t(o, n)).collect()
    }

    #[test]
    fn find_conflict_examples() {
        let o = oracle();
        let c = o.find_conflict(t(&o, "ab"), t(&o, "c")).unwrap().unwrap();
        assert_eq!((c.left_yield.as_slice(), c.right_yield.as_slice(), c.rank), (&b"ab"[..], &b"c"[..], Rank(5)));
        assert_eq!(c.to_string(), "⟨ab|c⟩@5");
        let c = o.find_conflict(t(&o, "abc"), t(&o, "c")).unwrap().unwrap();
        assert_eq!((c.left_yield.as_slice(), c.right_yield.as_slice(), c.rank), (&b"c"[..], &b"c"[..], Rank(4)));
        assert_eq!(o.find_conflict(t(&o, "b"), t(&o, "c")).unwrap(), None);
    }

    #[test]
    fn bigram_examples() {
        let o = oracle();
        assert!(o.bigram_canonical(t(&o, "b"), t(&o, "b")));
        assert!(!o.bigram_canonical(t(&o, "a"), t(&o, "b")));
        assert!(!o.bigram_canonical(t(&o, "c"), t(&o, "cc")));
    }

    #[test]
    fn overrides_take_precedence() {
        let v = Arc::new(toy3());
        let ov = load_overrides("# comment\n0 1 allow\n1 1 deny\n", &v).unwrap();
        let o = CanonicalityOracle::new(v).with_overrides(ov.clone());
        assert!(o.bigram_canonical(TokenId(0), TokenId(1)));
        assert!(!o.bigram_canonical(TokenId(1), TokenId(1)));
        assert_eq!(load_overrides(&format_overrides(&ov), o.vocab()).unwrap(), ov);
    }

    #[test]
    fn override_parse_errors() {
        let v = toy3();
        assert!(load_overrides("", &v).unwrap().is_empty());
        assert!(matches!(
            load_overrides("0 1\n", &v),
            Err(CanonicalityError::MalformedOverrideLine { line: 1, .. })
        ));
        assert!(matches!(
            load_overrides("0 1 maybe\n", &v),
            Err(CanonicalityError::MalformedOverrideLine { line: 1, .. })
        ));
        assert_eq!(
            load_overrides("0 9 deny\n", &v),
            Err(CanonicalityError::Vocab(VocabError::UnknownTokenId(TokenId(9))))
        );
    }

    #[test]
    fn is_canonical_examples() {
        let o = oracle();
        assert!(o.is_canonical(&ts(&o, &["b", "ab"])).unwrap());
        assert!(!o.is_canonical(&ts(&o, &["c", "cc"])).unwrap());
        assert!(o.is_canonical(&[]).unwrap());
        for tok in o.vocab().tokens() {
            assert!(o.is_canonical(&[tok]).unwrap());
        }
        assert!(o.round_trip_canonical(&[]));
        assert!(!o.round_trip_canonical(&ts(&o, &["ab", "c"])));
    }

    #[test]
    fn extend_examples() {
        let o = oracle();
        assert!(!o.extend_canonical(&ts(&o, &["ab"]), t(&o, "c")).unwrap());
        assert!(o.extend_canonical(&ts(&o, &["cc"]), t(&o, "c")).unwrap());
        assert!(o.extend_canonical(&[], t(&o, "abc")).unwrap());
        assert_eq!(
            o.extend_canonical(&ts(&o, &["a", "b"]), t(&o, "c")),
            Err(CanonicalityError::PrefixNotCanonical(1))
        );
    }

    #[test]
    fn allowed_next_rows_match_round_trip() {
        let o = oracle();
        let empty = o.allowed_next(&[]).unwrap();
        assert_eq!(empty.count(), 7);
        for prefix in [vec!["ab"], vec!["c"], vec!["b", "abc"]] {
            let prefix = ts(&o, &prefix);
            let mask = o.allowed_next(&prefix).unwrap();
            assert!(mask.eos());
            for next in o.vocab().tokens() {
                let mut s = prefix.clone();
                s.push(next);
                assert_eq!(mask.token(next), o.round_trip_canonical(&s), "{prefix:?} + {next}");
            }
        }
        let c_row = o.allowed_next(&ts(&o, &["c"])).unwrap();
        assert!(!c_row.token(t(&o, "c")));
        assert!(!c_row.token(t(&o, "cc")));
        let ab_row = o.allowed_next(&ts(&o, &["ab"])).unwrap();
        let denied: Vec<_> = o.vocab().tokens().filter(|&x| !ab_row.token(x)).collect();
        assert_eq!(denied, vec![t(&o, "c")]);
    }

    #[test]
    fn validate_examples() {
        assert!(validate_vocabulary(&toy3()).is_empty());
        assert!(validate_vocabulary(&crate::bpe::fixtures::single_a()).is_empty());
        let v = Vocabulary::from_merges("b c\na b\nab c\n", &BaseSpec::Range(b'a', b'c'), MergeFormat::Escaped)
            .unwrap();
        let abc = v.token_of(b"abc").unwrap();
        assert_eq!(validate_vocabulary(&v), vec![abc]);
        let o = CanonicalityOracle::new(Arc::new(v));
        assert_eq!(o.excluded(), vec![abc]);
        let a = o.vocab().token_of(b"a").unwrap();
        assert!(!o.extend_canonical(&[], abc).unwrap());
        assert!(!o.bigram_canonical(a, abc));
        assert_eq!(o.is_canonical(&[abc]), Err(CanonicalityError::ExcludedToken(abc)));
        assert_eq!(o.find_conflict(a, abc), Err(CanonicalityError::ExcludedToken(abc)));
        assert!(!o.allowed_next(&[]).unwrap().token(abc));
    }

    #[test]
    fn false_negative_scan() {
        let o = oracle();
        let corpus = [TokenString(ts(&o, &["ab", "c", "b"])), TokenString(ts(&o, &["ab", "c"]))];
        let found = o.false_negatives(corpus.iter().map(|s| &s[..]));
        assert_eq!(found, vec![((t(&o, "ab"), t(&o, "c")), 2)]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn toy_tokens() -> impl Strategy<Value = Vec<TokenId>> {
            proptest::collection::vec((0u32..6).prop_map(TokenId), 0..12)
        }

        /// Merge lists over `{a, b, c}`: each step joins two existing
        /// subwords into a new one.
        fn merge_list() -> impl Strategy<Value = Vec<(usize, usize)>> {
            proptest::collection::vec((0usize..64, 0usize..64), 1..12)
        }

        fn build(picks: &[(usize, usize)]) -> Vocabulary {
            let mut subwords: Vec<Vec<u8>> = vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()];
            let mut pairs = Vec::new();
            for &(i, j) in picks {
                let (l, r) = (subwords[i % subwords.len()].clone(), subwords[j % subwords.len()].clone());
                let joined = [l.as_slice(), r.as_slice()].concat();
                if !subwords.contains(&joined) {
                    subwords.push(joined);
                    pairs.push((l, r));
                }
            }
            Vocabulary::from_pairs(&BaseSpec::Explicit(b"abc".to_vec()), pairs).unwrap()
        }

        proptest! {
            #[test]
            fn bigram_test_equals_round_trip(tokens in toy_tokens()) {
                let o = oracle();
                prop_assert_eq!(o.is_canonical(&tokens).unwrap(), o.round_trip_canonical(&tokens));
            }

            #[test]
            fn canonicalize_is_an_idempotent_canonical_retokenization(tokens in toy_tokens()) {
                let o = oracle();
                let v = o.vocab();
                let c = v.canonicalize(&tokens).unwrap();
                prop_assert_eq!(v.decode(&c).unwrap(), v.decode(&tokens).unwrap());
                prop_assert_eq!(&v.canonicalize(&c).unwrap(), &c);
                prop_assert!(o.is_canonical(&c).unwrap());
            }

            #[test]
            fn canonical_strings_have_canonical_prefixes(tokens in toy_tokens()) {
                let o = oracle();
                let c = o.vocab().canonicalize(&tokens).unwrap();
                for k in 0..=c.len() {
                    prop_assert!(o.round_trip_canonical(&c[..k]));
                }
            }

            #[test]
            fn string_test_matches_round_trip_on_random_merge_lists(
                picks in merge_list(),
                raw in proptest::collection::vec(0usize..64, 0..10),
            ) {
                let v = Arc::new(build(&picks));
                let o = CanonicalityOracle::new(v.clone());
                let tokens: Vec<TokenId> = raw.iter().map(|i| TokenId((i % v.len()) as u32)).collect();
                match o.is_canonical(&tokens) {
                    Ok(verdict) => prop_assert_eq!(verdict, o.round_trip_canonical(&tokens)),
                    Err(CanonicalityError::ExcludedToken(_)) => prop_assert!(!o.round_trip_canonical(&tokens)),
                    Err(e) => prop_assert!(false, "{}", e),
                }
            }

            #[test]
            fn pair_test_matches_round_trip_on_random_merge_lists(picks in merge_list()) {
                let v = Arc::new(build(&picks));
                let o = CanonicalityOracle::new(v.clone());
                for l in v.tokens() {
                    for r in v.tokens() {
                        let truth = v.canonicalize(&[l, r]).unwrap()[..] == [l, r];
                        prop_assert_eq!(o.bigram_canonical(l, r), truth, "pair ({}, {})", l, r);
                        if !o.is_excluded(l) && !o.is_excluded(r) {
                            prop_assert_eq!(o.find_conflict(l, r).unwrap().is_none(), truth);
                        }
                    }
                }
            }
        }
    }
}
