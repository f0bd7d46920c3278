use std::collections::HashMap;
use std::fmt::Write;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use sha2::{Digest, Sha256};

use super::{DerivationTree, Rank, TokenId};
use crate::error::VocabError;
use crate::escape;

/// How the base alphabet is specified when loading a merge list.
///
/// The order of the alphabet fixes the ids of the base tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BaseSpec {
    /// Inclusive byte range in numeric order.
    Range(u8, u8),
    /// Explicit list of bytes, in the given order.
    Explicit(Vec<u8>),
    /// All 256 bytes in GPT-2 byte-level order.
    ByteLevel,
}

impl BaseSpec {
    pub fn bytes(&self) -> Result<Vec<u8>, VocabError> {
        let bytes = match self {
            BaseSpec::Range(lo, hi) => {
                if lo > hi {
                    return Err(VocabError::BadBaseSpec(format!("empty range {lo}-{hi}")));
                }
                (*lo..=*hi).collect()
            }
            BaseSpec::Explicit(bytes) => bytes.clone(),
            BaseSpec::ByteLevel => escape::byte_level_order().to_vec(),
        };
        let mut seen = [false; 256];
        for &b in &bytes {
            if std::mem::replace(&mut seen[b as usize], true) {
                return Err(VocabError::BadBaseSpec(format!("byte 0x{b:02x} listed twice")));
            }
        }
        Ok(bytes)
    }
}

impl FromStr for BaseSpec {
    type Err = VocabError;

    /// Accepts `byte-level`, `LO-HI` (decimal or `0x` hex) or `bytes:ESCAPED`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VocabError::BadBaseSpec(s.to_string());
        if s == "byte-level" {
            return Ok(BaseSpec::ByteLevel);
        }
        if let Some(list) = s.strip_prefix("bytes:") {
            return escape::unescape(list).map(BaseSpec::Explicit).ok_or_else(bad);
        }
        let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
        let parse = |t: &str| match t.strip_prefix("0x") {
            Some(hex) => u8::from_str_radix(hex, 16).ok(),
            None => t.parse::<u8>().ok(),
        };
        Ok(BaseSpec::Range(parse(lo).ok_or_else(bad)?, parse(hi).ok_or_else(bad)?))
    }
}

/// Encoding of the subword fields of a merge file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeFormat {
    /// Hex-escaped bytes (`\xNN`), as produced by [`escape::escape`].
    #[default]
    Escaped,
    /// GPT-2 printable byte-level characters (`Ġ` for space, ...).
    ByteLevel,
}

impl FromStr for MergeFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "escaped" => Ok(MergeFormat::Escaped),
            "byte-level" => Ok(MergeFormat::ByteLevel),
            _ => Err(format!("unknown merge format {s:?} (expected escaped|byte-level)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Merge {
    pub left: TokenId,
    pub right: TokenId,
    pub merged: TokenId,
}

/// A BPE tokenizer definition: base alphabet, ordered merge list and the
/// token inventory derived from them.
///
/// Immutable after construction apart from the derivation cache, whose
/// entries are written once and never change.
#[derive(Debug)]
pub struct Vocabulary {
    base: Vec<u8>,
    base_token: [Option<TokenId>; 256],
    subwords: Vec<Vec<u8>>,
    lookup: HashMap<Vec<u8>, TokenId>,
    merges: Vec<Merge>,
    pair_rank: HashMap<(TokenId, TokenId), (Rank, TokenId)>,
    max_subword_len: usize,
    pub(super) derivations: Vec<OnceLock<Result<Arc<DerivationTree>, usize>>>,
}

impl Vocabulary {
    /// Builds a vocabulary from a base alphabet and merge pairs given as byte
    /// strings. `lines[i]` is the source line of merge `i`, used in errors.
    fn build(
        base: Vec<u8>,
        pairs: Vec<(Vec<u8>, Vec<u8>)>,
        lines: &[usize],
    ) -> Result<Self, VocabError> {
        let mut base_token = [None; 256];
        let mut subwords = Vec::with_capacity(base.len() + pairs.len());
        let mut lookup = HashMap::with_capacity(base.len() + pairs.len());
        for (i, &b) in base.iter().enumerate() {
            let id = TokenId(i as u32);
            base_token[b as usize] = Some(id);
            subwords.push(vec![b]);
            lookup.insert(vec![b], id);
        }
        let offset = base.len() as u32;
        let mut merges = Vec::with_capacity(pairs.len());
        let mut pair_rank = HashMap::with_capacity(pairs.len());
        for (i, (left, right)) in pairs.into_iter().enumerate() {
            let line = lines.get(i).copied().unwrap_or(i + 1);
            let find = |s: &Vec<u8>| {
                lookup.get(s).copied().ok_or_else(|| VocabError::UnknownSubword {
                    line,
                    subword: escape::escape(s),
                })
            };
            let (l, r) = (find(&left)?, find(&right)?);
            if pair_rank.contains_key(&(l, r)) {
                return Err(VocabError::DuplicateMerge {
                    line,
                    left: escape::escape(&left),
                    right: escape::escape(&right),
                });
            }
            let mut joined = left;
            joined.extend_from_slice(&right);
            let merged = match lookup.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = TokenId(subwords.len() as u32);
                    subwords.push(joined.clone());
                    lookup.insert(joined, id);
                    id
                }
            };
            let rank = Rank(offset + i as u32);
            pair_rank.insert((l, r), (rank, merged));
            merges.push(Merge { left: l, right: r, merged });
        }
        let max_subword_len = subwords.iter().map(Vec::len).max().unwrap_or(0);
        let derivations = (0..subwords.len()).map(|_| OnceLock::new()).collect();
        Ok(Vocabulary {
            base,
            base_token,
            subwords,
            lookup,
            merges,
            pair_rank,
            max_subword_len,
            derivations,
        })
    }

    /// Builds a vocabulary from raw byte pairs.
    pub fn from_pairs(base: &BaseSpec, pairs: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self, VocabError> {
        Self::build(base.bytes()?, pairs, &[])
    }

    /// Parses a merge list: one pair per line, two whitespace-separated
    /// subword fields. Blank lines are skipped, as are lines starting with `#`
    /// before the first merge.
    pub fn from_merges(text: &str, base: &BaseSpec, format: MergeFormat) -> Result<Self, VocabError> {
        let mut pairs = Vec::new();
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            // `#` lines are comments only in the header: merges such as
            // `# #` start with the same character.
            if raw.trim().is_empty() || (pairs.is_empty() && raw.starts_with('#')) {
                continue;
            }
            let fields: Vec<&str> = raw.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(VocabError::MalformedLine { line, found: fields.len() });
            }
            let decode = |field: &str| {
                let bytes = match format {
                    MergeFormat::Escaped => escape::unescape(field),
                    MergeFormat::ByteLevel => escape::from_byte_level(field),
                };
                bytes.ok_or_else(|| VocabError::BadEscape { line, field: field.to_string() })
            };
            pairs.push((decode(fields[0])?, decode(fields[1])?));
            lines.push(line);
        }
        Self::build(base.bytes()?, pairs, &lines)
    }

    /// Number of tokens `|Δ|`.
    pub fn len(&self) -> usize {
        self.subwords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subwords.is_empty()
    }

    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// The base alphabet in rank order.
    pub fn base_alphabet(&self) -> &[u8] {
        &self.base
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.subwords.len() as u32).map(TokenId)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token.index() < self.subwords.len()
    }

    /// The subword `κ(token)`.
    pub fn subword(&self, token: TokenId) -> Result<&[u8], VocabError> {
        self.subwords
            .get(token.index())
            .map(Vec::as_slice)
            .ok_or(VocabError::UnknownTokenId(token))
    }

    /// The token whose subword is `bytes`.
    pub fn token_of(&self, bytes: &[u8]) -> Option<TokenId> {
        self.lookup.get(bytes).copied()
    }

    pub fn base_token(&self, byte: u8) -> Option<TokenId> {
        self.base_token[byte as usize]
    }

    pub fn is_base(&self, token: TokenId) -> bool {
        self.subwords.get(token.index()).is_some_and(|s| s.len() == 1)
    }

    pub fn max_subword_len(&self) -> usize {
        self.max_subword_len
    }

    /// Rank of the merge pair `(left, right)`, or infinity.
    pub fn pair_rank(&self, left: TokenId, right: TokenId) -> Rank {
        self.pair_rank.get(&(left, right)).map_or(Rank::INFINITY, |&(r, _)| r)
    }

    /// Rank and result of the merge pair `(left, right)`.
    pub fn merge_of(&self, left: TokenId, right: TokenId) -> Option<(Rank, TokenId)> {
        self.pair_rank.get(&(left, right)).copied()
    }

    /// Rank of a base token: its position in the base alphabet.
    pub fn base_rank(&self, token: TokenId) -> Option<Rank> {
        self.is_base(token).then_some(Rank(token.0))
    }

    /// Merge pairs in priority order as `(left, right, merged)`.
    pub fn merges(&self) -> impl Iterator<Item = (TokenId, TokenId, TokenId)> + '_ {
        self.merges.iter().map(|m| (m.left, m.right, m.merged))
    }

    /// Short hex digest identifying the token inventory and merge order.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.base.len() as u64).to_le_bytes());
        hasher.update(&self.base);
        for m in &self.merges {
            hasher.update(m.left.0.to_le_bytes());
            hasher.update(m.right.0.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .take(8)
            .fold(String::new(), |mut s, b| {
                write!(s, "{b:02x}").unwrap();
                s
            })
    }

    /// The `subword<TAB>id` mapping, one token per line, subwords escaped.
    pub fn to_mapping(&self) -> String {
        let mut out = String::new();
        for (id, sw) in self.subwords.iter().enumerate() {
            writeln!(out, "{}\t{id}", escape::escape(sw)).unwrap();
        }
        out
    }

    /// Compares against a `subword<TAB>id` mapping and returns the lines
    /// (1-based) whose id disagrees with this vocabulary, plus the number of
    /// tokens of this vocabulary absent from the mapping.
    pub fn check_mapping(&self, text: &str) -> Result<(Vec<usize>, usize), VocabError> {
        let mut mismatched = Vec::new();
        let mut seen = vec![false; self.len()];
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| VocabError::MalformedMapping { line: idx + 1, reason: reason.into() };
            let (sw, id) = line.rsplit_once('\t').ok_or_else(|| bad("missing tab"))?;
            let id: u32 = id.parse().map_err(|_| bad("id is not an integer"))?;
            let bytes = escape::unescape(sw).ok_or_else(|| bad("bad escape"))?;
            match self.token_of(&bytes) {
                Some(t) if t.0 == id => seen[t.index()] = true,
                _ => mismatched.push(idx + 1),
            }
        }
        Ok((mismatched, seen.iter().filter(|s| !**s).count()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::fixtures::toy3;

    #[test]
    fn toy3_ids_and_ranks() {
        let v = toy3();
        let names: Vec<&[u8]> = v.tokens().map(|t| v.subword(t).unwrap()).collect();
        assert_eq!(names, vec![&b"a"[..], b"b", b"c", b"ab", b"cc", b"abc"]);
        let t = |s: &[u8]| v.token_of(s).unwrap();
        assert_eq!(v.pair_rank(t(b"a"), t(b"b")), Rank(3));
        assert_eq!(v.pair_rank(t(b"c"), t(b"c")), Rank(4));
        assert_eq!(v.pair_rank(t(b"ab"), t(b"c")), Rank(5));
        assert_eq!(v.pair_rank(t(b"b"), t(b"c")), Rank::INFINITY);
        assert_eq!(v.base_rank(t(b"c")), Some(Rank(2)));
        assert_eq!(v.base_rank(t(b"ab")), None);
    }

    #[test]
    fn empty_merge_list() {
        let v = Vocabulary::from_merges("", &BaseSpec::Explicit(b"a".to_vec()), MergeFormat::Escaped).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.num_merges(), 0);
    }

    #[test]
    fn header_comments_and_blank_lines_are_skipped() {
        let text = "#version: 0.2\n# second header line\na b\n\n";
        let v = Vocabulary::from_merges(text, &BaseSpec::Range(b'a', b'b'), MergeFormat::Escaped).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn hash_lines_after_the_header_are_merges() {
        let text = "#version: 0.2\na b\n# #\n";
        let v = Vocabulary::from_merges(text, &BaseSpec::Explicit(b"ab#".to_vec()), MergeFormat::Escaped).unwrap();
        assert_eq!(v.num_merges(), 2);
        assert_eq!(v.token_of(b"##"), Some(TokenId(4)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "a b\na b c\n";
        let err = Vocabulary::from_merges(text, &BaseSpec::Range(b'a', b'c'), MergeFormat::Escaped).unwrap_err();
        assert_eq!(err, VocabError::MalformedLine { line: 2, found: 3 });
    }

    #[test]
    fn merge_with_unknown_subword() {
        let text = "ab c\na b\n";
        let err = Vocabulary::from_merges(text, &BaseSpec::Range(b'a', b'c'), MergeFormat::Escaped).unwrap_err();
        assert!(matches!(err, VocabError::UnknownSubword { line: 1, .. }), "{err:?}");
        let err = Vocabulary::from_merges("a z\n", &BaseSpec::Range(b'a', b'c'), MergeFormat::Escaped).unwrap_err();
        assert!(matches!(err, VocabError::UnknownSubword { line: 1, .. }));
    }

    #[test]
    fn duplicate_merge_is_an_error() {
        let err = Vocabulary::from_merges("a b\na b\n", &BaseSpec::Range(b'a', b'b'), MergeFormat::Escaped)
            .unwrap_err();
        assert!(matches!(err, VocabError::DuplicateMerge { line: 2, .. }));
    }

    #[test]
    fn two_merges_with_the_same_result_share_a_token() {
        let v = Vocabulary::from_merges("a b\nb c\nab c\na bc\n", &BaseSpec::Range(b'a', b'c'), MergeFormat::Escaped)
            .unwrap();
        assert_eq!(v.len(), 6);
        let abc = v.token_of(b"abc").unwrap();
        let (a, bc) = (v.token_of(b"a").unwrap(), v.token_of(b"bc").unwrap());
        assert_eq!(v.merge_of(a, bc), Some((Rank(6), abc)));
    }

    #[test]
    fn base_spec_parsing() {
        assert_eq!("0-255".parse::<BaseSpec>().unwrap(), BaseSpec::Range(0, 255));
        assert_eq!("0x61-0x63".parse::<BaseSpec>().unwrap(), BaseSpec::Range(b'a', b'c'));
        assert_eq!("bytes:ab\\x20".parse::<BaseSpec>().unwrap(), BaseSpec::Explicit(b"ab ".to_vec()));
        assert_eq!("byte-level".parse::<BaseSpec>().unwrap(), BaseSpec::ByteLevel);
        assert!("x".parse::<BaseSpec>().is_err());
        assert!(BaseSpec::Explicit(b"aa".to_vec()).bytes().is_err());
    }

    #[test]
    fn mapping_round_trip() {
        let v = toy3();
        let text = v.to_mapping();
        assert_eq!(v.check_mapping(&text).unwrap(), (vec![], 0));
        assert_eq!(v.check_mapping("ab\t4\n").unwrap(), (vec![1], 6));
    }

    #[test]
    fn fingerprint_depends_on_merge_order() {
        let a = Vocabulary::from_merges("a b\nb a\n", &BaseSpec::Range(b'a', b'b'), MergeFormat::Escaped).unwrap();
        let b = Vocabulary::from_merges("b a\na b\n", &BaseSpec::Range(b'a', b'b'), MergeFormat::Escaped).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(toy3().fingerprint(), toy3().fingerprint());
    }
}
