#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use canonical_bpe::bpe::fixtures::toy3;
use canonical_bpe::canonicality::CanonicalityOracle;
use canonical_bpe::parallel::stream_rng;
use canonical_bpe::token_lm::{random_canonical_corpus, train_ngram, NGramLM};
use canonical_bpe::{BaseSpec, MergeFormat, TokenId, TokenString, Vocabulary};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The GPT-2 merge list, loaded once per test binary.
pub fn gpt2() -> Arc<Vocabulary> {
    static VOCAB: OnceLock<Arc<Vocabulary>> = OnceLock::new();
    VOCAB
        .get_or_init(|| {
            let text = std::fs::read_to_string(fixture("gpt2/vocab.bpe")).unwrap();
            Arc::new(Vocabulary::from_merges(&text, &BaseSpec::ByteLevel, MergeFormat::ByteLevel).unwrap())
        })
        .clone()
}

pub fn toy_oracle() -> Arc<CanonicalityOracle> {
    Arc::new(CanonicalityOracle::new(Arc::new(toy3())))
}

/// Bigram model over the toy vocabulary trained on a seeded canonical corpus.
pub fn toy_model(seed: u64, alpha: f64) -> NGramLM {
    let v = toy3();
    let corpus = random_canonical_corpus(&v, &mut stream_rng(seed, 0), 200, 6);
    train_ngram(&corpus, &v, 2, alpha).unwrap()
}

/// Every token string over `n` tokens with length at most `max_len`.
pub fn all_strings(n: u32, max_len: usize) -> Vec<TokenString> {
    let mut out = vec![TokenString::new()];
    let mut frontier = vec![Vec::<TokenId>::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..n {
                let mut e = s.clone();
                e.push(TokenId(t));
                out.push(TokenString(e.clone()));
                next.push(e);
            }
        }
        frontier = next;
    }
    out
}

pub fn ids(v: &[u32]) -> Vec<TokenId> {
    v.iter().copied().map(TokenId).collect()
}
