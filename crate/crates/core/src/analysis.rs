//! Expected number of occurrences of each adjacent token pair in a string
//! drawn from a model, and which of those pairs are noncanonical.
//!
//! Estimates are per sampled string. Under a length bound `L`, a truncated
//! draw contributes the pairs of its first `L` tokens, and the exact value
//! is defined for that same truncated process.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::Rng;

use crate::bpe::TokenId;
use crate::canonicality::CanonicalityOracle;
use crate::error::ModelError;
use crate::escape;
use crate::parallel::run_chunked;
use crate::token_lm::{enumerate_distribution, sample, TokenLM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Average of realized pair counts.
    MonteCarlo,
    /// Average of the exact conditional expectation of the next pair at
    /// each sampled position.
    RaoBlackwell,
    Exact,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::MonteCarlo => "mc",
            Estimator::RaoBlackwell => "rb",
            Estimator::Exact => "exact",
        })
    }
}

impl std::str::FromStr for Estimator {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "mc" => Ok(Estimator::MonteCarlo),
            "rb" => Ok(Estimator::RaoBlackwell),
            "exact" => Ok(Estimator::Exact),
            other => Err(ModelError::InvalidArgument(format!("estimator {other:?} is not mc|rb|exact"))),
        }
    }
}

/// Per-pair estimate and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairEstimate {
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigramFrequencyTable {
    pub estimator: Estimator,
    /// Strings sampled; 0 for exact tables.
    pub samples: usize,
    pub seed: Option<u64>,
    pub max_len: usize,
    pub truncated: usize,
    /// Mass beyond `max_len` (exact tables only).
    pub truncation_mass: f64,
    pub entries: BTreeMap<(TokenId, TokenId), PairEstimate>,
}

impl BigramFrequencyTable {
    pub fn get(&self, left: TokenId, right: TokenId) -> f64 {
        self.entries.get(&(left, right)).map_or(0.0, |e| e.mean)
    }

    /// Entries sorted by estimate, largest first; ties by id pair.
    pub fn ranked(&self) -> Vec<((TokenId, TokenId), PairEstimate)> {
        let mut out: Vec<_> = self.entries.iter().map(|(k, v)| (*k, *v)).collect();
        out.sort_by(|a, b| b.1.mean.total_cmp(&a.1.mean).then(a.0.cmp(&b.0)));
        out
    }
}

/// Per-pair sums of per-string values and of their squares.
#[derive(Debug, Clone, Default)]
struct Accumulator {
    n: usize,
    truncated: usize,
    sums: HashMap<(TokenId, TokenId), (f64, f64)>,
}

impl Accumulator {
    fn push(&mut self, per_string: HashMap<(TokenId, TokenId), f64>, truncated: bool) {
        self.n += 1;
        self.truncated += truncated as usize;
        for (pair, x) in per_string {
            let e = self.sums.entry(pair).or_default();
            e.0 += x;
            e.1 += x * x;
        }
    }

    fn merge(&mut self, other: Accumulator) {
        self.n += other.n;
        self.truncated += other.truncated;
        for (pair, (s, q)) in other.sums {
            let e = self.sums.entry(pair).or_default();
            e.0 += s;
            e.1 += q;
        }
    }

    fn into_table(self, estimator: Estimator, seed: Option<u64>, max_len: usize) -> BigramFrequencyTable {
        let n = self.n as f64;
        let entries = self
            .sums
            .into_iter()
            .filter(|(_, (s, _))| *s > 0.0)
            .map(|(pair, (s, q))| {
                let var = if self.n > 1 { ((q - s * s / n) / (n - 1.0)).max(0.0) } else { 0.0 };
                (pair, PairEstimate { mean: s / n, standard_error: (var / n).sqrt() })
            })
            .collect();
        BigramFrequencyTable {
            estimator,
            samples: self.n,
            seed,
            max_len,
            truncated: self.truncated,
            truncation_mass: 0.0,
            entries,
        }
    }
}

fn accumulate<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    model: &M,
    rng: &mut R,
    m: usize,
    max_len: usize,
    estimator: Estimator,
) -> Result<Accumulator, ModelError> {
    let mut acc = Accumulator::default();
    for _ in 0..m {
        let s = sample(model, rng, max_len)?;
        let mut counts: HashMap<(TokenId, TokenId), f64> = HashMap::new();
        match estimator {
            Estimator::MonteCarlo | Estimator::Exact => {
                for w in s.tokens.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += 1.0;
                }
            }
            Estimator::RaoBlackwell => {
                // positions whose following token was drawn and would be kept
                let last = if max_len == 0 { s.tokens.len() } else { s.tokens.len().min(max_len - 1) };
                for t in 1..=last {
                    let dist = model.next_distribution(&s.tokens[..t]);
                    let left = s.tokens[t - 1];
                    for (b, p) in dist.probs()[..dist.num_tokens()].iter().enumerate() {
                        if *p > 0.0 {
                            *counts.entry((left, TokenId(b as u32))).or_default() += p;
                        }
                    }
                }
            }
        }
        acc.push(counts, s.truncated);
    }
    Ok(acc)
}

fn check_m(m: usize) -> Result<(), ModelError> {
    if m == 0 {
        return Err(ModelError::InvalidArgument("at least one sample is needed".into()));
    }
    Ok(())
}

/// Monte Carlo estimate from `m` draws.
pub fn bigram_freq_mc<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    model: &M,
    rng: &mut R,
    m: usize,
    max_len: usize,
) -> Result<BigramFrequencyTable, ModelError> {
    check_m(m)?;
    Ok(accumulate(model, rng, m, max_len, Estimator::MonteCarlo)?.into_table(Estimator::MonteCarlo, None, max_len))
}

/// Rao–Blackwellized estimate from `m` draws. Consumes the RNG exactly as
/// [`bigram_freq_mc`] does, so equal seeds give paired estimates.
pub fn bigram_freq_rb<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    model: &M,
    rng: &mut R,
    m: usize,
    max_len: usize,
) -> Result<BigramFrequencyTable, ModelError> {
    check_m(m)?;
    Ok(accumulate(model, rng, m, max_len, Estimator::RaoBlackwell)?.into_table(Estimator::RaoBlackwell, None, max_len))
}

/// Either sampling estimator over seeded chunks on `workers` threads. The
/// result depends on `seed` and `m` only.
pub fn bigram_freq_parallel<M: TokenLM + ?Sized>(
    model: &M,
    estimator: Estimator,
    seed: u64,
    m: usize,
    max_len: usize,
    workers: usize,
) -> Result<BigramFrequencyTable, ModelError> {
    check_m(m)?;
    if estimator == Estimator::Exact {
        return Err(ModelError::InvalidArgument("the exact table is not sampled".into()));
    }
    let mut acc = Accumulator::default();
    for chunk in run_chunked(seed, m, workers, |rng, k| accumulate(model, rng, k, max_len, estimator)) {
        acc.merge(chunk?);
    }
    Ok(acc.into_table(estimator, Some(seed), max_len))
}

/// Exact expected pair counts by enumerating strings up to `max_len`;
/// truncated prefixes contribute their own pairs.
pub fn exact_bigram_freq<M: TokenLM + ?Sized>(
    model: &M,
    max_len: usize,
    limit: u128,
) -> Result<BigramFrequencyTable, ModelError> {
    let e = enumerate_distribution(model, max_len, limit)?;
    let mut sums: BTreeMap<(TokenId, TokenId), f64> = BTreeMap::new();
    for (s, p) in e.strings.iter().chain(&e.truncated) {
        for w in s.windows(2) {
            *sums.entry((w[0], w[1])).or_default() += p;
        }
    }
    Ok(BigramFrequencyTable {
        estimator: Estimator::Exact,
        samples: 0,
        seed: None,
        max_len,
        truncated: 0,
        truncation_mass: e.truncation_mass,
        entries: sums
            .into_iter()
            .map(|(k, mean)| (k, PairEstimate { mean, standard_error: 0.0 }))
            .collect(),
    })
}

/// A row of the noncanonical-pair report.
#[derive(Debug, Clone, PartialEq)]
pub struct NoncanonicalEntry {
    pub rank: usize,
    pub left: TokenId,
    pub right: TokenId,
    pub left_yield: Vec<u8>,
    pub right_yield: Vec<u8>,
    pub estimate: f64,
}

impl fmt::Display for NoncanonicalEntry {
    /// `rank  left-yield  right-yield  estimate`, tab-separated, yields
    /// hex-escaped, estimate to three significant digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.2e}",
            self.rank,
            escape::escape(&self.left_yield),
            escape::escape(&self.right_yield),
            self.estimate
        )
    }
}

/// The `k` most frequent pairs the oracle rejects.
pub fn report_noncanonical(table: &BigramFrequencyTable, oracle: &CanonicalityOracle, k: usize) -> Vec<NoncanonicalEntry> {
    let vocab = oracle.vocab();
    table
        .ranked()
        .into_iter()
        .filter(|((l, r), e)| e.mean > 0.0 && !oracle.bigram_canonical(*l, *r))
        .take(k)
        .enumerate()
        .map(|(i, ((l, r), e))| NoncanonicalEntry {
            rank: i + 1,
            left: l,
            right: r,
            left_yield: vocab.subword(l).map(<[u8]>::to_vec).unwrap_or_default(),
            right_yield: vocab.subword(r).map(<[u8]>::to_vec).unwrap_or_default(),
            estimate: e.mean,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::fixtures::{single_a, toy3};
    use crate::conditioning::LocalModel;
    use crate::parallel::stream_rng;
    use crate::token_lm::{random_canonical_corpus, train_ngram, NGramLM, NextDistribution, DEFAULT_ENUMERATION_LIMIT};
    use std::sync::Arc;

    /// Emits `[0, 1]` then EOS.
    struct Fixed;
    impl TokenLM for Fixed {
        fn num_tokens(&self) -> usize {
            6
        }
        fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
            let mut p = vec![0.0; 7];
            p[[0, 1, 6][prefix.len().min(2)]] = 1.0;
            NextDistribution::from_probs(p)
        }
    }

    fn pair(a: u32, b: u32) -> (TokenId, TokenId) {
        (TokenId(a), TokenId(b))
    }

    #[test]
    fn deterministic_model() {
        let mc = bigram_freq_mc(&Fixed, &mut stream_rng(0, 0), 10, 0).unwrap();
        let rb = bigram_freq_rb(&Fixed, &mut stream_rng(0, 0), 10, 0).unwrap();
        let ex = exact_bigram_freq(&Fixed, 4, 1000).unwrap();
        for t in [&mc, &rb, &ex] {
            assert_eq!(t.entries.len(), 1);
            assert_eq!(t.get(TokenId(0), TokenId(1)), 1.0);
            assert_eq!(t.entries[&pair(0, 1)].standard_error, 0.0);
        }
    }

    #[test]
    fn geometric_single_token() {
        // uniform over {a, EOS}: E[(len - 1)+] = Σ_{n≥2} (n-1) 2^-(n+1) = 1/2
        let lm = NGramLM::new(&single_a(), 1, 0.1).unwrap();
        let ex = exact_bigram_freq(&lm, 40, DEFAULT_ENUMERATION_LIMIT).unwrap();
        assert!((ex.get(TokenId(0), TokenId(0)) - 0.5).abs() < 1e-9);
        let mc = bigram_freq_parallel(&lm, Estimator::MonteCarlo, 3, 20_000, 0, 2).unwrap();
        let e = mc.entries[&pair(0, 0)];
        assert!((e.mean - 0.5).abs() < 4.0 * e.standard_error);
    }

    #[test]
    fn exact_is_linear_in_mixtures() {
        struct Mix<'a>(&'a NGramLM, &'a NGramLM);
        // A 50/50 mixture of two whole-string distributions, as a prefix model.
        impl TokenLM for Mix<'_> {
            fn num_tokens(&self) -> usize {
                self.0.num_tokens()
            }
            fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
                let pa = crate::token_lm::prefix_log_prob(self.0, prefix).exp();
                let pb = crate::token_lm::prefix_log_prob(self.1, prefix).exp();
                let (da, db) = (self.0.next_distribution(prefix), self.1.next_distribution(prefix));
                let w: Vec<f64> = da.probs().iter().zip(db.probs()).map(|(x, y)| pa * x + pb * y).collect();
                NextDistribution::from_weights(w).unwrap().0
            }
        }
        let v = toy3();
        let a = train_ngram(&random_canonical_corpus(&v, &mut stream_rng(1, 0), 50, 5), &v, 2, 0.3).unwrap();
        let b = train_ngram(&random_canonical_corpus(&v, &mut stream_rng(2, 0), 50, 5), &v, 2, 0.3).unwrap();
        let ta = exact_bigram_freq(&a, 4, DEFAULT_ENUMERATION_LIMIT).unwrap();
        let tb = exact_bigram_freq(&b, 4, DEFAULT_ENUMERATION_LIMIT).unwrap();
        let tm = exact_bigram_freq(&Mix(&a, &b), 4, DEFAULT_ENUMERATION_LIMIT).unwrap();
        for (k, e) in &tm.entries {
            let want = 0.5 * (ta.get(k.0, k.1) + tb.get(k.0, k.1));
            assert!((e.mean - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_model_has_no_noncanonical_pairs() {
        let v = toy3();
        let o = Arc::new(CanonicalityOracle::new(Arc::new(v)));
        let lm = train_ngram(&random_canonical_corpus(o.vocab(), &mut stream_rng(4, 0), 100, 6), o.vocab(), 2, 0.5).unwrap();
        let local = LocalModel::new(&lm, o.clone());
        let rb = bigram_freq_parallel(&local, Estimator::RaoBlackwell, 1, 2000, 8, 2).unwrap();
        let mc = bigram_freq_parallel(&local, Estimator::MonteCarlo, 1, 2000, 8, 2).unwrap();
        let ex = exact_bigram_freq(&local, 4, DEFAULT_ENUMERATION_LIMIT).unwrap();
        for t in [&rb, &mc, &ex] {
            assert!(report_noncanonical(t, &o, 10).is_empty());
        }
        let raw = exact_bigram_freq(&lm, 4, DEFAULT_ENUMERATION_LIMIT).unwrap();
        let report = report_noncanonical(&raw, &o, 3);
        assert_eq!(report.len(), 3);
        assert!(report[0].estimate >= report[1].estimate);
        assert_eq!(report[0].rank, 1);
    }

    #[test]
    fn report_format() {
        let e = NoncanonicalEntry {
            rank: 1,
            left: TokenId(0),
            right: TokenId(1),
            left_yield: b"ri".to_vec(),
            right_yield: b"eros".to_vec(),
            estimate: 3.86e-3,
        };
        assert_eq!(e.to_string(), "1\tri\teros\t3.86e-3");
        let empty = BigramFrequencyTable {
            estimator: Estimator::Exact,
            samples: 0,
            seed: None,
            max_len: 0,
            truncated: 0,
            truncation_mass: 0.0,
            entries: BTreeMap::new(),
        };
        let o = CanonicalityOracle::new(Arc::new(toy3()));
        assert!(report_noncanonical(&empty, &o, 5).is_empty());
    }
}
