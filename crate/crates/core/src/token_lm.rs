//! Autoregressive token-level language models.
//!
//! A model gives, for every prefix, a distribution over the next token or the
//! end-of-string event (EOS). EOS is an outcome, not a token: distributions
//! have `num_tokens + 1` entries with EOS last.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::bpe::{TokenId, TokenString, Vocabulary};
use crate::canonicality::TokenMask;
use crate::error::ModelError;

/// Smallest log-probability printed in reports (the double underflow point).
/// Internal computations keep exact `-inf`.
pub const LOG_FLOOR: f64 = -745.0;

/// Default cap on the number of prefixes visited by exhaustive enumeration.
pub const DEFAULT_ENUMERATION_LIMIT: u128 = 20_000_000;

/// Clamps a log-probability to [`LOG_FLOOR`] for display.
pub fn floor_log(x: f64) -> f64 {
    x.max(LOG_FLOOR)
}

/// Distribution over the tokens of a vocabulary and EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct NextDistribution {
    probs: Vec<f64>,
}

impl NextDistribution {
    /// Wraps already normalized probabilities, EOS last.
    pub fn from_probs(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 1);
        debug_assert!(probs.iter().all(|p| *p >= 0.0), "negative probability");
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-10, "unnormalized distribution");
        NextDistribution { probs }
    }

    /// Normalizes non-negative weights. Returns the distribution and the
    /// total weight.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<(Self, f64), ModelError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(ModelError::ZeroNormalizer);
        }
        for w in &mut weights {
            *w /= total;
        }
        Ok((Self::from_probs(weights), total))
    }

    pub fn uniform(num_tokens: usize) -> Self {
        let n = num_tokens + 1;
        NextDistribution { probs: vec![1.0 / n as f64; n] }
    }

    /// All mass on EOS.
    pub fn eos_only(num_tokens: usize) -> Self {
        let mut probs = vec![0.0; num_tokens + 1];
        probs[num_tokens] = 1.0;
        NextDistribution { probs }
    }

    pub fn num_tokens(&self) -> usize {
        self.probs.len() - 1
    }

    /// Index of the EOS outcome.
    pub fn eos_index(&self) -> usize {
        self.num_tokens()
    }

    /// Probabilities indexed by outcome, EOS last.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, outcome: usize) -> f64 {
        self.probs[outcome]
    }

    pub fn token(&self, t: TokenId) -> f64 {
        self.probs.get(t.index()).copied().filter(|_| t.index() < self.num_tokens()).unwrap_or(0.0)
    }

    pub fn eos(&self) -> f64 {
        self.probs[self.num_tokens()]
    }

    /// Keeps the allowed outcomes and renormalizes. Also returns the mass
    /// the mask kept.
    pub fn masked(&self, mask: &TokenMask) -> Result<(Self, f64), ModelError> {
        let weights = self
            .probs
            .iter()
            .zip(mask.as_slice())
            .map(|(p, &keep)| if keep { *p } else { 0.0 })
            .collect();
        Self::from_weights(weights)
    }

    /// Draws an outcome index.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize, ModelError> {
        let index = WeightedIndex::new(&self.probs).map_err(|_| ModelError::ZeroNormalizer)?;
        Ok(index.sample(rng))
    }
}

/// An autoregressive model over token strings.
pub trait TokenLM: Send + Sync {
    fn num_tokens(&self) -> usize;

    /// Distribution of the next outcome given `prefix`. Must be a pure
    /// function of the prefix.
    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution;
}

impl<T: TokenLM + ?Sized> TokenLM for &T {
    fn num_tokens(&self) -> usize {
        (**self).num_tokens()
    }
    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        (**self).next_distribution(prefix)
    }
}

impl<T: TokenLM + ?Sized> TokenLM for Box<T> {
    fn num_tokens(&self) -> usize {
        (**self).num_tokens()
    }
    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        (**self).next_distribution(prefix)
    }
}

impl<T: TokenLM + ?Sized> TokenLM for Arc<T> {
    fn num_tokens(&self) -> usize {
        (**self).num_tokens()
    }
    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        (**self).next_distribution(prefix)
    }
}

/// `log p(tokens)`: the step log-probabilities plus the final EOS term.
pub fn sequence_log_prob<M: TokenLM + ?Sized>(lm: &M, tokens: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for t in 0..=tokens.len() {
        let dist = lm.next_distribution(&tokens[..t]);
        let p = match tokens.get(t) {
            Some(tok) => dist.token(*tok),
            None => dist.eos(),
        };
        total += p.ln();
        if total == f64::NEG_INFINITY {
            break;
        }
    }
    total
}

/// `log` of the probability that a draw starts with `prefix` (no EOS term).
pub fn prefix_log_prob<M: TokenLM + ?Sized>(lm: &M, prefix: &[TokenId]) -> f64 {
    (0..prefix.len())
        .map(|t| lm.next_distribution(&prefix[..t]).token(prefix[t]).ln())
        .sum()
}

/// A model that ends every string at `max_len` tokens: after `max_len`
/// tokens all mass goes to EOS. Makes exhaustive enumeration exact.
#[derive(Debug, Clone)]
pub struct LengthCapped<M> {
    pub inner: M,
    pub max_len: usize,
}

impl<M: TokenLM> LengthCapped<M> {
    pub fn new(inner: M, max_len: usize) -> Self {
        LengthCapped { inner, max_len }
    }
}

impl<M: TokenLM> TokenLM for LengthCapped<M> {
    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }
    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        if prefix.len() >= self.max_len {
            NextDistribution::eos_only(self.num_tokens())
        } else {
            self.inner.next_distribution(prefix)
        }
    }
}

/// A drawn string. `truncated` marks a draw that produced `max_len` tokens
/// and then a further token instead of EOS; that token is discarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sampled {
    pub tokens: TokenString,
    pub truncated: bool,
}

/// Ancestral sampling. `max_len == 0` means unlimited.
pub fn sample<M: TokenLM + ?Sized, R: Rng + ?Sized>(lm: &M, rng: &mut R, max_len: usize) -> Result<Sampled, ModelError> {
    let mut tokens = Vec::new();
    loop {
        let dist = lm.next_distribution(&tokens);
        let outcome = dist.draw(rng)?;
        if outcome == dist.eos_index() {
            return Ok(Sampled { tokens: TokenString(tokens), truncated: false });
        }
        if max_len > 0 && tokens.len() == max_len {
            return Ok(Sampled { tokens: TokenString(tokens), truncated: true });
        }
        tokens.push(TokenId(outcome as u32));
    }
}

/// Exhaustive listing of a model's strings up to a length.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    /// Strings of length at most `max_len` with their probabilities, in
    /// depth-first order. Zero-probability strings are omitted.
    pub strings: Vec<(TokenString, f64)>,
    /// Prefixes of length `max_len` with the mass of their continuations.
    pub truncated: Vec<(TokenString, f64)>,
    /// Mass not covered by `strings`.
    pub truncation_mass: f64,
}

impl Enumeration {
    pub fn total(&self) -> f64 {
        self.strings.iter().map(|(_, p)| p).sum()
    }

    pub fn to_map(&self) -> HashMap<TokenString, f64> {
        self.strings.iter().cloned().collect()
    }
}

fn enumeration_bound(num_tokens: usize, max_len: usize) -> u128 {
    let v = num_tokens as u128;
    let mut total: u128 = 0;
    let mut layer: u128 = 1;
    for _ in 0..=max_len {
        total = total.saturating_add(layer);
        layer = layer.saturating_mul(v);
    }
    total
}

/// Depth-first walk over the prefixes of positive probability with length
/// at most `max_len`. `visit(prefix, prefix_prob, dist)` is called once per
/// prefix, parents before children.
pub(crate) fn walk_prefixes<M, F>(lm: &M, max_len: usize, limit: u128, mut visit: F) -> Result<(), ModelError>
where
    M: TokenLM + ?Sized,
    F: FnMut(&[TokenId], f64, &NextDistribution),
{
    let bound = enumeration_bound(lm.num_tokens(), max_len);
    let mut visited: u128 = 0;
    let mut prefix = Vec::new();
    fn rec<M: TokenLM + ?Sized, F: FnMut(&[TokenId], f64, &NextDistribution)>(
        lm: &M,
        prefix: &mut Vec<TokenId>,
        mass: f64,
        max_len: usize,
        limit: u128,
        bound: u128,
        visited: &mut u128,
        visit: &mut F,
    ) -> Result<(), ModelError> {
        *visited += 1;
        if *visited > limit {
            return Err(ModelError::EnumerationTooLarge { count: bound, limit });
        }
        let dist = lm.next_distribution(prefix);
        visit(prefix, mass, &dist);
        if prefix.len() == max_len {
            return Ok(());
        }
        for t in 0..dist.num_tokens() {
            let p = dist.prob(t);
            if p > 0.0 {
                prefix.push(TokenId(t as u32));
                rec(lm, prefix, mass * p, max_len, limit, bound, visited, visit)?;
                prefix.pop();
            }
        }
        Ok(())
    }
    rec(lm, &mut prefix, 1.0, max_len, limit, bound, &mut visited, &mut visit)
}

/// Probability of every string of length at most `max_len`.
pub fn enumerate_distribution<M: TokenLM + ?Sized>(lm: &M, max_len: usize, limit: u128) -> Result<Enumeration, ModelError> {
    let mut strings = Vec::new();
    let mut truncated = Vec::new();
    let mut truncation_mass = 0.0;
    walk_prefixes(lm, max_len, limit, |prefix, mass, dist| {
        let p = mass * dist.eos();
        if p > 0.0 {
            strings.push((TokenString(prefix.to_vec()), p));
        }
        if prefix.len() == max_len {
            let rest = mass * (1.0 - dist.eos());
            if rest > 0.0 {
                truncated.push((TokenString(prefix.to_vec()), rest));
                truncation_mass += rest;
            }
        }
    })?;
    Ok(Enumeration { strings, truncated, truncation_mass })
}

/// Probability of a byte string: the total over all of its segmentations.
pub fn char_string_prob<M: TokenLM + ?Sized>(lm: &M, chars: &[u8], vocab: &Vocabulary, limit: usize) -> Result<f64, ModelError> {
    Ok(vocab
        .encodings_of(chars, limit)?
        .iter()
        .map(|d| sequence_log_prob(lm, d).exp())
        .sum())
}

/// Context padding symbol; never emitted.
pub const BOUNDARY: u32 = u32::MAX;

/// The last `order - 1` ids of `prefix`, left-padded with [`BOUNDARY`].
pub fn context_key(prefix: &[TokenId], order: usize) -> Vec<u32> {
    let width = order - 1;
    let have = prefix.len().min(width);
    let mut key = vec![BOUNDARY; width - have];
    key.extend(prefix[prefix.len() - have..].iter().map(|t| t.0));
    key
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    counts: BTreeMap<u32, u64>,
}

/// Add-α smoothed n-gram model.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    alpha: f64,
    num_tokens: usize,
    vocab_fingerprint: String,
    counts: HashMap<Vec<u32>, ContextCounts>,
}

const FORMAT_HEADER: &str = "canonical-bpe ngram v1";

impl NGramLM {
    /// A model with no counts: every conditional is uniform.
    pub fn new(vocab: &Vocabulary, order: usize, alpha: f64) -> Result<Self, ModelError> {
        if order < 1 {
            return Err(ModelError::InvalidOrder(order));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ModelError::InvalidSmoothing(alpha));
        }
        Ok(NGramLM {
            order,
            alpha,
            num_tokens: vocab.len(),
            vocab_fingerprint: vocab.fingerprint(),
            counts: HashMap::new(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    /// Count of `outcome` (token index, or `num_tokens` for EOS) after `context`.
    pub fn count(&self, context: &[u32], outcome: usize) -> u64 {
        self.counts
            .get(context)
            .and_then(|c| c.counts.get(&(outcome as u32)))
            .copied()
            .unwrap_or(0)
    }

    /// Contexts with at least one count, sorted.
    pub fn contexts(&self) -> Vec<Vec<u32>> {
        let mut out: Vec<_> = self.counts.keys().cloned().collect();
        out.sort();
        out
    }

    /// Adds one string's counts, including its EOS.
    pub fn observe(&mut self, tokens: &[TokenId]) {
        for t in 0..=tokens.len() {
            let outcome = tokens.get(t).map_or(self.num_tokens as u32, |tok| tok.0);
            let entry = self.counts.entry(context_key(&tokens[..t], self.order)).or_default();
            entry.total += 1;
            *entry.counts.entry(outcome).or_default() += 1;
        }
    }

    /// Versioned text serialization.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{FORMAT_HEADER}").unwrap();
        writeln!(out, "order\t{}", self.order).unwrap();
        writeln!(out, "alpha\t{:?}", self.alpha).unwrap();
        writeln!(out, "tokens\t{}", self.num_tokens).unwrap();
        writeln!(out, "vocab\t{}", self.vocab_fingerprint).unwrap();
        for ctx in self.contexts() {
            let ctx_text = ctx
                .iter()
                .map(|&id| if id == BOUNDARY { "^".to_string() } else { id.to_string() })
                .collect::<Vec<_>>()
                .join(" ");
            for (outcome, count) in &self.counts[&ctx].counts {
                let outcome = if *outcome as usize == self.num_tokens { "EOS".to_string() } else { outcome.to_string() };
                writeln!(out, "{ctx_text}\t{outcome}\t{count}").unwrap();
            }
        }
        out
    }

    /// Parses [`NGramLM::to_text`] output and checks it against `vocab`.
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<Self, ModelError> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: &str| ModelError::MalformedModel { line, reason: reason.to_string() };
        match lines.next() {
            Some((_, h)) if h == FORMAT_HEADER => {}
            _ => return Err(bad(1, "missing or unsupported header")),
        }
        let mut header = |key: &str| -> Result<String, ModelError> {
            let (idx, line) = lines.next().ok_or_else(|| bad(0, "truncated header"))?;
            match line.split_once('\t') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(bad(idx + 1, &format!("expected {key}"))),
            }
        };
        let order: usize = header("order")?.parse().map_err(|_| bad(2, "order is not an integer"))?;
        let alpha: f64 = header("alpha")?.parse().map_err(|_| bad(3, "alpha is not a number"))?;
        let num_tokens: usize = header("tokens")?.parse().map_err(|_| bad(4, "tokens is not an integer"))?;
        let fingerprint = header("vocab")?;
        if fingerprint != vocab.fingerprint() || num_tokens != vocab.len() {
            return Err(ModelError::VocabularyMismatch);
        }
        let mut lm = NGramLM::new(vocab, order, alpha)?;
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [ctx, outcome, count] = fields[..] else {
                return Err(bad(line_no, "expected context, outcome and count"));
            };
            let ctx: Vec<u32> = ctx
                .split_whitespace()
                .map(|s| if s == "^" { Ok(BOUNDARY) } else { s.parse() })
                .collect::<Result<_, _>>()
                .map_err(|_| bad(line_no, "bad context id"))?;
            if ctx.len() != order - 1 || ctx.iter().any(|&id| id != BOUNDARY && id as usize >= num_tokens) {
                return Err(bad(line_no, "context does not fit the model"));
            }
            let outcome: u32 = if outcome == "EOS" {
                num_tokens as u32
            } else {
                outcome.parse().ok().filter(|&o: &u32| (o as usize) < num_tokens).ok_or_else(|| bad(line_no, "bad outcome"))?
            };
            let count: u64 = count.parse().map_err(|_| bad(line_no, "count is not an integer"))?;
            let entry = lm.counts.entry(ctx).or_default();
            entry.total += count;
            *entry.counts.entry(outcome).or_default() += count;
        }
        Ok(lm)
    }
}

impl TokenLM for NGramLM {
    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        let n = self.num_tokens + 1;
        let key = context_key(prefix, self.order);
        let Some(ctx) = self.counts.get(&key) else {
            return NextDistribution::uniform(self.num_tokens);
        };
        let denom = ctx.total as f64 + self.alpha * n as f64;
        let mut probs = vec![self.alpha / denom; n];
        for (&outcome, &count) in &ctx.counts {
            probs[outcome as usize] = (count as f64 + self.alpha) / denom;
        }
        NextDistribution::from_probs(probs)
    }
}

/// Counts a corpus into an add-α n-gram model.
pub fn train_ngram<'a>(
    corpus: impl IntoIterator<Item = &'a TokenString>,
    vocab: &Vocabulary,
    order: usize,
    alpha: f64,
) -> Result<NGramLM, ModelError> {
    let mut lm = NGramLM::new(vocab, order, alpha)?;
    let mut any = false;
    for s in corpus {
        if let Some(t) = s.iter().find(|t| !vocab.contains(**t)) {
            return Err(crate::error::VocabError::UnknownTokenId(*t).into());
        }
        lm.observe(s);
        any = true;
    }
    if !any {
        return Err(ModelError::EmptyCorpus);
    }
    Ok(lm)
}

/// Canonical strings over a vocabulary: random byte strings from `alphabet`
/// with lengths uniform in `0..=max_chars`, encoded.
pub fn random_canonical_corpus<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    rng: &mut R,
    n: usize,
    max_chars: usize,
) -> Vec<TokenString> {
    let alphabet = vocab.base_alphabet();
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..=max_chars);
            let chars: Vec<u8> = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            vocab.encode(&chars).expect("alphabet bytes encode")
        })
        .collect()
}
