//! Restricting a token-level model to canonical strings by conditioning.
//!
//! The global model `g(δ) = p(δ)·1[δ canonical] / Z` is the exact
//! conditional; `Z` is the probability that a draw from `p` is canonical.
//! The local model `ℓ` masks noncanonical continuations step by step and
//! renormalizes. It is cheap to sample but warped: `p(δ) = ℓ(δ)·w(δ)` for
//! canonical `δ`, where `w(δ)` is the product of the per-step kept masses.
//! `E_ℓ[w] = Z`, which gives an unbiased estimator of `Z` and an importance
//! resampler for `g`.
//!
//! Log-probabilities are natural logs; conversion to bits happens in reports.
//!
//! With a length bound `L`, a draw that emits `L` tokens and then a further
//! token (instead of EOS) is truncated. Every quantity here then refers to
//! strings of length at most `L`: the exact `Z` sums canonical strings up to
//! `L`, and under [`TruncationPolicy::Exclude`] truncated draws count as
//! weight-zero samples, which keeps `Ẑ` unbiased for that sum.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::bpe::{TokenId, TokenString};
use crate::canonicality::CanonicalityOracle;
use crate::error::ModelError;
use crate::parallel::run_chunked;
use crate::token_lm::{sample, sequence_log_prob, walk_prefixes, NextDistribution, TokenLM};

/// What to do with a draw that reaches the length bound without EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TruncationPolicy {
    /// Keep the draw flagged; estimators give it weight zero.
    #[default]
    Exclude,
    /// End the string at the bound, as if the model were length-capped.
    ForceEos,
}

impl FromStr for TruncationPolicy {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "exclude" => Ok(TruncationPolicy::Exclude),
            "force-eos" => Ok(TruncationPolicy::ForceEos),
            other => Err(ModelError::InvalidArgument(format!("truncation policy {other:?} is not exclude|force-eos"))),
        }
    }
}

impl std::fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TruncationPolicy::Exclude => "exclude",
            TruncationPolicy::ForceEos => "force-eos",
        })
    }
}

/// A draw from the local model with its importance weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub tokens: TokenString,
    /// `Σ log(per_step_normalizers)`.
    pub log_weight: f64,
    /// Mass kept by the mask at each step drawn, EOS step included.
    pub per_step_normalizers: Vec<f64>,
    pub truncated: bool,
}

impl WeightedSample {
    /// Weight used by estimators: zero for truncated draws under
    /// [`TruncationPolicy::Exclude`].
    pub fn estimator_weight(&self, policy: TruncationPolicy) -> f64 {
        if self.truncated && policy == TruncationPolicy::Exclude {
            0.0
        } else {
            self.log_weight.exp()
        }
    }

    pub fn into_complete(self) -> Result<TokenString, ModelError> {
        if self.truncated {
            Err(ModelError::MaxLenExceeded(self.tokens.len()))
        } else {
            Ok(self.tokens)
        }
    }
}

/// The locally canonicalized model over `base`.
#[derive(Debug, Clone)]
pub struct LocalModel<M> {
    pub base: M,
    pub oracle: Arc<CanonicalityOracle>,
}

impl<M: TokenLM> LocalModel<M> {
    pub fn new(base: M, oracle: Arc<CanonicalityOracle>) -> Self {
        LocalModel { base, oracle }
    }

    /// Base conditional masked to canonical continuations and renormalized,
    /// and the mass the mask kept.
    pub fn local_next_distribution(&self, prefix: &[TokenId]) -> Result<(NextDistribution, f64), ModelError> {
        let mask = self.oracle.allowed_next(prefix)?;
        self.base.next_distribution(prefix).masked(&mask)
    }

    /// Ancestral sampling from the local model. `max_len == 0` means
    /// unlimited.
    pub fn sample_local<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        max_len: usize,
        policy: TruncationPolicy,
    ) -> Result<WeightedSample, ModelError> {
        let mut tokens = Vec::new();
        let mut normalizers = Vec::new();
        let mut truncated = false;
        loop {
            if max_len > 0 && tokens.len() == max_len && policy == TruncationPolicy::ForceEos {
                normalizers.push(1.0);
                truncated = true;
                break;
            }
            let (dist, z) = self.local_next_distribution(&tokens)?;
            normalizers.push(z);
            let outcome = dist.draw(rng)?;
            if outcome == dist.eos_index() {
                break;
            }
            if max_len > 0 && tokens.len() == max_len {
                truncated = true;
                break;
            }
            tokens.push(TokenId(outcome as u32));
        }
        Ok(WeightedSample {
            tokens: TokenString(tokens),
            log_weight: normalizers.iter().map(|z| z.ln()).sum(),
            per_step_normalizers: normalizers,
            truncated,
        })
    }

    /// `log ℓ(tokens)`; `-inf` for noncanonical strings.
    pub fn local_sequence_log_prob(&self, tokens: &[TokenId]) -> f64 {
        match self.log_weight(tokens) {
            Ok(log_w) => sequence_log_prob(&self.base, tokens) - log_w,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// `log w(tokens)`: the summed log of the per-step kept masses, EOS step
    /// included. Fails for noncanonical strings.
    pub fn log_weight(&self, tokens: &[TokenId]) -> Result<f64, ModelError> {
        if !self.oracle.is_canonical(tokens)? {
            return Err(crate::error::CanonicalityError::PrefixNotCanonical(tokens.len()).into());
        }
        let mut total = 0.0;
        for t in 0..=tokens.len() {
            let mask = self.oracle.allowed_next(&tokens[..t])?;
            let dist = self.base.next_distribution(&tokens[..t]);
            total += dist
                .probs()
                .iter()
                .zip(mask.as_slice())
                .filter(|(_, keep)| **keep)
                .map(|(p, _)| p)
                .sum::<f64>()
                .ln();
        }
        Ok(total)
    }
}

impl<M: TokenLM> TokenLM for LocalModel<M> {
    fn num_tokens(&self) -> usize {
        self.base.num_tokens()
    }

    /// Off the canonical set (where the model has no mass) this returns
    /// all mass on EOS.
    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        match self.local_next_distribution(prefix) {
            Ok((dist, _)) => dist,
            Err(_) => NextDistribution::eos_only(self.num_tokens()),
        }
    }
}

/// Anything that assigns a log-probability to a whole string.
pub trait StringModel {
    fn log_prob(&self, tokens: &[TokenId]) -> f64;
}

impl<T: TokenLM> StringModel for T {
    fn log_prob(&self, tokens: &[TokenId]) -> f64 {
        sequence_log_prob(self, tokens)
    }
}

/// The globally canonicalized model, evaluated with a given normalizer.
#[derive(Debug, Clone)]
pub struct GlobalModel<M> {
    pub base: M,
    pub oracle: Arc<CanonicalityOracle>,
    pub log_z: f64,
}

impl<M: TokenLM> StringModel for GlobalModel<M> {
    fn log_prob(&self, tokens: &[TokenId]) -> f64 {
        match self.oracle.is_canonical(tokens) {
            Ok(true) => sequence_log_prob(&self.base, tokens) - self.log_z,
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Result of a rejection sampling call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accepted {
    pub tokens: TokenString,
    /// Draws made, the accepted one included.
    pub attempts: usize,
}

/// Exact sampler for the global model: draw from `base` until canonical.
/// Truncated draws are rejected.
pub fn rejection_sample<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    base: &M,
    oracle: &CanonicalityOracle,
    rng: &mut R,
    max_attempts: usize,
    max_len: usize,
) -> Result<Accepted, ModelError> {
    if max_attempts == 0 {
        return Err(ModelError::InvalidArgument("max_attempts must be at least 1".into()));
    }
    for attempt in 1..=max_attempts {
        let s = sample(base, rng, max_len)?;
        if !s.truncated && oracle.is_canonical(&s.tokens).unwrap_or(false) {
            return Ok(Accepted { tokens: s.tokens, attempts: attempt });
        }
    }
    Err(ModelError::AttemptsExhausted(max_attempts))
}

/// Monte Carlo estimate of the canonicality rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZEstimate {
    pub mean: f64,
    pub standard_error: f64,
    pub sample_count: usize,
    pub truncated_count: usize,
}

/// Running first and second moments; merging is order-independent up to
/// floating-point rounding, and merge order is fixed by callers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: usize,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn standard_error(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

fn z_moments<M: TokenLM, R: Rng + ?Sized>(
    local: &LocalModel<M>,
    rng: &mut R,
    m: usize,
    max_len: usize,
    policy: TruncationPolicy,
) -> Result<(Moments, usize), ModelError> {
    let mut moments = Moments::default();
    let mut truncated = 0;
    for _ in 0..m {
        let s = local.sample_local(rng, max_len, policy)?;
        truncated += s.truncated as usize;
        moments.push(s.estimator_weight(policy));
    }
    Ok((moments, truncated))
}

fn z_estimate(moments: Moments, truncated_count: usize) -> ZEstimate {
    ZEstimate {
        mean: moments.mean(),
        standard_error: moments.standard_error(),
        sample_count: moments.n,
        truncated_count,
    }
}

/// `Ẑ`: mean importance weight over `m` local-model draws.
pub fn estimate_z<M: TokenLM, R: Rng + ?Sized>(
    local: &LocalModel<M>,
    rng: &mut R,
    m: usize,
    max_len: usize,
    policy: TruncationPolicy,
) -> Result<ZEstimate, ModelError> {
    if m < 2 {
        return Err(ModelError::InvalidArgument("at least 2 samples are needed".into()));
    }
    let (moments, truncated) = z_moments(local, rng, m, max_len, policy)?;
    Ok(z_estimate(moments, truncated))
}

/// [`estimate_z`] over seeded chunks on `workers` threads. The result
/// depends on `seed` and `m` only.
pub fn estimate_z_parallel<M: TokenLM>(
    local: &LocalModel<M>,
    seed: u64,
    m: usize,
    max_len: usize,
    policy: TruncationPolicy,
    workers: usize,
) -> Result<ZEstimate, ModelError> {
    if m < 2 {
        return Err(ModelError::InvalidArgument("at least 2 samples are needed".into()));
    }
    let mut moments = Moments::default();
    let mut truncated = 0;
    for chunk in run_chunked(seed, m, workers, |rng, k| z_moments(local, rng, k, max_len, policy)) {
        let (mo, tr) = chunk?;
        moments.merge(&mo);
        truncated += tr;
    }
    Ok(z_estimate(moments, truncated))
}

/// Exact canonicality rate over strings of length at most `max_len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactZ {
    pub z: f64,
    /// Base mass of canonical length-`max_len` prefixes that continue; the
    /// canonicality rate without a bound lies in `[z, z + remainder]`.
    pub remainder: f64,
}

/// `Σ p(δ)` over canonical `δ` with `|δ| ≤ max_len`, by depth-first
/// search over canonical prefixes.
pub fn exact_z<M: TokenLM + ?Sized>(
    base: &M,
    oracle: &CanonicalityOracle,
    max_len: usize,
    limit: u128,
) -> Result<ExactZ, ModelError> {
    struct Walk<'a, M: ?Sized> {
        base: &'a M,
        oracle: &'a CanonicalityOracle,
        max_len: usize,
        limit: u128,
        visited: u128,
        z: f64,
        remainder: f64,
    }
    impl<M: TokenLM + ?Sized> Walk<'_, M> {
        fn rec(&mut self, prefix: &mut Vec<TokenId>, mass: f64) -> Result<(), ModelError> {
            self.visited += 1;
            if self.visited > self.limit {
                return Err(ModelError::EnumerationTooLarge { count: self.visited, limit: self.limit });
            }
            let dist = self.base.next_distribution(prefix);
            self.z += mass * dist.eos();
            if prefix.len() == self.max_len {
                self.remainder += mass * (1.0 - dist.eos());
                return Ok(());
            }
            let mask = self.oracle.allowed_next(prefix)?;
            for t in 0..dist.num_tokens() {
                let p = dist.prob(t);
                if p > 0.0 && mask.as_slice()[t] {
                    prefix.push(TokenId(t as u32));
                    self.rec(prefix, mass * p)?;
                    prefix.pop();
                }
            }
            Ok(())
        }
    }
    let mut walk = Walk { base, oracle, max_len, limit, visited: 0, z: 0.0, remainder: 0.0 };
    walk.rec(&mut Vec::new(), 1.0)?;
    Ok(ExactZ { z: walk.z, remainder: walk.remainder })
}

/// Draws `k` strings with replacement, each sample chosen with probability
/// proportional to its estimator weight.
pub fn importance_resample<R: Rng + ?Sized>(
    samples: &[WeightedSample],
    k: usize,
    rng: &mut R,
    policy: TruncationPolicy,
) -> Result<Vec<TokenString>, ModelError> {
    let max_log = samples
        .iter()
        .filter(|s| s.estimator_weight(policy) > 0.0)
        .map(|s| s.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    if max_log == f64::NEG_INFINITY {
        return Err(ModelError::AllZeroWeights);
    }
    let weights: Vec<f64> = samples
        .iter()
        .map(|s| if s.estimator_weight(policy) > 0.0 { (s.log_weight - max_log).exp() } else { 0.0 })
        .collect();
    let index = WeightedIndex::new(&weights).map_err(|_| ModelError::AllZeroWeights)?;
    Ok((0..k).map(|_| samples[index.sample(rng)].tokens.clone()).collect())
}

/// Average negative log-likelihood in bits per string under the base,
/// local and global models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLossReport {
    pub baseline: f64,
    pub local: f64,
    pub global: f64,
    pub evaluated: usize,
    /// Noncanonical corpus entries left out.
    pub skipped: usize,
}

/// Log-loss of the three models on canonical strings of `corpus`, given an
/// estimate of `Z`.
pub fn logloss_eval<M: TokenLM>(
    corpus: &[TokenString],
    local: &LocalModel<M>,
    z_estimate: f64,
) -> Result<LogLossReport, ModelError> {
    let mut neg_log_p = 0.0;
    let mut log_w = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for s in corpus {
        match local.log_weight(s) {
            Ok(lw) => {
                neg_log_p -= sequence_log_prob(&local.base, s);
                log_w += lw;
                evaluated += 1;
            }
            Err(_) => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(ModelError::EmptyCorpus);
    }
    let n = evaluated as f64;
    let baseline = neg_log_p / n;
    Ok(LogLossReport {
        baseline: baseline / LN_2,
        local: (baseline + log_w / n) / LN_2,
        global: (baseline + z_estimate.ln()) / LN_2,
        evaluated,
        skipped,
    })
}

/// `KL(p* ‖ q)` in nats over the strings of `p_star` up to `max_len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlValue {
    pub kl: f64,
    /// Mass of `p_star` beyond `max_len`, not covered by `kl`.
    pub truncation_mass: f64,
}

/// Exact KL divergence by enumerating `p_star`. A string with `p* > 0`
/// and `q = 0` makes the result `+inf`.
pub fn kl_enumeration<P: TokenLM + ?Sized, Q: StringModel + ?Sized>(
    p_star: &P,
    q: &Q,
    max_len: usize,
    limit: u128,
) -> Result<KlValue, ModelError> {
    let mut kl = 0.0;
    let mut truncation_mass = 0.0;
    walk_prefixes(p_star, max_len, limit, |prefix, mass, dist| {
        let p = mass * dist.eos();
        if p > 0.0 {
            kl += p * (p.ln() - q.log_prob(prefix));
        }
        if prefix.len() == max_len {
            truncation_mass += mass * (1.0 - dist.eos());
        }
    })?;
    Ok(KlValue { kl, truncation_mass })
}

/// Empirical distribution of a list of strings.
pub fn empirical(samples: &[TokenString]) -> HashMap<TokenString, f64> {
    let mut out: HashMap<TokenString, f64> = HashMap::new();
    let w = 1.0 / samples.len() as f64;
    for s in samples {
        *out.entry(s.clone()).or_default() += w;
    }
    out
}

/// Total variation distance between two finite distributions.
pub fn total_variation(a: &HashMap<TokenString, f64>, b: &HashMap<TokenString, f64>) -> f64 {
    let mut sum: f64 = a.iter().map(|(k, p)| (p - b.get(k).copied().unwrap_or(0.0)).abs()).sum();
    sum += b.iter().filter(|(k, _)| !a.contains_key(*k)).map(|(_, p)| p.abs()).sum::<f64>();
    sum / 2.0
}
