//! Canonicality by construction: a trainable model whose every conditional
//! is masked to canonical continuations, fitted with a log-loss objective
//! regularized toward a frozen base model.
//!
//! The parametric family is a tabular-logit n-gram: one logit vector over
//! tokens and EOS per context. Its gradients are analytic and its
//! distributions enumerable, so every quantity here can be checked exactly.
//!
//! Losses and KL values are reported in bits, and gradients are gradients of
//! those bit-valued quantities.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::distr::{Bernoulli, Distribution};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bpe::{TokenId, TokenString};
use crate::canonicality::{CanonicalityOracle, TokenMask};
use crate::conditioning::Moments;
use crate::error::ModelError;
use crate::token_lm::{context_key, sequence_log_prob, NGramLM, NextDistribution, TokenLM};

/// Padded context of `order - 1` ids.
pub type Context = Vec<u32>;

/// Sparse per-context vectors over tokens and EOS; used for both parameters
/// and gradients. Absent contexts are all zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextTable(pub BTreeMap<Context, Vec<f64>>);

impl ContextTable {
    pub fn get(&self, ctx: &[u32]) -> Option<&[f64]> {
        self.0.get(ctx).map(Vec::as_slice)
    }

    pub fn entry(&mut self, ctx: Context, width: usize) -> &mut Vec<f64> {
        self.0.entry(ctx).or_insert_with(|| vec![0.0; width])
    }

    pub fn norm(&self) -> f64 {
        self.0.values().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, a: f64) {
        self.0.values_mut().flatten().for_each(|x| *x *= a);
    }

    /// `self += a · other`.
    pub fn add_scaled(&mut self, other: &ContextTable, a: f64) {
        for (ctx, v) in &other.0 {
            let mine = self.entry(ctx.clone(), v.len());
            for (m, o) in mine.iter_mut().zip(v) {
                *m += a * o;
            }
        }
    }

    pub fn value(&self, ctx: &[u32], outcome: usize) -> f64 {
        self.get(ctx).map_or(0.0, |v| v[outcome])
    }
}

/// Autoregressive model with a free logit vector per context.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLogitLM {
    order: usize,
    num_tokens: usize,
    pub logits: ContextTable,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over the entries allowed by `mask`; others get exactly 0.
/// Also returns the unmasked softmax mass kept.
fn masked_softmax(logits: &[f64], mask: &[bool]) -> (Vec<f64>, f64) {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, keep)| **keep)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let all_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(z, keep)| if *keep { (z - max).exp() } else { 0.0 })
        .collect();
    let kept: f64 = exps.iter().sum();
    let all: f64 = logits.iter().map(|z| (z - all_max).exp()).sum();
    let normalizer = kept * (max - all_max).exp() / all;
    (exps.into_iter().map(|e| e / kept).collect(), normalizer)
}

impl TabularLogitLM {
    /// All logits zero: every conditional uniform.
    pub fn zeros(order: usize, num_tokens: usize) -> Result<Self, ModelError> {
        if order < 1 {
            return Err(ModelError::InvalidOrder(order));
        }
        Ok(TabularLogitLM { order, num_tokens, logits: ContextTable::default() })
    }

    /// Logits equal to the log-probabilities of an n-gram model in every
    /// context the n-gram has seen; unseen contexts are uniform in both.
    pub fn from_ngram(lm: &NGramLM) -> Self {
        let mut logits = ContextTable::default();
        for ctx in lm.contexts() {
            let prefix: Vec<TokenId> = ctx.iter().filter(|&&id| id != crate::token_lm::BOUNDARY).map(|&id| TokenId(id)).collect();
            let dist = lm.next_distribution(&prefix);
            logits.0.insert(ctx, dist.probs().iter().map(|p| p.ln()).collect());
        }
        TabularLogitLM { order: lm.order(), num_tokens: lm.num_tokens(), logits }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn context(&self, prefix: &[TokenId]) -> Context {
        context_key(prefix, self.order)
    }

    /// Logits for a prefix.
    pub fn logits_for(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.logits
            .get(&self.context(prefix))
            .map_or_else(|| vec![0.0; self.num_tokens + 1], <[f64]>::to_vec)
    }

    /// `θ ← θ − lr · grad`.
    pub fn step(&mut self, grad: &ContextTable, learning_rate: f64) {
        self.logits.add_scaled(grad, -learning_rate);
    }
}

impl TokenLM for TabularLogitLM {
    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        NextDistribution::from_probs(softmax(&self.logits_for(prefix)))
    }
}

/// A tabular-logit model whose conditionals are restricted to canonical
/// continuations. With `masked = false` it is the plain base model, which is
/// useful as a control.
#[derive(Debug, Clone)]
pub struct CanonicalizedArchitecture {
    pub base: TabularLogitLM,
    pub oracle: Arc<CanonicalityOracle>,
    pub masked: bool,
}

impl CanonicalizedArchitecture {
    pub fn new(base: TabularLogitLM, oracle: Arc<CanonicalityOracle>) -> Self {
        CanonicalizedArchitecture { base, oracle, masked: true }
    }

    pub fn unmasked(base: TabularLogitLM, oracle: Arc<CanonicalityOracle>) -> Self {
        CanonicalizedArchitecture { base, oracle, masked: false }
    }

    fn mask(&self, prefix: &[TokenId]) -> Result<TokenMask, ModelError> {
        if self.masked {
            Ok(self.oracle.allowed_next(prefix)?)
        } else {
            Ok(TokenMask::all(self.base.num_tokens))
        }
    }

    /// Masked, renormalized conditional and the base mass kept.
    pub fn constrained_next_distribution(&self, prefix: &[TokenId]) -> Result<(NextDistribution, f64), ModelError> {
        let mask = self.mask(prefix)?;
        let (probs, z) = masked_softmax(&self.base.logits_for(prefix), mask.as_slice());
        if !(z > 0.0) {
            return Err(ModelError::ZeroNormalizer);
        }
        Ok((NextDistribution::from_probs(probs), z))
    }

    /// Per-step data at `prefix`: context, allowed set and masked softmax.
    fn step_view(&self, prefix: &[TokenId]) -> Result<(Context, TokenMask, Vec<f64>), ModelError> {
        let mask = self.mask(prefix)?;
        let (probs, _) = masked_softmax(&self.base.logits_for(prefix), mask.as_slice());
        Ok((self.base.context(prefix), mask, probs))
    }
}

impl TokenLM for CanonicalizedArchitecture {
    fn num_tokens(&self) -> usize {
        self.base.num_tokens
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> NextDistribution {
        match self.constrained_next_distribution(prefix) {
            Ok((d, _)) => d,
            Err(_) => NextDistribution::eos_only(self.num_tokens()),
        }
    }
}

/// Average negative log-likelihood in bits per string.
pub fn log_loss<M: TokenLM + ?Sized>(model: &M, corpus: &[TokenString]) -> Result<f64, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let mut total = 0.0;
    for (index, s) in corpus.iter().enumerate() {
        let lp = sequence_log_prob(model, s);
        if !lp.is_finite() {
            return Err(ModelError::InfiniteLoss { index });
        }
        total -= lp;
    }
    Ok(total / corpus.len() as f64 / LN_2)
}

/// [`log_loss`] of the architecture and its gradient with respect to the
/// logits.
pub fn grad_log_loss(arch: &CanonicalizedArchitecture, corpus: &[TokenString]) -> Result<(f64, ContextTable), ModelError> {
    let loss = log_loss(arch, corpus)?;
    let width = arch.base.num_tokens + 1;
    let eos = arch.base.num_tokens;
    let mut grad = ContextTable::default();
    for s in corpus {
        for t in 0..=s.len() {
            let (ctx, mask, probs) = arch.step_view(&s[..t])?;
            let outcome = s.get(t).map_or(eos, |tok| tok.index());
            let g = grad.entry(ctx, width);
            for (j, keep) in mask.as_slice().iter().enumerate() {
                if *keep {
                    g[j] += probs[j] - if j == outcome { 1.0 } else { 0.0 };
                }
            }
        }
    }
    grad.scale(1.0 / (corpus.len() as f64 * LN_2));
    Ok((loss, grad))
}

/// Per-step KL `KL(π ‖ q)` in nats over the allowed set, and its gradient
/// with respect to the logits: `π_j (ln π_j − ln q_j − k)`.
fn step_kl(probs: &[f64], base: &NextDistribution, mask: &TokenMask) -> (f64, Vec<f64>) {
    let keep = mask.as_slice();
    let log_ratio: Vec<f64> = probs
        .iter()
        .zip(base.probs())
        .map(|(p, q)| if *p > 0.0 { p.ln() - q.ln() } else { 0.0 })
        .collect();
    let k: f64 = probs.iter().zip(&log_ratio).map(|(p, r)| p * r).sum();
    let grad = (0..probs.len())
        .map(|j| if keep[j] { probs[j] * (log_ratio[j] - k) } else { 0.0 })
        .collect();
    (k, grad)
}

/// How the KL regularizer is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Depth-first over all prefixes up to `max_len`.
    Exact { max_len: usize, limit: u128 },
    /// `samples` draws from the architecture, truncated at `max_len`.
    Sampled { samples: usize, max_len: usize },
}

/// Value of the KL regularizer with its gradient. `standard_error` is zero
/// in exact mode.
#[derive(Debug, Clone, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub standard_error: f64,
    pub gradient: ContextTable,
}

/// `KL(ℓ_θ ‖ p)` in bits, written as the expected sum of per-step KLs along
/// a draw from `ℓ_θ`, over the steps drawn before `max_len` cuts the string
/// off (steps at prefix lengths `0..=max_len`). The base is frozen.
pub fn kl_to_base<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    arch: &CanonicalizedArchitecture,
    base: &M,
    mode: KlMode,
    rng: &mut R,
) -> Result<KlEstimate, ModelError> {
    match mode {
        KlMode::Exact { max_len, limit } => kl_exact(arch, base, max_len, limit),
        KlMode::Sampled { samples, max_len } => kl_sampled(arch, base, rng, samples, max_len),
    }
}

fn kl_exact<M: TokenLM + ?Sized>(
    arch: &CanonicalizedArchitecture,
    base: &M,
    max_len: usize,
    limit: u128,
) -> Result<KlEstimate, ModelError> {
    struct Walk<'a, M: ?Sized> {
        arch: &'a CanonicalizedArchitecture,
        base: &'a M,
        max_len: usize,
        limit: u128,
        visited: u128,
        grad: ContextTable,
    }
    impl<M: TokenLM + ?Sized> Walk<'_, M> {
        /// Expected downstream KL from `prefix` (its own step included).
        fn rec(&mut self, prefix: &mut Vec<TokenId>, mass: f64) -> Result<f64, ModelError> {
            self.visited += 1;
            if self.visited > self.limit {
                return Err(ModelError::EnumerationTooLarge { count: self.visited, limit: self.limit });
            }
            let (ctx, mask, probs) = self.arch.step_view(prefix)?;
            let (k, dk) = step_kl(&probs, &self.base.next_distribution(prefix), &mask);
            let width = probs.len();
            let mut downstream = vec![0.0; width];
            if prefix.len() < self.max_len {
                for t in 0..width - 1 {
                    if probs[t] > 0.0 {
                        prefix.push(TokenId(t as u32));
                        downstream[t] = self.rec(prefix, mass * probs[t])?;
                        prefix.pop();
                    }
                }
            }
            let mean_down: f64 = probs.iter().zip(&downstream).map(|(p, v)| p * v).sum();
            let g = self.grad.entry(ctx, width);
            for j in 0..width {
                if mask.as_slice()[j] {
                    g[j] += mass * (dk[j] + probs[j] * (downstream[j] - mean_down));
                }
            }
            Ok(k + mean_down)
        }
    }
    let mut walk = Walk { arch, base, max_len, limit, visited: 0, grad: ContextTable::default() };
    let value = walk.rec(&mut Vec::new(), 1.0)?;
    let mut gradient = walk.grad;
    gradient.scale(1.0 / LN_2);
    Ok(KlEstimate { value: value / LN_2, standard_error: 0.0, gradient })
}

fn kl_sampled<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    arch: &CanonicalizedArchitecture,
    base: &M,
    rng: &mut R,
    samples: usize,
    max_len: usize,
) -> Result<KlEstimate, ModelError> {
    if samples == 0 {
        return Err(ModelError::InvalidArgument("at least one sample is needed".into()));
    }
    let width = arch.base.num_tokens + 1;
    let eos = width - 1;
    let mut gradient = ContextTable::default();
    let mut moments = Moments::default();
    struct Step {
        ctx: Context,
        mask: TokenMask,
        probs: Vec<f64>,
        outcome: usize,
        k: f64,
    }
    for _ in 0..samples {
        let mut prefix = Vec::new();
        let mut steps: Vec<Step> = Vec::new();
        loop {
            let (ctx, mask, probs) = arch.step_view(&prefix)?;
            let (k, dk) = step_kl(&probs, &base.next_distribution(&prefix), &mask);
            let g = gradient.entry(ctx.clone(), width);
            for (gj, dj) in g.iter_mut().zip(&dk) {
                *gj += dj;
            }
            let outcome = NextDistribution::from_probs(probs.clone()).draw(rng)?;
            steps.push(Step { ctx, mask, probs, outcome, k });
            if outcome == eos || prefix.len() == max_len {
                break;
            }
            prefix.push(TokenId(outcome as u32));
        }
        let total: f64 = steps.iter().map(|s| s.k).sum();
        moments.push(total);
        let mut to_go = total;
        for s in &steps {
            to_go -= s.k;
            if to_go == 0.0 {
                continue;
            }
            let g = gradient.entry(s.ctx.clone(), width);
            for j in 0..width {
                if s.mask.as_slice()[j] {
                    g[j] += to_go * (if j == s.outcome { 1.0 } else { 0.0 } - s.probs[j]);
                }
            }
        }
    }
    gradient.scale(1.0 / (samples as f64 * LN_2));
    Ok(KlEstimate {
        value: moments.mean() / LN_2,
        standard_error: moments.standard_error() / LN_2,
        gradient,
    })
}

/// `(1 − λ)·log_loss + λ·KL`, with the KL evaluated exactly.
pub fn objective<M: TokenLM + ?Sized>(
    arch: &CanonicalizedArchitecture,
    corpus: &[TokenString],
    base: &M,
    lambda: f64,
    kl_max_len: usize,
    limit: u128,
) -> Result<f64, ModelError> {
    let mut value = 0.0;
    if lambda < 1.0 {
        value += (1.0 - lambda) * log_loss(arch, corpus)?;
    }
    if lambda > 0.0 {
        value += lambda * kl_exact(arch, base, kl_max_len, limit)?.value;
    }
    Ok(value)
}

/// Which term a fine-tuning step optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    LogLoss,
    Kl,
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Term::LogLoss => "logloss",
            Term::Kl => "kl",
        })
    }
}

impl FromStr for Term {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        match s {
            "logloss" => Ok(Term::LogLoss),
            "kl" => Ok(Term::Kl),
            other => Err(ModelError::InvalidArgument(format!("unknown term {other:?}"))),
        }
    }
}

/// One fine-tuning step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub term: Term,
    /// Minibatch log-loss or KL estimate before the update.
    pub objective_estimate: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub kl: KlMode,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ModelError::InvalidArgument(format!("lambda {} is outside [0, 1]", self.lambda)));
        }
        if self.steps == 0 || self.batch == 0 {
            return Err(ModelError::InvalidArgument("steps and batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stochastic gradient descent on `(1 − λ)·log_loss + λ·KL(ℓ_θ ‖ base)`.
/// Each step flips a λ-coin: heads takes a KL step, tails a minibatch
/// log-loss step. Minibatches walk through the corpus in a fresh random order
/// on every pass.
pub fn finetune<M: TokenLM + ?Sized, R: Rng + ?Sized>(
    arch: &CanonicalizedArchitecture,
    corpus: &[TokenString],
    base: &M,
    config: &FinetuneConfig,
    rng: &mut R,
) -> Result<(CanonicalizedArchitecture, Vec<TraceRecord>), ModelError> {
    finetune_observed(arch, corpus, base, config, rng, |_, _| Ok(()))
}

/// [`finetune`], calling `observe` with the updated model after every step.
pub fn finetune_observed<M, R, F>(
    arch: &CanonicalizedArchitecture,
    corpus: &[TokenString],
    base: &M,
    config: &FinetuneConfig,
    rng: &mut R,
    mut observe: F,
) -> Result<(CanonicalizedArchitecture, Vec<TraceRecord>), ModelError>
where
    M: TokenLM + ?Sized,
    R: Rng + ?Sized,
    F: FnMut(&CanonicalizedArchitecture, &TraceRecord) -> Result<(), ModelError>,
{
    config.validate()?;
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let coin = Bernoulli::new(config.lambda).map_err(|e| ModelError::InvalidArgument(e.to_string()))?;
    let mut arch = arch.clone();
    let mut trace = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.steps {
        let (term, value, grad) = if coin.sample(rng) {
            let kl = kl_to_base(&arch, base, config.kl, rng)?;
            (Term::Kl, kl.value, kl.gradient)
        } else {
            let mut batch = Vec::with_capacity(config.batch);
            for _ in 0..config.batch {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                batch.push(corpus[order[cursor]].clone());
                cursor += 1;
            }
            let (loss, grad) = grad_log_loss(&arch, &batch)?;
            (Term::LogLoss, loss, grad)
        };
        let record = TraceRecord { step, term, objective_estimate: value, grad_norm: grad.norm() };
        arch.base.step(&grad, config.learning_rate);
        observe(&arch, &record)?;
        trace.push(record);
    }
    Ok((arch, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::fixtures::toy3;
    use crate::conditioning::LocalModel;
    use crate::parallel::stream_rng;
    use crate::token_lm::{enumerate_distribution, random_canonical_corpus, train_ngram, DEFAULT_ENUMERATION_LIMIT};

    fn oracle() -> Arc<CanonicalityOracle> {
        Arc::new(CanonicalityOracle::new(Arc::new(toy3())))
    }

    fn random_arch<R: Rng>(o: &Arc<CanonicalityOracle>, rng: &mut R) -> CanonicalizedArchitecture {
        let mut base = TabularLogitLM::zeros(2, 6).unwrap();
        for ctx in std::iter::once(crate::token_lm::BOUNDARY).chain(0..6) {
            base.logits.0.insert(vec![ctx], (0..7).map(|_| rng.random_range(-2.0..2.0)).collect());
        }
        CanonicalizedArchitecture::new(base, o.clone())
    }

    #[test]
    fn uniform_logits_match_local_row() {
        let o = oracle();
        let arch = CanonicalizedArchitecture::new(TabularLogitLM::zeros(2, 6).unwrap(), o);
        let (d, z) = arch.constrained_next_distribution(&[TokenId(3)]).unwrap();
        assert!((z - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(d.prob(2), 0.0);
        assert!((d.prob(0) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn wrapper_equals_local_model_over_same_base() {
        let o = oracle();
        let corpus = random_canonical_corpus(o.vocab(), &mut stream_rng(1, 0), 100, 6);
        let lm = train_ngram(&corpus, o.vocab(), 2, 0.5).unwrap();
        let arch = CanonicalizedArchitecture::new(TabularLogitLM::from_ngram(&lm), o.clone());
        let local = LocalModel::new(&lm, o);
        for prefix in [vec![], vec![TokenId(3)], vec![TokenId(1), TokenId(4)]] {
            let (a, za) = arch.constrained_next_distribution(&prefix).unwrap();
            let (b, zb) = local.local_next_distribution(&prefix).unwrap();
            assert!((za - zb).abs() < 1e-12);
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_loss_examples() {
        let o = oracle();
        let arch = CanonicalizedArchitecture::new(TabularLogitLM::zeros(2, 6).unwrap(), o);
        assert_eq!(log_loss(&arch, &[]), Err(ModelError::EmptyCorpus));
        assert_eq!(
            log_loss(&arch, &[TokenString::new(), TokenString::from_ids(&[3, 2])]),
            Err(ModelError::InfiniteLoss { index: 1 })
        );
        // one token outcome among two, then EOS among two
        let v = crate::bpe::fixtures::single_a();
        let half = TabularLogitLM::zeros(1, v.len()).unwrap();
        assert!((log_loss(&half, &[TokenString::new()]).unwrap() - 1.0).abs() < 1e-15);
    }

    fn finite_difference<F: Fn(&TabularLogitLM) -> f64>(base: &TabularLogitLM, f: F) -> ContextTable {
        let h = 1e-5;
        let mut out = ContextTable::default();
        for (ctx, v) in &base.logits.0 {
            let mut row = vec![0.0; v.len()];
            for j in 0..v.len() {
                let mut plus = base.clone();
                plus.logits.0.get_mut(ctx).unwrap()[j] += h;
                let mut minus = base.clone();
                minus.logits.0.get_mut(ctx).unwrap()[j] -= h;
                row[j] = (f(&plus) - f(&minus)) / (2.0 * h);
            }
            out.0.insert(ctx.clone(), row);
        }
        out
    }

    fn assert_close(analytic: &ContextTable, numeric: &ContextTable, tol: f64) {
        for (ctx, v) in &numeric.0 {
            for (j, fd) in v.iter().enumerate() {
                let a = analytic.value(ctx, j);
                let scale = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() <= tol * scale, "ctx {ctx:?} outcome {j}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn log_loss_gradient_matches_finite_differences() {
        let o = oracle();
        let mut rng = stream_rng(21, 0);
        for _ in 0..5 {
            let arch = random_arch(&o, &mut rng);
            let corpus = random_canonical_corpus(o.vocab(), &mut rng, 10, 6);
            let (_, g) = grad_log_loss(&arch, &corpus).unwrap();
            let fd = finite_difference(&arch.base, |b| {
                log_loss(&CanonicalizedArchitecture::new(b.clone(), o.clone()), &corpus).unwrap()
            });
            assert_close(&g, &fd, 1e-4);
        }
    }

    #[test]
    fn masked_outcomes_have_zero_gradient() {
        let o = oracle();
        let arch = random_arch(&o, &mut stream_rng(2, 0));
        let corpus = random_canonical_corpus(o.vocab(), &mut stream_rng(3, 0), 30, 6);
        let (_, g) = grad_log_loss(&arch, &corpus).unwrap();
        // context [ab] forbids c
        assert_eq!(g.value(&[3], 2), 0.0);
        assert_eq!(g.value(&[2], 2), 0.0);
        assert_eq!(g.value(&[2], 4), 0.0);
    }

    #[test]
    fn empirical_optimum_has_zero_gradient() {
        let o = oracle();
        let corpus: Vec<TokenString> = (0..6u32)
            .flat_map(|t| std::iter::repeat_n(TokenString::from_ids(&[t]), t as usize + 1))
            .collect();
        let mut counts = [0.0f64; 7];
        for s in &corpus {
            for &t in s.iter() {
                counts[t.index()] += 1.0;
            }
            counts[6] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        let mut base = TabularLogitLM::zeros(1, 6).unwrap();
        base.logits.0.insert(vec![], counts.iter().map(|c| (c / total).ln()).collect());
        let arch = CanonicalizedArchitecture::unmasked(base, o);
        let (_, g) = grad_log_loss(&arch, &corpus).unwrap();
        assert!(g.norm() < 1e-8, "{}", g.norm());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let o = oracle();
        let mut rng = stream_rng(5, 0);
        let corpus = random_canonical_corpus(o.vocab(), &mut rng, 100, 6);
        let frozen = train_ngram(&corpus, o.vocab(), 2, 0.5).unwrap();
        for _ in 0..3 {
            let arch = random_arch(&o, &mut rng);
            let mode = KlMode::Exact { max_len: 3, limit: DEFAULT_ENUMERATION_LIMIT };
            let est = kl_to_base(&arch, &frozen, mode, &mut rng).unwrap();
            let fd = finite_difference(&arch.base, |b| {
                let a = CanonicalizedArchitecture::new(b.clone(), o.clone());
                kl_exact(&a, &frozen, 3, DEFAULT_ENUMERATION_LIMIT).unwrap().value
            });
            assert_close(&est.gradient, &fd, 1e-4);
        }
    }

    #[test]
    fn kl_exact_matches_string_enumeration_on_capped_models() {
        // With both models capped at L, the per-step sum is the full KL.
        let o = oracle();
        let mut rng = stream_rng(6, 0);
        let arch = random_arch(&o, &mut rng);
        let frozen = train_ngram(&random_canonical_corpus(o.vocab(), &mut rng, 80, 6), o.vocab(), 2, 0.5).unwrap();
        let l = 3;
        let est = kl_exact(&arch, &frozen, l - 1, DEFAULT_ENUMERATION_LIMIT).unwrap();
        let p = crate::token_lm::LengthCapped::new(&arch, l);
        let q = crate::token_lm::LengthCapped::new(&frozen, l);
        let e = enumerate_distribution(&p, l, DEFAULT_ENUMERATION_LIMIT).unwrap();
        let direct: f64 = e.strings.iter().map(|(s, pr)| pr * (pr.ln() - sequence_log_prob(&q, s))).sum();
        // steps at lengths 0..L-1 are shared; at length L both capped models put all mass on EOS.
        assert!((est.value - direct / LN_2).abs() < 1e-10, "{} vs {}", est.value, direct / LN_2);
    }

    #[test]
    fn kl_to_self_is_zero() {
        let o = oracle();
        let arch = random_arch(&o, &mut stream_rng(7, 0));
        let est = kl_exact(&arch, &arch, 3, DEFAULT_ENUMERATION_LIMIT).unwrap();
        assert!(est.value.abs() < 1e-12);
        assert!(est.gradient.norm() < 1e-12);
    }

    #[test]
    fn finetune_is_deterministic() {
        let o = oracle();
        let corpus = random_canonical_corpus(o.vocab(), &mut stream_rng(8, 0), 50, 6);
        let frozen = train_ngram(&corpus, o.vocab(), 2, 0.5).unwrap();
        let arch = CanonicalizedArchitecture::new(TabularLogitLM::from_ngram(&frozen), o);
        let config = FinetuneConfig {
            lambda: 0.3,
            steps: 20,
            learning_rate: 0.1,
            batch: 8,
            kl: KlMode::Sampled { samples: 8, max_len: 6 },
        };
        let a = finetune(&arch, &corpus, &frozen, &config, &mut stream_rng(1, 0)).unwrap();
        let b = finetune(&arch, &corpus, &frozen, &config, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.base, b.0.base);
        assert!(a.1.iter().any(|r| r.term == Term::Kl) && a.1.iter().any(|r| r.term == Term::LogLoss));
        let bad = FinetuneConfig { lambda: 1.5, ..config };
        assert!(finetune(&arch, &corpus, &frozen, &bad, &mut stream_rng(1, 0)).is_err());
    }
}
