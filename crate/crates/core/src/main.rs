//! `canonbpe`: command-line front end.
//!
//! Machine-readable results go to stdout as line records
//! (`kind key=value ...`); human summaries go to stderr. Exit codes: 0 on
//! success, 1 on errors, 2 when a check or validation reports findings.

use std::fmt::Display;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use canonical_bpe::analysis::{bigram_freq_parallel, exact_bigram_freq, report_noncanonical, Estimator};
use canonical_bpe::canonicality::{format_overrides, load_overrides, validate_vocabulary, CanonicalityOracle, Override};
use canonical_bpe::conditioning::{
    estimate_z_parallel, exact_z, logloss_eval, rejection_sample, LocalModel, TruncationPolicy,
};
use canonical_bpe::construction::{
    finetune, kl_to_base, log_loss, CanonicalizedArchitecture, FinetuneConfig, KlMode, TabularLogitLM,
};
use canonical_bpe::error::CanonicalityError;
use canonical_bpe::escape;
use canonical_bpe::parallel::{run_chunked, stream_rng};
use canonical_bpe::token_lm::{train_ngram, NGramLM, TokenLM};
use canonical_bpe::{BaseSpec, MergeFormat, TokenId, TokenString, Vocabulary};

#[derive(Parser, Debug)]
#[command(
    name = "canonbpe",
    version,
    about = "Canonical BPE tokenization checks and canonicality-aware inference over token-level language models",
    after_help = "Every long option can also be given in a --config file as a `name=value` line, using the option's long name as the key. Options given on the command line win."
)]
struct Cli {
    /// Flat `key=value` file supplying option values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct VocabArgs {
    /// Merge list, one `left right` pair per line, highest priority first
    #[arg(long, value_name = "FILE")]
    merges: PathBuf,
    /// Base alphabet: `LO-HI`, `bytes:ESCAPED` or `byte-level`; its order fixes the base token ids
    #[arg(long, default_value = "0-255")]
    base: BaseSpec,
    /// Subword notation in the merge list: `escaped` (\xNN) or `byte-level`
    #[arg(long, default_value = "escaped")]
    merge_format: MergeFormat,
    /// Bigram overrides, lines of `left_id right_id allow|deny`
    #[arg(long, value_name = "FILE")]
    overrides: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Length bound in tokens (0 = none)
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Handling of draws that hit the length bound
    #[arg(long, default_value = "exclude", value_parser = ["exclude", "force-eos"])]
    policy: String,
    /// Worker threads; results do not depend on this
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl SamplingArgs {
    fn policy(&self) -> TruncationPolicy {
        self.policy.parse().expect("validated by clap")
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum VocabAction {
    Load,
    Validate,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CheckMode {
    Roundtrip,
    Bigram,
    Conflict,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum InputFormat {
    /// Token ids separated by spaces or commas
    Ids,
    /// Subwords separated by spaces, in the merge list's notation
    Yields,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SampleMethod {
    Local,
    Rejection,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum KlModeArg {
    Exact,
    Sampled,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum OverridesAction {
    Scan,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a merge list and report its size, or validate its tokens
    Vocab {
        action: VocabAction,
        #[command(flatten)]
        vocab: VocabArgs,
        /// `subword<TAB>id` table to compare ids against (validate only)
        #[arg(long, value_name = "FILE")]
        mapping: Option<PathBuf>,
    },
    /// Canonicality verdict for each input line
    Check {
        #[command(flatten)]
        vocab: VocabArgs,
        /// Input file (default: stdin)
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ids")]
        input_format: InputFormat,
        #[arg(long, value_enum, default_value = "all")]
        mode: CheckMode,
    },
    /// Train an add-α n-gram model on text, one document per line
    Train {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, required = true, value_delimiter = ',', value_name = "FILE")]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        /// Where to write the model
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Draw canonical strings from the local model or by rejection
    Sample {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "local")]
        method: SampleMethod,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        max_attempts: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Importance-sampling estimate of the canonicality rate
    EstimateZ {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Exact canonicality rate over strings up to a length, by enumeration
    ExactZ {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        /// Maximum number of prefixes to visit
        #[arg(long, default_value_t = 20_000_000)]
        limit: u64,
    },
    /// Bits per string under the base, local and global models
    Eval {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, required = true, value_delimiter = ',', value_name = "FILE")]
        corpus: Vec<PathBuf>,
        /// Known canonicality rate; estimated by sampling when absent
        #[arg(long)]
        z: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Fine-tune a masked tabular model initialized from an n-gram model
    Finetune {
        #[command(flatten)]
        vocab: VocabArgs,
        /// N-gram model used both as initialization and as the frozen KL anchor
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, required = true, value_delimiter = ',', value_name = "FILE")]
        corpus: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', value_name = "FILE")]
        heldout: Vec<PathBuf>,
        /// Regularization weights; each value is an independent run
        #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,0.2")]
        lambda: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "sampled")]
        kl_mode: KlModeArg,
        /// Draws per KL step in sampled mode
        #[arg(long, default_value_t = 16)]
        kl_samples: usize,
        /// Length bound for the KL term
        #[arg(long, default_value_t = 6)]
        max_len: usize,
        #[arg(long, default_value_t = 20_000_000)]
        limit: u64,
        /// Train without the canonicality mask (control run)
        #[arg(long)]
        unmasked: bool,
        /// Starting point: the n-gram's log-probabilities, or all logits zero
        #[arg(long, default_value = "model", value_parser = ["model", "uniform"])]
        init: String,
    },
    /// Adjacent-pair frequencies and the most frequent noncanonical pairs
    Analyze {
        #[command(flatten)]
        vocab: VocabArgs,
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, default_value = "rb", value_parser = ["mc", "rb", "exact"])]
        estimator: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Analyze the locally masked model instead of the raw model
        #[arg(long)]
        local: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 20_000_000)]
        limit: u64,
    },
    /// Find pairs the oracle rejects although they occur in trusted tokenized text
    Overrides {
        action: OverridesAction,
        #[command(flatten)]
        vocab: VocabArgs,
        /// Token-id lines produced by the deployed tokenizer
        #[arg(long, value_name = "FILE")]
        tokens: PathBuf,
    },
}

/// Output sink for line records.
struct Records<W: Write> {
    out: W,
}

impl<W: Write> Records<W> {
    fn emit(&mut self, kind: &str, fields: &[(&str, &dyn Display)]) -> Result<()> {
        let mut line = kind.to_string();
        for (k, v) in fields {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            line.push_str(&v.to_string());
        }
        writeln!(self.out, "{line}")?;
        Ok(())
    }
}

fn text_field(bytes: &[u8]) -> String {
    escape::escape(bytes)
}

/// Inserts `--key value` for config entries the command line leaves unset.
fn apply_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut config_path = None;
    let mut sub_index = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" {
            config_path = argv.get(i + 1).cloned();
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_string());
        } else if sub_index.is_none() && !a.starts_with('-') {
            sub_index = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(sub_index)) = (config_path, sub_index) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&argv[sub_index]) else {
        return Ok(argv);
    };
    let given: Vec<&str> = argv
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split_once('=').map_or(a, |(k, _)| k))
        .collect();
    let mut extra = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{path}:{}: expected key=value", idx + 1);
        };
        let (key, value) = (key.trim(), value.trim());
        if key == "config" || given.contains(&key) {
            continue;
        }
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key)) else {
            eprintln!("note: config key {key} does not apply to {}", argv[sub_index]);
            continue;
        };
        if arg.get_action().takes_values() {
            extra.push(format!("--{key}={value}"));
        } else if matches!(value, "true" | "1" | "yes") {
            extra.push(format!("--{key}"));
        }
    }
    let mut out = argv;
    out.extend(extra);
    Ok(out)
}

/// Echo of every resolved option of the subcommand.
fn config_echo(name: &str, m: &ArgMatches) -> Vec<(String, String)> {
    let mut fields = vec![("command".to_string(), name.to_string())];
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(name) else {
        return fields;
    };
    for arg in sub.get_arguments() {
        let id = arg.get_id().as_str();
        if let Ok(Some(values)) = m.try_get_raw(id) {
            let joined = values.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",");
            fields.push((id.replace('_', "-"), escape::escape(joined.as_bytes())));
        }
    }
    fields
}

fn help_with_config_keys(cmd: clap::Command) -> clap::Command {
    let mut cmd = cmd;
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |mut sub| {
            let ids: Vec<(String, String)> = sub
                .get_arguments()
                .filter_map(|a| a.get_long().map(|l| (a.get_id().to_string(), l.to_string())))
                .collect();
            for (id, long) in ids {
                sub = sub.mut_arg(id, |a| {
                    let help = a.get_help().map(|h| h.to_string()).unwrap_or_default();
                    let sep = if help.is_empty() { "" } else { " " };
                    a.help(format!("{help}{sep}[config: {long}]"))
                });
            }
            sub
        });
    }
    cmd
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run() -> Result<ExitCode> {
    let argv: Vec<String> = std::env::args().collect();
    let argv = apply_config(argv)?;
    let matches = match help_with_config_keys(Cli::command()).try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print()?;
            return Ok(ExitCode::from(code));
        }
    };
    let cli = Cli::from_arg_matches(&matches)?;
    let (name, sub_m) = matches.subcommand().expect("subcommand is required");
    let stdout = io::stdout();
    let mut rec = Records { out: BufWriter::new(stdout.lock()) };
    let echo = config_echo(name, sub_m);
    let echo_refs: Vec<(&str, &dyn Display)> = echo.iter().map(|(k, v)| (k.as_str(), v as &dyn Display)).collect();
    rec.emit("config", &echo_refs)?;
    let code = dispatch(cli.command, &mut rec);
    rec.out.flush()?;
    code
}

fn dispatch<W: Write>(command: Command, rec: &mut Records<W>) -> Result<ExitCode> {
    match command {
        Command::Vocab { action, vocab, mapping } => cmd_vocab(action, &vocab, mapping.as_deref(), rec),
        Command::Check { vocab, input, input_format, mode } => cmd_check(&vocab, input.as_deref(), input_format, mode, rec),
        Command::Train { vocab, corpus, order, alpha, out } => cmd_train(&vocab, &corpus, order, alpha, &out, rec),
        Command::Sample { vocab, model, method, n, max_attempts, sampling } => {
            cmd_sample(&vocab, &model, method, n, max_attempts, &sampling, rec)
        }
        Command::EstimateZ { vocab, model, n, sampling } => cmd_estimate_z(&vocab, &model, n, &sampling, rec),
        Command::ExactZ { vocab, model, max_len, limit } => cmd_exact_z(&vocab, &model, max_len, limit, rec),
        Command::Eval { vocab, model, corpus, z, n, sampling } => cmd_eval(&vocab, &model, &corpus, z, n, &sampling, rec),
        Command::Finetune {
            vocab,
            model,
            corpus,
            heldout,
            lambda,
            steps,
            learning_rate,
            batch,
            seed,
            kl_mode,
            kl_samples,
            max_len,
            limit,
            unmasked,
            init,
        } => {
            let kl = match kl_mode {
                KlModeArg::Exact => KlMode::Exact { max_len, limit: limit as u128 },
                KlModeArg::Sampled => KlMode::Sampled { samples: kl_samples, max_len },
            };
            let uniform_init = init == "uniform";
            let run = FinetuneRun { lambdas: lambda, steps, learning_rate, batch, seed, kl, unmasked, uniform_init };
            cmd_finetune(&vocab, &model, &corpus, &heldout, &run, rec)
        }
        Command::Analyze { vocab, model, estimator, n, seed, max_len, k, local, workers, limit } => {
            let estimator: Estimator = estimator.parse()?;
            cmd_analyze(&vocab, &model, estimator, n, seed, max_len, k, local, workers, limit, rec)
        }
        Command::Overrides { action: OverridesAction::Scan, vocab, tokens } => cmd_overrides_scan(&vocab, &tokens, rec),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_vocab(args: &VocabArgs) -> Result<Arc<Vocabulary>> {
    let text = read_text(&args.merges)?;
    let vocab = Vocabulary::from_merges(&text, &args.base, args.merge_format)
        .with_context(|| format!("loading {}", args.merges.display()))?;
    Ok(Arc::new(vocab))
}

fn load_oracle(args: &VocabArgs, vocab: Arc<Vocabulary>) -> Result<Arc<CanonicalityOracle>> {
    let mut oracle = CanonicalityOracle::new(vocab);
    if let Some(path) = &args.overrides {
        let table = load_overrides(&read_text(path)?, oracle.vocab()).with_context(|| format!("loading {}", path.display()))?;
        oracle = oracle.with_overrides(table);
    }
    Ok(Arc::new(oracle))
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<NGramLM> {
    NGramLM::from_text(&read_text(path)?, vocab).with_context(|| format!("loading {}", path.display()))
}

/// Lines of a file as byte strings, line terminators removed.
fn lines_of(bytes: &[u8]) -> Vec<&[u8]> {
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.into_iter().map(|l| l.strip_suffix(b"\r").unwrap_or(l)).collect()
}

/// Encodes one document per line.
fn read_corpus(paths: &[PathBuf], vocab: &Vocabulary) -> Result<Vec<TokenString>> {
    let mut out = Vec::new();
    for path in paths {
        let bytes = read_bytes(path)?;
        for (i, line) in lines_of(&bytes).into_iter().enumerate() {
            out.push(vocab.encode(line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
        }
    }
    Ok(out)
}

fn parse_ids(line: &str, vocab: &Vocabulary) -> Result<TokenString> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|f| !f.is_empty())
        .map(|f| {
            let t = TokenId(f.parse().with_context(|| format!("{f:?} is not a token id"))?);
            if !vocab.contains(t) {
                bail!("unknown token id {t}");
            }
            Ok(t)
        })
        .collect()
}

fn parse_yields(line: &str, vocab: &Vocabulary, format: MergeFormat) -> Result<TokenString> {
    line.split_whitespace()
        .map(|f| {
            let bytes = match format {
                MergeFormat::Escaped => escape::unescape(f),
                MergeFormat::ByteLevel => escape::from_byte_level(f),
            }
            .with_context(|| format!("bad subword {f:?}"))?;
            vocab.token_of(&bytes).with_context(|| format!("unknown subword {f:?}"))
        })
        .collect()
}

fn cmd_vocab<W: Write>(action: VocabAction, args: &VocabArgs, mapping: Option<&Path>, rec: &mut Records<W>) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let (tokens, merges) = (vocab.len(), vocab.num_merges());
    if action == VocabAction::Load {
        rec.emit("vocab", &[("tokens", &tokens), ("merges", &merges), ("fingerprint", &vocab.fingerprint())])?;
        eprintln!("{tokens} tokens, {merges} merges");
        return Ok(ExitCode::SUCCESS);
    }
    let excluded = validate_vocabulary(&vocab);
    rec.emit(
        "vocab",
        &[("tokens", &tokens), ("merges", &merges), ("excluded", &excluded.len()), ("fingerprint", &vocab.fingerprint())],
    )?;
    for t in &excluded {
        rec.emit("excluded", &[("id", t), ("subword", &text_field(vocab.subword(*t)?))])?;
    }
    eprintln!("{tokens} tokens, {merges} merges, {} excluded", excluded.len());
    let mut findings = !excluded.is_empty();
    if let Some(path) = mapping {
        let (mismatched, missing) = vocab.check_mapping(&read_text(path)?).with_context(|| format!("checking {}", path.display()))?;
        rec.emit("mapping", &[("mismatched", &mismatched.len()), ("missing", &missing)])?;
        for line in &mismatched {
            rec.emit("mismatch", &[("line", line)])?;
        }
        eprintln!("mapping: {} mismatched lines, {missing} tokens missing", mismatched.len());
        findings |= !mismatched.is_empty() || missing > 0;
    }
    Ok(if findings { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

/// Verdict of one checking method, with the offending position if known.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Verdict {
    canonical: bool,
    detail: Option<String>,
}

fn verdict_word(canonical: bool) -> &'static str {
    if canonical {
        "CANONICAL"
    } else {
        "NONCANONICAL"
    }
}

fn check_roundtrip(oracle: &CanonicalityOracle, tokens: &[TokenId]) -> Verdict {
    Verdict { canonical: oracle.round_trip_canonical(tokens), detail: None }
}

fn check_bigram(oracle: &CanonicalityOracle, tokens: &[TokenId]) -> Verdict {
    if let Some(t) = tokens.iter().find(|t| oracle.is_excluded(**t)) {
        return Verdict { canonical: false, detail: Some(format!("excluded-token={t}")) };
    }
    match tokens.windows(2).position(|w| !oracle.bigram_canonical(w[0], w[1])) {
        None => Verdict { canonical: true, detail: None },
        Some(i) => Verdict { canonical: false, detail: Some(format!("position={i}")) },
    }
}

fn check_conflict(oracle: &CanonicalityOracle, tokens: &[TokenId]) -> Result<Verdict> {
    if let Some(t) = tokens.iter().find(|t| oracle.is_excluded(**t)) {
        return Ok(Verdict { canonical: false, detail: Some(format!("excluded-token={t}")) });
    }
    for (i, w) in tokens.windows(2).enumerate() {
        match oracle.find_conflict(w[0], w[1]) {
            Ok(None) => {}
            Ok(Some(c)) => return Ok(Verdict { canonical: false, detail: Some(format!("position={i} conflict={c}")) }),
            Err(CanonicalityError::ExcludedToken(t)) => {
                return Ok(Verdict { canonical: false, detail: Some(format!("excluded-token={t}")) })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Verdict { canonical: true, detail: None })
}

fn cmd_check<W: Write>(
    args: &VocabArgs,
    input: Option<&Path>,
    format: InputFormat,
    mode: CheckMode,
    rec: &mut Records<W>,
) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let bytes = match input {
        Some(p) => read_bytes(p)?,
        None => {
            let mut buf = Vec::new();
            io::stdin().read_to_end(&mut buf)?;
            buf
        }
    };
    let text = String::from_utf8(bytes).context("input is not UTF-8")?;
    let (mut noncanonical, mut errors, mut disagreements, mut total) = (0, 0, 0, 0);
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        total += 1;
        let parsed = match format {
            InputFormat::Ids => parse_ids(line, &vocab),
            InputFormat::Yields => parse_yields(line, &vocab, args.merge_format),
        };
        let tokens = match parsed {
            Ok(t) => t,
            Err(e) => {
                errors += 1;
                rec.emit("check", &[("line", &line_no), ("error", &escape::escape(format!("{e:#}").as_bytes()))])?;
                continue;
            }
        };
        let (verdict, agree) = match mode {
            CheckMode::Roundtrip => (check_roundtrip(&oracle, &tokens), None),
            CheckMode::Bigram => (check_bigram(&oracle, &tokens), None),
            CheckMode::Conflict => (check_conflict(&oracle, &tokens)?, None),
            CheckMode::All => {
                let rt = check_roundtrip(&oracle, &tokens);
                let bg = check_bigram(&oracle, &tokens);
                let cf = check_conflict(&oracle, &tokens)?;
                let agree = rt.canonical == bg.canonical && bg.canonical == cf.canonical;
                (cf, Some(agree))
            }
        };
        noncanonical += !verdict.canonical as usize;
        let mut line_out = format!("check line={line_no} tokens={tokens} verdict={}", verdict_word(verdict.canonical));
        if let Some(d) = &verdict.detail {
            line_out.push(' ');
            line_out.push_str(d);
        }
        if let Some(agree) = agree {
            line_out.push_str(&format!(" agree={agree}"));
            disagreements += !agree as usize;
        }
        writeln!(rec.out, "{line_out}")?;
    }
    eprintln!("{total} lines: {} canonical, {noncanonical} noncanonical, {errors} errors", total - noncanonical - errors);
    if disagreements > 0 {
        eprintln!("{disagreements} lines where the checking methods disagree");
        return Ok(ExitCode::from(1));
    }
    Ok(if errors > 0 {
        ExitCode::from(1)
    } else if noncanonical > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_train<W: Write>(args: &VocabArgs, corpus: &[PathBuf], order: usize, alpha: f64, out: &Path, rec: &mut Records<W>) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let strings = read_corpus(corpus, &vocab)?;
    let lm = train_ngram(&strings, &vocab, order, alpha)?;
    std::fs::write(out, lm.to_text()).with_context(|| format!("writing {}", out.display()))?;
    let tokens: usize = strings.iter().map(|s| s.len()).sum();
    rec.emit(
        "train",
        &[("strings", &strings.len()), ("tokens", &tokens), ("order", &order), ("alpha", &alpha), ("contexts", &lm.contexts().len())],
    )?;
    eprintln!("trained order-{order} model on {} strings ({tokens} tokens)", strings.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample<W: Write>(
    args: &VocabArgs,
    model: &Path,
    method: SampleMethod,
    n: usize,
    max_attempts: usize,
    s: &SamplingArgs,
    rec: &mut Records<W>,
) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let lm = load_model(model, &vocab)?;
    let policy = s.policy();
    match method {
        SampleMethod::Local => {
            let local = LocalModel::new(&lm, oracle);
            let chunks = run_chunked(s.seed, n, s.workers, |rng, k| {
                (0..k).map(|_| local.sample_local(rng, s.max_len, policy)).collect::<Vec<_>>()
            });
            let mut weights = Vec::with_capacity(n);
            for (index, sample) in chunks.into_iter().flatten().enumerate() {
                let sample = sample?;
                weights.push(sample.estimator_weight(policy));
                rec.emit(
                    "sample",
                    &[
                        ("index", &index),
                        ("tokens", &sample.tokens),
                        ("text", &text_field(&vocab.decode(&sample.tokens)?)),
                        ("log_weight", &sample.log_weight),
                        ("truncated", &sample.truncated),
                    ],
                )?;
            }
            let mean = weights.iter().sum::<f64>() / weights.len().max(1) as f64;
            rec.emit("summary", &[("method", &"local"), ("samples", &n), ("z_estimate", &mean), ("seed", &s.seed)])?;
            eprintln!("{n} local samples, mean weight {mean:.6}");
            Ok(ExitCode::SUCCESS)
        }
        SampleMethod::Rejection => {
            let chunks = run_chunked(s.seed, n, s.workers, |rng, k| {
                let mut out = Vec::with_capacity(k);
                for _ in 0..k {
                    let r = rejection_sample(&lm, &oracle, rng, max_attempts, s.max_len);
                    let stop = r.is_err();
                    out.push(r);
                    if stop {
                        break;
                    }
                }
                out
            });
            let (mut accepted, mut attempts) = (0usize, 0usize);
            for (index, r) in chunks.into_iter().flatten().enumerate() {
                match r {
                    Ok(a) => {
                        accepted += 1;
                        attempts += a.attempts;
                        rec.emit(
                            "sample",
                            &[
                                ("index", &index),
                                ("tokens", &a.tokens),
                                ("text", &text_field(&vocab.decode(&a.tokens)?)),
                                ("attempts", &a.attempts),
                            ],
                        )?;
                    }
                    Err(e) => {
                        rec.out.flush()?;
                        return Err(e.into());
                    }
                }
            }
            let rate = accepted as f64 / attempts.max(1) as f64;
            rec.emit(
                "summary",
                &[("method", &"rejection"), ("samples", &accepted), ("attempts", &attempts), ("acceptance_rate", &rate), ("seed", &s.seed)],
            )?;
            eprintln!("{accepted} accepted of {attempts} draws (rate {rate:.6})");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn cmd_estimate_z<W: Write>(args: &VocabArgs, model: &Path, n: usize, s: &SamplingArgs, rec: &mut Records<W>) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let lm = load_model(model, &vocab)?;
    let local = LocalModel::new(&lm, oracle);
    let z = estimate_z_parallel(&local, s.seed, n, s.max_len, s.policy(), s.workers)?;
    rec.emit(
        "estimate_z",
        &[
            ("z_estimate", &z.mean),
            ("z_stderr", &z.standard_error),
            ("samples", &z.sample_count),
            ("truncated_count", &z.truncated_count),
            ("seed", &s.seed),
            ("max_len", &s.max_len),
            ("policy", &s.policy()),
        ],
    )?;
    eprintln!("Z ≈ {:.6} ± {:.6} ({} samples, {} truncated)", z.mean, z.standard_error, z.sample_count, z.truncated_count);
    if z.truncated_count > 0 {
        eprintln!("warning: {} draws reached the length bound", z.truncated_count);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_exact_z<W: Write>(args: &VocabArgs, model: &Path, max_len: usize, limit: u64, rec: &mut Records<W>) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let lm = load_model(model, &vocab)?;
    let z = exact_z(&lm, &oracle, max_len, limit as u128)?;
    rec.emit("exact_z", &[("z", &z.z), ("remainder", &z.remainder), ("max_len", &max_len)])?;
    eprintln!("Z(≤{max_len}) = {:.12}, at most {:.3e} more beyond the bound", z.z, z.remainder);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval<W: Write>(
    args: &VocabArgs,
    model: &Path,
    corpus: &[PathBuf],
    z_given: Option<f64>,
    n: usize,
    s: &SamplingArgs,
    rec: &mut Records<W>,
) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let lm = load_model(model, &vocab)?;
    let strings = read_corpus(corpus, &vocab)?;
    let local = LocalModel::new(&lm, oracle);
    let (z, stderr, samples, truncated) = match z_given {
        Some(z) => (z, 0.0, 0, 0),
        None => {
            let e = estimate_z_parallel(&local, s.seed, n, s.max_len, s.policy(), s.workers)?;
            (e.mean, e.standard_error, e.sample_count, e.truncated_count)
        }
    };
    let report = logloss_eval(&strings, &local, z)?;
    if report.skipped > 0 {
        eprintln!("warning: skipped {} noncanonical corpus strings", report.skipped);
    }
    eprintln!("{:<10} {:>14}", "method", "bits/string");
    for (method, bits) in [("baseline", report.baseline), ("local", report.local), ("global", report.global)] {
        rec.emit(
            "eval",
            &[
                ("method", &method),
                ("bits_per_string", &bits),
                ("z_estimate", &z),
                ("z_stderr", &stderr),
                ("samples", &samples),
                ("seed", &s.seed),
                ("max_len", &s.max_len),
                ("truncated_count", &truncated),
                ("evaluated", &report.evaluated),
                ("skipped", &report.skipped),
            ],
        )?;
        eprintln!("{method:<10} {bits:>14.4}");
    }
    Ok(ExitCode::SUCCESS)
}

struct FinetuneRun {
    lambdas: Vec<f64>,
    steps: usize,
    learning_rate: f64,
    batch: usize,
    seed: u64,
    kl: KlMode,
    unmasked: bool,
    uniform_init: bool,
}

fn cmd_finetune<W: Write>(
    args: &VocabArgs,
    model: &Path,
    corpus: &[PathBuf],
    heldout: &[PathBuf],
    run: &FinetuneRun,
    rec: &mut Records<W>,
) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let lm = load_model(model, &vocab)?;
    let train = read_corpus(corpus, &vocab)?;
    let held = if heldout.is_empty() { Vec::new() } else { read_corpus(heldout, &vocab)? };
    let init = if run.uniform_init {
        TabularLogitLM::zeros(lm.order(), lm.num_tokens())?
    } else {
        TabularLogitLM::from_ngram(&lm)
    };
    let arch = if run.unmasked {
        CanonicalizedArchitecture::unmasked(init, oracle)
    } else {
        CanonicalizedArchitecture::new(init, oracle)
    };
    let results: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = run
            .lambdas
            .iter()
            .enumerate()
            .map(|(i, &lambda)| {
                let (arch, train, lm) = (&arch, &train, &lm);
                scope.spawn(move || -> Result<_> {
                    let config = FinetuneConfig {
                        lambda,
                        steps: run.steps,
                        learning_rate: run.learning_rate,
                        batch: run.batch,
                        kl: run.kl,
                    };
                    let mut rng = stream_rng(run.seed, i as u64);
                    let (trained, trace) = finetune(arch, train, lm, &config, &mut rng)?;
                    let kl = kl_to_base(&trained, lm, run.kl, &mut rng)?;
                    Ok((lambda, trained, trace, kl))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    eprintln!("{:>8} {:>12} {:>12} {:>10}", "lambda", "train bits", "heldout bits", "kl bits");
    for (i, r) in results.into_iter().enumerate() {
        let (lambda, trained, trace, kl) = r?;
        let stream = i as u64;
        for t in &trace {
            rec.emit(
                "trace",
                &[
                    ("lambda", &lambda),
                    ("step", &t.step),
                    ("term", &t.term),
                    ("objective_estimate", &t.objective_estimate),
                    ("grad_norm", &t.grad_norm),
                    ("seed", &run.seed),
                    ("stream", &stream),
                ],
            )?;
        }
        let train_bits = log_loss(&trained, &train)?;
        let held_bits = if held.is_empty() { f64::NAN } else { log_loss(&trained, &held)? };
        rec.emit(
            "finetune",
            &[
                ("lambda", &lambda),
                ("train_bits", &train_bits),
                ("heldout_bits", &held_bits),
                ("kl_bits", &kl.value),
                ("kl_stderr", &kl.standard_error),
                ("masked", &!run.unmasked),
                ("seed", &run.seed),
            ],
        )?;
        eprintln!("{lambda:>8} {train_bits:>12.4} {held_bits:>12.4} {:>10.4}", kl.value);
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_analyze<W: Write>(
    args: &VocabArgs,
    model: &Path,
    estimator: Estimator,
    n: usize,
    seed: u64,
    max_len: usize,
    k: usize,
    local: bool,
    workers: usize,
    limit: u64,
    rec: &mut Records<W>,
) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let lm = load_model(model, &vocab)?;
    let masked = LocalModel::new(&lm, oracle.clone());
    let target: &dyn TokenLM = if local { &masked } else { &lm };
    let table = match estimator {
        Estimator::Exact => exact_bigram_freq(target, max_len, limit as u128)?,
        _ => bigram_freq_parallel(target, estimator, seed, n, max_len, workers)?,
    };
    rec.emit(
        "analyze",
        &[
            ("estimator", &table.estimator),
            ("samples", &table.samples),
            ("seed", &seed),
            ("max_len", &max_len),
            ("truncated", &table.truncated),
            ("truncation_mass", &table.truncation_mass),
            ("pairs", &table.entries.len()),
            ("local", &local),
        ],
    )?;
    let report = report_noncanonical(&table, &oracle, k);
    eprintln!("{:>4}  {:<16} {:<16} {:>10}", "rank", "left", "right", "per string");
    for e in &report {
        let se = table.entries[&(e.left, e.right)].standard_error;
        rec.emit(
            "noncanonical",
            &[
                ("rank", &e.rank),
                ("left", &e.left),
                ("right", &e.right),
                ("left_yield", &text_field(&e.left_yield)),
                ("right_yield", &text_field(&e.right_yield)),
                ("estimate", &format!("{:.2e}", e.estimate)),
                ("stderr", &format!("{se:.2e}")),
            ],
        )?;
        eprintln!(
            "{:>4}  {:<16} {:<16} {:>10.2e}",
            e.rank,
            text_field(&e.left_yield),
            text_field(&e.right_yield),
            e.estimate
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_overrides_scan<W: Write>(args: &VocabArgs, tokens: &Path, rec: &mut Records<W>) -> Result<ExitCode> {
    let vocab = load_vocab(args)?;
    let oracle = load_oracle(args, vocab.clone())?;
    let text = read_text(tokens)?;
    let corpus = text
        .lines()
        .enumerate()
        .map(|(i, l)| parse_ids(l, &vocab).with_context(|| format!("{}:{}", tokens.display(), i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let found = oracle.false_negatives(corpus.iter().map(|s| &s[..]));
    for ((l, r), c) in &found {
        rec.emit(
            "override",
            &[
                ("left", l),
                ("right", r),
                ("verdict", &"allow"),
                ("count", c),
                ("left_yield", &text_field(vocab.subword(*l)?)),
                ("right_yield", &text_field(vocab.subword(*r)?)),
            ],
        )?;
    }
    eprintln!("{} pairs rejected by the oracle occur in {} trusted strings", found.len(), corpus.len());
    if !found.is_empty() {
        let table = found.iter().map(|(pair, _)| (*pair, Override::Allow)).collect();
        eprint!("{}", format_overrides(&table));
    }
    Ok(ExitCode::SUCCESS)
}
