//! Eight synthetic sequence-to-sequence tasks over one shared vocabulary.
//!
//! Token layout: `PAD`, `SEP`, `EOS`, one marker per task kind, then symbols.
//! An example's prompt is `[marker, x…, SEP]` and its answer is `y…`, followed
//! by `EOS` for kinds whose answer length varies.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenBatch};
use crate::tensor::Element;

pub const PAD: u32 = 0;
pub const SEP: u32 = 1;
pub const EOS: u32 = 2;
pub const MARKER_BASE: u32 = 3;
pub const SYMBOL_BASE: u32 = MARKER_BASE + TaskKind::ALL.len() as u32;

/// Number of examples scored per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input_tokens: Vec<u32>,
    pub target_tokens: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    SortTokens,
    ModularAdd,
    Parity,
    Successor,
    Dedup,
    HistogramMax,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::SortTokens,
        TaskKind::ModularAdd,
        TaskKind::Parity,
        TaskKind::Successor,
        TaskKind::Dedup,
        TaskKind::HistogramMax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SortTokens => "sort_tokens",
            TaskKind::ModularAdd => "modular_add",
            TaskKind::Parity => "parity",
            TaskKind::Successor => "successor",
            TaskKind::Dedup => "dedup",
            TaskKind::HistogramMax => "histogram_max",
        }
    }

    fn index(self) -> usize {
        TaskKind::ALL.iter().position(|&k| k == self).expect("listed")
    }

    pub fn marker(self) -> u32 {
        MARKER_BASE + self.index() as u32
    }

    /// Kinds whose answer is a single token and carries no `EOS`.
    pub fn fixed_length(self) -> bool {
        matches!(self, TaskKind::ModularAdd | TaskKind::Parity | TaskKind::HistogramMax)
    }

    fn default_lengths(self) -> (usize, usize) {
        match self {
            TaskKind::ModularAdd => (2, 5),
            TaskKind::Parity => (6, 10),
            TaskKind::HistogramMax => (3, 7),
            _ => (3, 6),
        }
    }

    /// Number of distinct symbol values an input position can take.
    fn input_values(self, cfg: &TaskConfig) -> u32 {
        match self {
            TaskKind::ModularAdd => cfg.modulus,
            TaskKind::Parity => 2,
            _ => cfg.alphabet,
        }
    }

    /// Number of distinct symbol values an answer position can take.
    fn answer_values(self, cfg: &TaskConfig) -> u32 {
        match self {
            TaskKind::ModularAdd => cfg.modulus,
            TaskKind::Parity => 2,
            _ => cfg.alphabet,
        }
    }

    /// Applies the task rule to symbol values (not token ids).
    pub fn rule(self, xs: &[u32], cfg: &TaskConfig) -> Vec<u32> {
        match self {
            TaskKind::Copy => xs.to_vec(),
            TaskKind::Reverse => xs.iter().rev().copied().collect(),
            TaskKind::SortTokens => {
                let mut v = xs.to_vec();
                v.sort_unstable();
                v
            }
            TaskKind::ModularAdd => vec![xs.iter().sum::<u32>() % cfg.modulus],
            TaskKind::Parity => vec![xs.iter().sum::<u32>() % 2],
            TaskKind::Successor => xs.iter().map(|&x| (x + 1) % cfg.alphabet).collect(),
            TaskKind::Dedup => {
                let mut seen = HashSet::new();
                xs.iter().copied().filter(|x| seen.insert(*x)).collect()
            }
            TaskKind::HistogramMax => {
                let mut counts = vec![0usize; cfg.alphabet as usize];
                for &x in xs {
                    counts[x as usize] += 1;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                vec![counts.iter().position(|&c| c == best).unwrap_or(0) as u32]
            }
        }
    }

    /// Whether `xs` is an admissible input for this kind. Copy and dedup
    /// inputs repeat at least one symbol, so their rules never agree.
    fn accepts(self, xs: &[u32]) -> bool {
        match self {
            TaskKind::Copy | TaskKind::Dedup => xs.len() != xs.iter().collect::<HashSet<_>>().len(),
            _ => true,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Task(format!("unknown task kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub train_size: usize,
    pub eval_size: usize,
    /// Symbol values available to sequence kinds.
    pub alphabet: u32,
    pub modulus: u32,
    /// Overrides the kind's default input length range.
    pub lengths: Option<(usize, usize)>,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { train_size: 512, eval_size: 500, alphabet: 8, modulus: 7, lengths: None, vocab_size: 64, max_seq_len: 16 }
    }
}

/// A task with materialized train and eval splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub config: TaskConfig,
    pub min_len: usize,
    pub max_len: usize,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskSpec {
    /// Token ids the answer may use, `EOS` included for variable-length kinds.
    pub fn answer_tokens(&self) -> Vec<u32> {
        let mut out: Vec<u32> = (0..self.kind.answer_values(&self.config)).map(|v| SYMBOL_BASE + v).collect();
        if !self.kind.fixed_length() {
            out.push(EOS);
        }
        out
    }

    /// The unique correct answer for a prompt, or `None` if the prompt is malformed.
    pub fn solve(&self, input_tokens: &[u32]) -> Option<Vec<u32>> {
        let (&marker, rest) = input_tokens.split_first()?;
        let (&sep, body) = rest.split_last()?;
        if marker != self.kind.marker() || sep != SEP {
            return None;
        }
        let limit = self.kind.input_values(&self.config);
        let xs: Vec<u32> = body
            .iter()
            .map(|&t| t.checked_sub(SYMBOL_BASE).filter(|&v| v < limit))
            .collect::<Option<_>>()?;
        if xs.len() < self.min_len || xs.len() > self.max_len || !self.kind.accepts(&xs) {
            return None;
        }
        Some(encode_answer(self.kind, &xs, &self.config))
    }

    /// Writes one split as line-delimited `{input_tokens, target_tokens, task}` records.
    pub fn write_jsonl(&self, split: &[Example], mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Record<'a> {
            input_tokens: &'a [u32],
            target_tokens: &'a [u32],
            task: &'a str,
        }
        for e in split {
            let rec = Record { input_tokens: &e.input_tokens, target_tokens: &e.target_tokens, task: &self.name };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn encode_answer(kind: TaskKind, xs: &[u32], cfg: &TaskConfig) -> Vec<u32> {
    let mut out: Vec<u32> = kind.rule(xs, cfg).into_iter().map(|v| SYMBOL_BASE + v).collect();
    if !kind.fixed_length() {
        out.push(EOS);
    }
    out
}

fn task_rng(seed: u64, kind: TaskKind, split: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((kind.index() as u64) << 1) | split);
    rng
}

fn draw_split(
    rng: &mut ChaCha8Rng,
    kind: TaskKind,
    cfg: &TaskConfig,
    (lo, hi): (usize, usize),
    n: usize,
    seen: &mut HashSet<Vec<u32>>,
) -> Result<Vec<Example>> {
    let values = kind.input_values(cfg);
    let mut out = Vec::with_capacity(n);
    let budget = 200 * n + 10_000;
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let len = rng.random_range(lo..=hi);
        let xs: Vec<u32> = (0..len).map(|_| rng.random_range(0..values)).collect();
        if !kind.accepts(&xs) || !seen.insert(xs.clone()) {
            continue;
        }
        let mut input_tokens = Vec::with_capacity(len + 2);
        input_tokens.push(kind.marker());
        input_tokens.extend(xs.iter().map(|&v| SYMBOL_BASE + v));
        input_tokens.push(SEP);
        out.push(Example { input_tokens, target_tokens: encode_answer(kind, &xs, cfg) });
    }
    if out.len() < n {
        return Err(Error::Task(format!("{kind}: only {} distinct inputs available, {n} requested", out.len())));
    }
    Ok(out)
}

/// Generates a task deterministically. Eval and train inputs come from
/// separate seed streams and never overlap.
pub fn make_task(kind: TaskKind, seed: u64, cfg: &TaskConfig) -> Result<TaskSpec> {
    let (lo, hi) = cfg.lengths.unwrap_or_else(|| kind.default_lengths());
    if cfg.train_size == 0 || cfg.eval_size == 0 {
        return Err(Error::Task("train_size and eval_size must be positive".into()));
    }
    if lo == 0 || lo > hi {
        return Err(Error::Task(format!("invalid length range {lo}..={hi}")));
    }
    let symbols = cfg.vocab_size.saturating_sub(SYMBOL_BASE as usize);
    let min_alphabet = match kind {
        TaskKind::ModularAdd | TaskKind::Parity => 1,
        _ => 2,
    };
    if cfg.alphabet < min_alphabet || cfg.modulus < 2 || cfg.alphabet.max(cfg.modulus) as usize > symbols {
        return Err(Error::Task(format!(
            "{kind}: vocabulary of {} leaves {symbols} symbols, alphabet {} / modulus {} do not fit",
            cfg.vocab_size, cfg.alphabet, cfg.modulus
        )));
    }
    if matches!(kind, TaskKind::Copy | TaskKind::Dedup) && hi < 2 {
        return Err(Error::Task(format!("{kind} needs inputs of length ≥ 2")));
    }
    let answer_len = match kind {
        k if k.fixed_length() => 1,
        TaskKind::Dedup => hi,
        _ => hi + 1,
    };
    let fed = hi + 2 + answer_len - 1;
    if fed > cfg.max_seq_len {
        return Err(Error::Task(format!("{kind}: examples need {fed} positions, max_seq_len is {}", cfg.max_seq_len)));
    }
    let mut seen = HashSet::new();
    let eval = draw_split(&mut task_rng(seed, kind, 1), kind, cfg, (lo, hi), cfg.eval_size, &mut seen)?;
    let train = draw_split(&mut task_rng(seed, kind, 0), kind, cfg, (lo, hi), cfg.train_size, &mut seen)?;
    Ok(TaskSpec { name: kind.as_str().into(), kind, seed, config: cfg.clone(), min_len: lo, max_len: hi, train, eval })
}

/// The eight kinds in their default order, all generated from `seed`.
pub fn default_suite(seed: u64, cfg: &TaskConfig) -> Result<Vec<TaskSpec>> {
    TaskKind::ALL.iter().map(|&k| make_task(k, seed, cfg)).collect()
}

/// Anything that can predict answer tokens for a batch of prompts.
pub trait Predictor: Sync {
    /// Predicted answer for each example, restricted to `answer_tokens`.
    fn predict(&self, examples: &[Example], answer_tokens: &[u32]) -> Result<Vec<Vec<u32>>>;
}

fn argmax_over(row: &[f64], allowed: &[u32]) -> u32 {
    let mut best = allowed[0];
    for &tok in &allowed[1..] {
        if row[tok as usize] > row[best as usize] {
            best = tok;
        }
    }
    best
}

impl<T: Element> Predictor for Model<T> {
    /// Teacher-forced argmax at every answer position. An answer is correct
    /// under this scheme exactly when greedy decoding would reproduce it, since
    /// decoding only diverges from the forced prefix after a first wrong token.
    fn predict(&self, examples: &[Example], answer_tokens: &[u32]) -> Result<Vec<Vec<u32>>> {
        if answer_tokens.is_empty() {
            return Err(Error::InvalidArgument("empty answer alphabet".into()));
        }
        let (tokens, _) = self.lm_batch(examples)?;
        let logits = self.forward_logits(&tokens)?;
        let (seq, vocab) = (tokens.seq(), self.config.vocab_size);
        let data = logits.data();
        let mut row = vec![0.0f64; vocab];
        Ok(examples
            .iter()
            .enumerate()
            .map(|(b, e)| {
                let start = e.input_tokens.len() - 1;
                (0..e.target_tokens.len())
                    .map(|i| {
                        let off = (b * seq + start + i) * vocab;
                        for (r, x) in row.iter_mut().zip(&data[off..off + vocab]) {
                            *r = x.as_f64();
                        }
                        argmax_over(&row, answer_tokens)
                    })
                    .collect()
            })
            .collect())
    }
}

/// Autoregressive greedy decoding restricted to `answer_tokens`, stopping at
/// `EOS`, after `max_new` tokens, or at the context limit.
pub fn greedy_decode<T: Element>(model: &Model<T>, prompt: &[u32], answer_tokens: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() <= model.config.max_seq_len {
        let logits = model.forward_logits(&TokenBatch::new(&[seq.clone()])?)?;
        let vocab = model.config.vocab_size;
        let last = &logits.data()[(seq.len() - 1) * vocab..seq.len() * vocab];
        let row: Vec<f64> = last.iter().map(|x| x.as_f64()).collect();
        let tok = argmax_over(&row, answer_tokens);
        out.push(tok);
        if tok == EOS {
            break;
        }
        seq.push(tok);
    }
    Ok(out)
}

/// Percentage of eval examples whose predicted answer matches the target exactly.
pub fn eval_exact_match<P: Predictor + ?Sized>(predictor: &P, task: &TaskSpec) -> Result<f64> {
    if task.eval.is_empty() {
        return Err(Error::Task(format!("{}: empty eval split", task.name)));
    }
    let answers = task.answer_tokens();
    let hits = task
        .eval
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let preds = predictor.predict(chunk, &answers)?;
            Ok(chunk.iter().zip(&preds).filter(|(e, p)| &e.target_tokens == *p).count())
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * hits as f64 / task.eval.len() as f64)
}

/// Fraction of `on`'s eval examples whose target is also produced by `rule`'s task rule.
pub fn rule_overlap(rule: TaskKind, on: &TaskSpec) -> f64 {
    let hits = on
        .eval
        .iter()
        .filter(|e| {
            let body = &e.input_tokens[1..e.input_tokens.len() - 1];
            let xs: Vec<u32> = body.iter().map(|&t| t - SYMBOL_BASE).collect();
            if xs.iter().any(|&v| v >= on.config.alphabet) {
                return false;
            }
            encode_answer(rule, &xs, &on.config) == e.target_tokens
        })
        .count();
    hits as f64 / on.eval.len() as f64
}

/// Chance-level exact match for uniform guessing over the answer alphabet,
/// averaged over the task's eval split.
pub fn chance_level(task: &TaskSpec) -> f64 {
    let k = task.answer_tokens().len() as f64;
    let total: f64 = task.eval.iter().map(|e| k.powi(-(e.target_tokens.len() as i32))).sum();
    100.0 * total / task.eval.len() as f64
}

/// Picks `n` distinct elements of `items` uniformly at random.
pub(crate) fn sample_without_replacement<T: Clone>(items: &[T], n: usize, rng: &mut impl Rng) -> Vec<T> {
    items.choose_multiple(rng, n).cloned().collect()
}
