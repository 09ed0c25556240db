//! Sequential training over a task list, the lower-triangular score matrix
//! it produces, and the OP/BWT summaries of that matrix.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParameterRegistry};
use crate::selection::{plan_full, plan_with, round_rng, SelectionHistory, SelectionPlan, Strategy};
use crate::tasks::{eval_exact_match, Example, TaskSpec};
use crate::tensor::Element;
use crate::trainer::{train_round, OptState, OptimizerConfig, TrainLog};

/// `S[t][i]`: score on task `i` after training round `t`, for `i ≤ t`.
/// Rows may be partial when a run stops mid-evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub tasks: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(tasks: Vec<String>) -> Self {
        Self { tasks, rows: Vec::new() }
    }

    /// Builds a matrix from complete rows; row `t` (1-based) must hold `t` scores.
    pub fn from_rows(tasks: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for row in rows {
            m.push_row(row.into_iter().map(Some).collect())?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<Option<f64>>) -> Result<()> {
        let t = self.rows.len() + 1;
        if t > self.tasks.len() {
            return Err(Error::Matrix(format!("row {t} exceeds {} tasks", self.tasks.len())));
        }
        if row.len() != t {
            return Err(Error::Matrix(format!("row {t} has {} entries", row.len())));
        }
        if let Some(bad) = row.iter().flatten().find(|s| !(0.0..=100.0).contains(*s)) {
            return Err(Error::Matrix(format!("score {bad} outside [0, 100] in row {t}")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Number of rows (training rounds) recorded.
    pub fn rounds(&self) -> usize {
        self.rows.len()
    }

    /// 1-based lookup of `S[t][i]`.
    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(i.checked_sub(1)?).copied().flatten()
    }

    pub fn filled(&self) -> usize {
        self.rows.iter().flatten().filter(|s| s.is_some()).count()
    }

    fn row(&self, t: usize) -> Result<Vec<f64>> {
        let row = t
            .checked_sub(1)
            .and_then(|i| self.rows.get(i))
            .ok_or_else(|| Error::Matrix(format!("round {t} not recorded ({} rounds)", self.rows.len())))?;
        row.iter()
            .copied()
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Matrix(format!("row {t} is incomplete")))
    }

    /// `OP_t = (1/t) Σ_{i≤t} S[t][i]`.
    pub fn op_score(&self, t: usize) -> Result<f64> {
        let row = self.row(t)?;
        Ok(row.iter().sum::<f64>() / t as f64)
    }

    /// `BWT_t = (1/t) Σ_{i<t} (S[t][i] − S[i][i])`.
    pub fn bwt_score(&self, t: usize) -> Result<f64> {
        if t < 2 {
            return Err(Error::Matrix(format!("BWT needs t ≥ 2, got {t}")));
        }
        let row = self.row(t)?;
        let mut sum = 0.0;
        for (i, &s) in row.iter().enumerate().take(t - 1) {
            let diag = self.get(i + 1, i + 1).ok_or_else(|| Error::Matrix(format!("diagonal entry {} missing", i + 1)))?;
            sum += s - diag;
        }
        Ok(sum / t as f64)
    }

    /// OP and BWT for every complete round.
    pub fn metrics(&self) -> Result<Metrics> {
        let mut m = Metrics::default();
        for t in 1..=self.rounds() {
            m.op.push(self.op_score(t)?);
            m.bwt.push(if t < 2 { None } else { Some(self.bwt_score(t)?) });
        }
        Ok(m)
    }

    /// CSV with header `round,<task>…`; blank cells above the diagonal.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["round".to_string()];
        header.extend(self.tasks.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            for i in 0..self.tasks.len() {
                rec.push(row.get(i).copied().flatten().map(|s| s.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(input: impl Read) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("round") || header.len() < 2 {
            return Err(Error::Matrix("header must be `round,<task>,…`".into()));
        }
        let mut m = Self::new(header.iter().skip(1).map(String::from).collect());
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let t = k + 1;
            if rec.get(0).and_then(|s| s.parse::<usize>().ok()) != Some(t) {
                return Err(Error::Matrix(format!("row {t} is labelled `{}`", rec.get(0).unwrap_or(""))));
            }
            let mut row = Vec::with_capacity(t);
            for (i, cell) in rec.iter().skip(1).enumerate() {
                let value = if cell.is_empty() {
                    None
                } else {
                    Some(cell.parse::<f64>().map_err(|_| Error::Matrix(format!("bad score `{cell}` in row {t}")))?)
                };
                match (i < t, value) {
                    (true, v) => row.push(v),
                    (false, None) => {}
                    (false, Some(_)) => return Err(Error::Matrix(format!("row {t} has a score above the diagonal"))),
                }
            }
            if row.len() != t {
                return Err(Error::Matrix(format!("row {t} has {} cells", row.len())));
            }
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// `op[t-1] = OP_t`, `bwt[t-1] = BWT_t` (absent for t = 1).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub op: Vec<f64>,
    pub bwt: Vec<Option<f64>>,
}

/// Rounds `x` up, treating values within 1e-9 of an integer as that integer.
fn robust_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Current data plus `⌈fraction·|D_i|⌉` examples drawn without replacement
/// from each prior dataset, shuffled with the round's seed stream.
pub fn replay_mix<E: Clone>(history: &[&[E]], current: &[E], fraction: f64, seed: u64, round: usize) -> Result<Vec<E>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("replay fraction must lie in [0, 1], got {fraction}")));
    }
    let mut rng = round_rng(seed, round);
    let mut out: Vec<E> = current.to_vec();
    if fraction == 0.0 {
        return Ok(out);
    }
    for prior in history {
        let k = robust_ceil(fraction * prior.len() as f64).min(prior.len());
        out.extend(crate::tasks::sample_without_replacement(prior, k, &mut rng));
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    SeqFt,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Masking {
    Fft,
    Hft {
        strategy: Strategy,
        #[serde(default)]
        freeze_io: bool,
        #[serde(default = "half")]
        ratio: f64,
    },
}

fn half() -> f64 {
    0.5
}

/// Per-task epochs in suite order.
pub const DEFAULT_EPOCHS: [usize; 8] = [5, 3, 7, 5, 3, 5, 5, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sequence: Sequence,
    pub masking: Masking,
    pub replay_fraction: f64,
    /// Seeds plan draws and replay samples.
    pub seed: u64,
    /// Epochs for task `t`; tasks beyond the list use `opt.epochs`.
    pub epochs: Vec<usize>,
    pub opt: OptimizerConfig,
    /// Start every round with fresh optimizer state.
    pub reset_optimizer: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sequence: Sequence::SeqFt,
            masking: Masking::Fft,
            replay_fraction: 0.10,
            seed: 0,
            epochs: DEFAULT_EPOCHS.to_vec(),
            opt: OptimizerConfig::default(),
            reset_optimizer: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.opt.validate()?;
        if !(0.0..=1.0).contains(&self.replay_fraction) {
            return Err(Error::InvalidArgument(format!("replay_fraction must lie in [0, 1], got {}", self.replay_fraction)));
        }
        Ok(())
    }
}

/// Everything a sequential run produces.
#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub matrix: EvalMatrix,
    pub history: SelectionHistory,
    /// Parameters at the start of the run and after each round.
    pub snapshots: Vec<ParameterRegistry<T>>,
    pub logs: Vec<TrainLog>,
    pub model: Model<T>,
}

/// The plan a masking mode draws for `round`.
pub fn plan_for<T: Element>(
    masking: &Masking,
    registry: &ParameterRegistry<T>,
    round: usize,
    seed: u64,
) -> Result<SelectionPlan> {
    match *masking {
        Masking::Fft => Ok(plan_full(registry, round, seed)),
        Masking::Hft { strategy, freeze_io, ratio } => plan_with(registry, strategy, round, seed, freeze_io, ratio),
    }
}

/// Trains `model0` on `tasks` in order, evaluating tasks `1..=t` after round `t`.
pub fn run_sequence<T: Element>(model0: &Model<T>, tasks: &[TaskSpec], cfg: &RunConfig) -> Result<RunResult<T>> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("a run needs at least one task".into()));
    }
    let mut model = model0.clone();
    let mut matrix = EvalMatrix::new(tasks.iter().map(|t| t.name.clone()).collect());
    let mut history = SelectionHistory::default();
    let mut snapshots = vec![model.registry.clone()];
    let mut logs = Vec::with_capacity(tasks.len());
    let mut state = OptState::new(model.registry.len());
    for (k, task) in tasks.iter().enumerate() {
        let round = k + 1;
        let plan = plan_for(&cfg.masking, &model.registry, round, cfg.seed)?;
        let data: Vec<Example> = match cfg.sequence {
            Sequence::SeqFt => task.train.clone(),
            Sequence::Replay => {
                let prior: Vec<&[Example]> = tasks[..k].iter().map(|t| t.train.as_slice()).collect();
                replay_mix(&prior, &task.train, cfg.replay_fraction, cfg.seed, round)?
            }
        };
        let opt = OptimizerConfig { epochs: cfg.epochs.get(k).copied().unwrap_or(cfg.opt.epochs), ..cfg.opt.clone() };
        if cfg.reset_optimizer {
            state = OptState::new(model.registry.len());
        }
        logs.push(train_round(&mut model, &plan, &data, &opt, &mut state)?);
        history.push(plan)?;
        snapshots.push(model.registry.clone());
        let mut row = Vec::with_capacity(round);
        for t in &tasks[..round] {
            match eval_exact_match(&model, t) {
                Ok(s) => row.push(Some(s)),
                Err(e) => {
                    row.resize(round, None);
                    matrix.push_row(row)?;
                    return Err(Error::Aborted { round, partial: Box::new(matrix), source: Box::new(e) });
                }
            }
        }
        matrix.push_row(row)?;
    }
    Ok(RunResult { matrix, history, snapshots, logs, model })
}
