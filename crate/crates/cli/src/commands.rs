//! One function per subcommand. Each writes its artifacts under the output
//! directory and returns a summary the binary prints.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hft_core::analysis::{
    block_variation, mean_block_variation, runtime_report, variation_by_selected_times, write_block_csv,
    write_runtime_csv, write_selected_times_csv, Norm, RuntimeRow,
};
use hft_core::continual::{run_sequence, EvalMatrix, Metrics};
use hft_core::io::{load_checkpoint, read_header, save_checkpoint, LoadOptions, RunMetadata};
use hft_core::merge::{half_reset, reset_plan};
use hft_core::selection::{mask_stats, plan_ratio, MaskStats};
use hft_core::tasks::{eval_exact_match, make_task, TaskKind, TaskSpec};
use hft_core::trainer::{train_round, OptState, TrainLog};
use hft_core::{build_model, DType, Element, SelectionHistory, Strategy};
use serde::Serialize;

use crate::config::ExperimentConfig;

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn metadata(cfg: &ExperimentConfig, seed: u64, round: usize) -> RunMetadata {
    RunMetadata {
        seeds: vec![seed, cfg.suite.seed],
        strategy: cfg.run.mask.as_str().to_string(),
        round,
        config_hash: Some(cfg.hash()),
        tool_version: Some(TOOL_VERSION.to_string()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn suite(cfg: &ExperimentConfig) -> Result<Vec<TaskSpec>> {
    cfg.kinds().into_iter().map(|k| Ok(make_task(k, cfg.suite.seed, &cfg.tasks)?)).collect()
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub task: String,
    pub steps: usize,
    pub score: f64,
    pub checkpoint: PathBuf,
    pub stats: MaskStats,
}

/// One training round on `task` (the first suite task by default).
pub fn cmd_train(cfg: &ExperimentConfig, task: Option<TaskKind>) -> Result<TrainSummary> {
    match cfg.model.dtype {
        DType::F32 => train_impl::<f32>(cfg, task),
        DType::F64 => train_impl::<f64>(cfg, task),
    }
}

fn train_impl<T: Element>(cfg: &ExperimentConfig, task: Option<TaskKind>) -> Result<TrainSummary> {
    let kind = match task {
        Some(k) => k,
        None => cfg.kinds()[0],
    };
    let spec = make_task(kind, cfg.suite.seed, &cfg.tasks)?;
    let seed = cfg.run.seeds[0];
    let mut model = build_model::<T>(&cfg.model, seed)?;
    let plan = hft_core::continual::plan_for(&cfg.masking(), &model.registry, 1, seed)?;
    let stats = mask_stats(&plan, &model.registry)?;
    let mut state = OptState::new(model.registry.len());
    let log = train_round(&mut model, &plan, &spec.train, &cfg.optimizer, &mut state)?;
    let score = eval_exact_match(&model, &spec)?;

    let dir = &cfg.out_dir;
    prepare_dir(dir)?;
    let mut history = SelectionHistory::default();
    history.push(plan.clone())?;
    let checkpoint = dir.join("round_1.ckpt");
    save_checkpoint(&model, &history, &metadata(cfg, seed, 1), &checkpoint)?;
    log.write_jsonl(create(&dir.join("train_log.jsonl"))?)?;
    write_json(&dir.join("plan.json"), &plan)?;
    let mut matrix = EvalMatrix::new(vec![spec.name.clone()]);
    matrix.push_row(vec![Some(score)])?;
    matrix.write_csv(create(&dir.join("eval_matrix.csv"))?)?;
    Ok(TrainSummary { task: spec.name, steps: log.steps(), score, checkpoint, stats })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClrunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: Metrics,
}

/// A full sequential run per configured seed, written to `out/seed_<s>/`.
pub fn cmd_clrun(cfg: &ExperimentConfig) -> Result<Vec<ClrunSummary>> {
    if cfg.kinds().len() < 2 {
        bail!("a continual run needs at least two tasks");
    }
    let tasks = suite(cfg)?;
    cfg.run.seeds
        .iter()
        .map(|&seed| match cfg.model.dtype {
            DType::F32 => clrun_seed::<f32>(cfg, &tasks, seed),
            DType::F64 => clrun_seed::<f64>(cfg, &tasks, seed),
        })
        .collect()
}

fn clrun_seed<T: Element>(cfg: &ExperimentConfig, tasks: &[TaskSpec], seed: u64) -> Result<ClrunSummary> {
    let model0 = build_model::<T>(&cfg.model, seed)?;
    let result = run_sequence(&model0, tasks, &cfg.run_config(seed))?;
    let dir = cfg.out_dir.join(format!("seed_{seed}"));
    prepare_dir(&dir)?;
    save_checkpoint(&model0, &SelectionHistory::default(), &metadata(cfg, seed, 0), dir.join("base.ckpt"))?;
    let mut history = SelectionHistory::default();
    for (k, plan) in result.history.plans.iter().enumerate() {
        let round = k + 1;
        history.push(plan.clone())?;
        let model = hft_core::Model::from_registry(cfg.model.clone(), result.snapshots[round].clone())?;
        save_checkpoint(&model, &history, &metadata(cfg, seed, round), dir.join(format!("round_{round}.ckpt")))?;
        result.logs[k].write_jsonl(create(&dir.join(format!("train_log_round_{round}.jsonl")))?)?;
    }
    result.matrix.write_csv(create(&dir.join("eval_matrix.csv"))?)?;
    let metrics = result.matrix.metrics()?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(ClrunSummary { seed, dir, metrics })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub t: usize,
    pub op: f64,
    /// Absent for `t = 1`.
    pub bwt: Option<f64>,
}

/// OP_t and BWT_t of an eval-matrix CSV; `t` defaults to the last round.
pub fn cmd_metrics(csv: &Path, t: Option<usize>) -> Result<MetricsReport> {
    let file = File::open(csv).with_context(|| format!("opening {}", csv.display()))?;
    let matrix = EvalMatrix::read_csv(file).with_context(|| format!("reading {}", csv.display()))?;
    let t = t.unwrap_or(matrix.rounds());
    let op = matrix.op_score(t)?;
    let bwt = if t > 1 { Some(matrix.bwt_score(t)?) } else { None };
    Ok(MetricsReport { t, op, bwt })
}

#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    pub strategy: Strategy,
    pub seed: u64,
    /// Share of transformer-layer elements rolled back to the base.
    pub reset_fraction_layers: f64,
    /// Share of all elements rolled back, EMB and HEAD included.
    pub reset_fraction_total: f64,
    pub output: PathBuf,
}

/// Half-Reset of `theta_ft` towards `theta_0` with a plan drawn by `strategy`.
pub fn cmd_merge(
    theta_ft: &Path,
    theta_0: &Path,
    strategy: Strategy,
    seed: u64,
    reset_io: bool,
    out_dir: &Path,
) -> Result<MergeReport> {
    match checkpoint_dtype(theta_ft)? {
        DType::F32 => merge_impl::<f32>(theta_ft, theta_0, strategy, seed, reset_io, out_dir),
        DType::F64 => merge_impl::<f64>(theta_ft, theta_0, strategy, seed, reset_io, out_dir),
    }
}

fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let header = read_header(path)?;
    Ok(header.model_config.dtype)
}

fn merge_impl<T: Element>(
    theta_ft: &Path,
    theta_0: &Path,
    strategy: Strategy,
    seed: u64,
    reset_io: bool,
    out_dir: &Path,
) -> Result<MergeReport> {
    let ft = load_checkpoint::<T>(theta_ft, LoadOptions::default())?;
    let base = load_checkpoint::<T>(theta_0, LoadOptions::default())?;
    ft.model.registry.check_compatible(&base.model.registry).context("checkpoints are not mergeable")?;
    let plan = reset_plan(&ft.model.registry, strategy, seed, reset_io)?;
    let merged = half_reset(&ft.model.registry, &base.model.registry, &plan)?;
    let stats = mask_stats(&plan, &ft.model.registry)?;
    prepare_dir(out_dir)?;
    let output = out_dir.join("merged.ckpt");
    let model = hft_core::Model::from_registry(ft.model.config.clone(), merged)?;
    let meta = RunMetadata { strategy: format!("half-reset-{}", strategy.as_str()), ..ft.metadata.clone() };
    save_checkpoint(&model, &ft.history, &meta, &output)?;
    let report = MergeReport {
        strategy,
        seed,
        reset_fraction_layers: 1.0 - stats.layers.fraction(),
        reset_fraction_total: 1.0 - stats.total.fraction(),
        output,
    };
    write_json(&out_dir.join("merge_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub block_csv: PathBuf,
    pub selected_times_csv: PathBuf,
    pub fft_baseline: Option<f64>,
}

/// Drift of `final_ckpt` from `base_ckpt`, using the selection history the
/// final checkpoint carries; `fft_ckpt` adds the paired FFT baseline.
pub fn cmd_analyze(
    final_ckpt: &Path,
    base_ckpt: &Path,
    fft_ckpt: Option<&Path>,
    norm: Norm,
    out_dir: &Path,
) -> Result<AnalyzeSummary> {
    match checkpoint_dtype(final_ckpt)? {
        DType::F32 => analyze_impl::<f32>(final_ckpt, base_ckpt, fft_ckpt, norm, out_dir),
        DType::F64 => analyze_impl::<f64>(final_ckpt, base_ckpt, fft_ckpt, norm, out_dir),
    }
}

fn analyze_impl<T: Element>(
    final_ckpt: &Path,
    base_ckpt: &Path,
    fft_ckpt: Option<&Path>,
    norm: Norm,
    out_dir: &Path,
) -> Result<AnalyzeSummary> {
    let fin = load_checkpoint::<T>(final_ckpt, LoadOptions::default())?;
    let base = load_checkpoint::<T>(base_ckpt, LoadOptions::default())?;
    let blocks = block_variation(&fin.model.registry, &base.model.registry, norm)?;
    let buckets = variation_by_selected_times(&fin.model.registry, &base.model.registry, &fin.history, norm)?;
    let fft_baseline = match fft_ckpt {
        Some(p) => {
            let fft = load_checkpoint::<T>(p, LoadOptions::default())?;
            Some(mean_block_variation(&fft.model.registry, &base.model.registry, norm)?)
        }
        None => None,
    };
    prepare_dir(out_dir)?;
    let block_csv = out_dir.join("variation_by_block.csv");
    let selected_times_csv = out_dir.join("variation_by_selected_times.csv");
    write_block_csv(&blocks, norm, create(&block_csv)?)?;
    write_selected_times_csv(&buckets, fft_baseline, norm, create(&selected_times_csv)?)?;
    Ok(AnalyzeSummary { block_csv, selected_times_csv, fft_baseline })
}

/// Trains one round per trainable ratio on identical data and steps and
/// reports wall time relative to the fully trainable run.
pub fn cmd_bench(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<RuntimeRow>> {
    match cfg.model.dtype {
        DType::F32 => bench_impl::<f32>(cfg, ratios),
        DType::F64 => bench_impl::<f64>(cfg, ratios),
    }
}

fn bench_impl<T: Element>(cfg: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<RuntimeRow>> {
    if !ratios.contains(&1.0) {
        bail!("the ratio ladder must include 1.0, the full fine-tuning reference");
    }
    let spec = make_task(cfg.kinds()[0], cfg.suite.seed, &cfg.tasks)?;
    let seed = cfg.run.seeds[0];
    let model0 = build_model::<T>(&cfg.model, seed)?;
    let mut logs: Vec<(f64, TrainLog)> = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let mut model = model0.clone();
        let plan = plan_ratio(&model.registry, 1, seed, r, cfg.run.freeze_io)?;
        let mut state = OptState::new(model.registry.len());
        logs.push((r, train_round(&mut model, &plan, &spec.train, &cfg.optimizer, &mut state)?));
    }
    let pairs: Vec<(f64, &TrainLog)> = logs.iter().map(|(r, l)| (*r, l)).collect();
    let rows = runtime_report(&pairs)?;
    prepare_dir(&cfg.out_dir)?;
    write_runtime_csv(&rows, create(&cfg.out_dir.join("runtime.csv"))?)?;
    Ok(rows)
}
