//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Numeric arguments select criteria by number.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use hft_cli::commands::{cmd_bench, cmd_metrics};
use hft_cli::config::{ExperimentConfig, MaskKind};
use hft_core::analysis::{block_variation, entry_variations, spearman, variation_by_selected_times, Norm};
use hft_core::continual::{run_sequence, RunResult};
use hft_core::io::{encode_checkpoint, decode_checkpoint, load_checkpoint, save_checkpoint, LoadOptions, RunMetadata};
use hft_core::merge::{half_reset, task_vector};
use hft_core::selection::{mask_stats, plan_category, plan_full};
use hft_core::tasks::{make_task, TaskConfig, TaskKind};
use hft_core::tensor::finite_diff_check;
use hft_core::trainer::{
    frozen_deviation, train_penalty, train_round, LinearRegression, Objective, OptState, OptimizerConfig,
    RegressionSample,
};
use hft_core::{build_model, CheckpointError, DType, Error, Model, ModelConfig, SelectionHistory, SelectionPlan, Strategy};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const METRIC_TOL: f64 = 0.05;
/// The SeqFT 7b OP computes to 45.65, on the edge of the band around 45.7.
const METRIC_EDGE: f64 = 1e-9;
const METRIC_SECONDS: f64 = 1.0;
const SELECTION_SEEDS: u64 = 100;
const FROZEN_STEPS: usize = 500;
const GRAD_COORDS: usize = 64;
const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const LAMBDAS: [f64; 5] = [0.0, 1.0, 10.0, 100.0, 1000.0];
const PENALTY_TOL: f64 = 1e-3;
const FORGETTING_SEEDS: usize = 5;
const FORGETTING_MIN_WINS: usize = 4;
const FORGETTING_MINUTES: f64 = 20.0;
const BENCH_REPEATS: usize = 3;
const SPEARMAN_MIN: f64 = 0.8;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk(dtype: DType) -> ModelConfig {
    ModelConfig { dtype, ..ModelConfig::default() }
}

fn metric_oracle() -> Outcome {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let reference: [(&str, Option<f64>, f64); 5] = [
        ("seqft_7b.csv", Some(45.7), -10.2),
        ("seqft_hft_7b.csv", Some(51.3), -5.6),
        ("replay_7b.csv", None, 1.4),
        ("replay_hft_7b.csv", None, 2.1),
        ("lora_seqft_13b.csv", None, -30.0),
    ];
    let start = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    for (file, op, bwt) in reference {
        let r = cmd_metrics(&fixtures.join(file), None).map_err(|e| format!("{file}: {e:#}"))?;
        let got_bwt = r.bwt.ok_or(format!("{file}: no BWT"))?;
        ok &= r.t == 8 && (got_bwt - bwt).abs() <= METRIC_TOL + METRIC_EDGE;
        if let Some(op) = op {
            ok &= (r.op - op).abs() <= METRIC_TOL + METRIC_EDGE;
            notes.push(format!("{file} OP {:.4} BWT {got_bwt:.4}", r.op));
        } else {
            notes.push(format!("{file} BWT {got_bwt:.4}"));
        }
    }
    // SeqFT 7b in integer tenths: 3652 / 8 = 456.5, which rounds half up to 457.
    let tenths: Vec<i64> = std::fs::read_to_string(fixtures.join("seqft_7b.csv"))
        .map_err(|e| e.to_string())?
        .lines()
        .last()
        .ok_or("empty fixture")?
        .split(',')
        .skip(1)
        .map(|c| (c.parse::<f64>().unwrap() * 10.0).round() as i64)
        .collect();
    let sum: i64 = tenths.iter().sum();
    ok &= (2 * sum + 8) / 16 == 457;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < METRIC_SECONDS;
    check(ok, format!("{}; {secs:.3}s", notes.join(", ")))
}

fn selection_exactness() -> Outcome {
    let model = build_model::<f32>(&desk(DType::F32), 0).map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    let mut distinct = BTreeSet::new();
    for seed in 0..SELECTION_SEEDS {
        let plan = plan_category(&model.registry, 1, seed, false).map_err(|e| e.to_string())?;
        let stats = mask_stats(&plan, &model.registry).map_err(|e| e.to_string())?;
        if 2 * stats.layers.trainable_elements != stats.layers.elements {
            bad.push(seed);
        }
        distinct.insert(plan.frozen);
    }
    check(
        bad.is_empty(),
        format!("{SELECTION_SEEDS} seeds, {} distinct plans, seeds off half: {bad:?}", distinct.len()),
    )
}

fn frozen_bit_identity() -> Outcome {
    let mut model = build_model::<f32>(&desk(DType::F32), 3).map_err(|e| e.to_string())?;
    let cfg = TaskConfig { train_size: 400, ..TaskConfig::default() };
    let task = make_task(TaskKind::Reverse, 3, &cfg).map_err(|e| e.to_string())?;
    let opt = OptimizerConfig { epochs: 20, batch_size: 16, learning_rate: 1e-3, ..OptimizerConfig::default() };
    let plan = plan_category(&model.registry, 1, 3, false).map_err(|e| e.to_string())?;
    let start = model.registry.clone();
    let mut state = OptState::new(model.registry.len());
    let log = train_round(&mut model, &plan, &task.train, &opt, &mut state)
        .map_err(|e| e.to_string())?;
    let mut frozen_same = 0;
    let mut moved = 0;
    for (after, before) in model.registry.iter().zip(start.iter()) {
        if plan.is_frozen(&after.name) {
            frozen_same += usize::from(after.tensor.bits_eq(&before.tensor));
        } else {
            moved += usize::from(!after.tensor.bits_eq(&before.tensor));
        }
    }
    let dev = frozen_deviation(&model.registry, &start, &plan).map_err(|e| e.to_string())?;
    check(
        log.steps() == FROZEN_STEPS && frozen_same == plan.frozen.len() && dev == 0.0 && moved > 0,
        format!(
            "{} steps, {frozen_same}/{} frozen tensors byte-identical, ‖(I−M)(θ−θ0)‖ = {dev}, {moved} trainable tensors moved",
            log.steps(),
            plan.frozen.len()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let mut model = build_model::<f64>(&desk(DType::F64), 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3 ^ 0x5eed);
    let flat: Vec<f64> = model.registry.flatten().into_iter().map(|x| x + 0.5 * (rng.random::<f64>() - 0.5)).collect();
    model.registry = model.registry.unflatten(&flat).map_err(|e| e.to_string())?;
    let task = make_task(TaskKind::SortTokens, 1, &TaskConfig { train_size: 8, eval_size: 4, ..TaskConfig::default() })
        .map_err(|e| e.to_string())?;
    let batch = &task.train[..4];
    let (_, grads) = model.loss_and_grads(batch, &vec![true; model.registry.len()]).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.as_ref().unwrap().data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut coords: Vec<usize> = sample(&mut rng, flat.len(), GRAD_COORDS).into_vec();
    coords.sort_unstable();
    let f = |theta: &[f64]| {
        let m = Model::from_registry(model.config.clone(), model.registry.unflatten(theta).unwrap()).unwrap();
        m.loss_and_grads(batch, &vec![false; m.registry.len()]).unwrap().0
    };
    let err = finite_diff_check(f, &flat, &analytic, &coords, GRAD_H);
    check(err < GRAD_TOL, format!("{} coordinates, max relative error {err:.3e} (h = {GRAD_H:e})", coords.len()))
}

fn half_reset_correctness() -> Outcome {
    let mut model = build_model::<f32>(&desk(DType::F32), 5).map_err(|e| e.to_string())?;
    let theta0_f32 = model.registry.clone();
    let task = make_task(TaskKind::Copy, 5, &TaskConfig::default()).map_err(|e| e.to_string())?;
    let opt = OptimizerConfig { epochs: 2, learning_rate: 1e-3, ..OptimizerConfig::default() };
    let full = plan_full(&model.registry, 1, 5);
    let mut state = OptState::new(model.registry.len());
    train_round(&mut model, &full, &task.train, &opt, &mut state).map_err(|e| e.to_string())?;
    let theta0 = theta0_f32.cast::<f64>();
    let theta_ft = model.registry.cast::<f64>();
    let plan = plan_category(&theta0, 1, 5, false).map_err(|e| e.to_string())?;
    let reset = half_reset(&theta_ft, &theta0, &plan).map_err(|e| e.to_string())?;
    let composed = task_vector(&theta_ft, &theta0)
        .and_then(|tv| tv.apply_masked(&theta0, |n| !plan.is_frozen(n)))
        .map_err(|e| e.to_string())?;
    let (mut base_elems, mut layer_elems, mut mismatched) = (0u64, 0u64, 0u64);
    for ((r, b), f) in reset.iter().zip(theta0.iter()).zip(theta_ft.iter()) {
        let source = if plan.is_frozen(&r.name) { b } else { f };
        mismatched += r.tensor.data().iter().zip(source.tensor.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count() as u64;
        if r.category.in_layers() {
            layer_elems += r.tensor.numel() as u64;
            if plan.is_frozen(&r.name) {
                base_elems += r.tensor.numel() as u64;
            }
        }
    }
    let identity = reset.bits_eq(&composed);
    check(
        2 * base_elems == layer_elems && mismatched == 0 && identity,
        format!(
            "{base_elems}/{layer_elems} layer elements from θ0, {mismatched} elementwise mismatches, θ0 + MΔθ bitwise: {identity}"
        ),
    )
}

struct Regression {
    theta0: Vec<f64>,
    data: Vec<RegressionSample>,
}

const DIM: usize = 20;

fn regression() -> Regression {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let theta0: Vec<f64> = (0..DIM).map(|_| normal()).collect();
    let w: Vec<f64> = theta0.iter().map(|t| t + 0.1 * normal()).collect();
    let data = (0..100)
        .map(|_| {
            let x: Vec<f64> = (0..DIM).map(|_| normal()).collect();
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.01 * normal();
            RegressionSample { x, y }
        })
        .collect();
    Regression { theta0, data }
}

/// Closed-form optimum of the penalised least squares, by Gaussian elimination.
fn penalty_optimum(p: &Regression, lambda: f64) -> Vec<f64> {
    let n = p.data.len() as f64;
    let mut a = vec![vec![0.0; DIM + 1]; DIM];
    for s in &p.data {
        for i in 0..DIM {
            for j in 0..DIM {
                a[i][j] += s.x[i] * s.x[j] / n;
            }
            a[i][DIM] += s.x[i] * s.y / n;
        }
    }
    for i in DIM / 2..DIM {
        a[i][i] += lambda;
        a[i][DIM] += lambda * p.theta0[i];
    }
    for c in 0..DIM {
        let piv = (c..DIM).max_by(|&r, &s| a[r][c].abs().total_cmp(&a[s][c].abs())).unwrap();
        a.swap(c, piv);
        for r in c + 1..DIM {
            let f = a[r][c] / a[c][c];
            for k in c..=DIM {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    let mut w = vec![0.0; DIM];
    for i in (0..DIM).rev() {
        w[i] = (a[i][DIM] - (i + 1..DIM).map(|k| a[i][k] * w[k]).sum::<f64>()) / a[i][i];
    }
    w
}

fn top_curvature(p: &Regression) -> f64 {
    let n = p.data.len() as f64;
    let mut v = vec![1.0; DIM];
    let mut est = 0.0;
    for _ in 0..500 {
        let mut next = vec![0.0; DIM];
        for s in &p.data {
            let d: f64 = s.x.iter().zip(&v).map(|(a, b)| a * b).sum();
            next.iter_mut().zip(&s.x).for_each(|(o, x)| *o += x * d / n);
        }
        est = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = next.iter().map(|x| x / est).collect();
    }
    est
}

fn penalty_consistency() -> Outcome {
    let p = regression();
    let plan = SelectionPlan {
        round: 1,
        strategy: Strategy::Ratio,
        seed: 0,
        freeze_io: false,
        ratio: Some(0.5),
        frozen: ["w.2", "w.3"].iter().map(|s| s.to_string()).collect(),
    };
    let l = top_curvature(&p);
    let sgd = |lambda: f64, epochs: usize| OptimizerConfig { epochs, batch_size: 100, ..OptimizerConfig::sgd(0.9 / (2.0 * (l + lambda))) };
    let mut devs = Vec::new();
    let mut worst_gap: f64 = 0.0;
    for lambda in LAMBDAS {
        let mut m = LinearRegression::new(&p.theta0, 4).map_err(|e| e.to_string())?;
        let reference = m.registry().clone();
        let epochs = (40.0 * (l + lambda) / (0.9 * 0.2)).ceil() as usize;
        train_penalty(&mut m, &reference, &plan, lambda, &p.data, &sgd(lambda, epochs), &mut OptState::new(4))
            .map_err(|e| e.to_string())?;
        let want = penalty_optimum(&p, lambda);
        worst_gap = m.weights().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(worst_gap, f64::max);
        devs.push(frozen_deviation(m.registry(), &reference, &plan).map_err(|e| e.to_string())?);
    }
    let cfg = sgd(0.0, 200);
    let mut pen = LinearRegression::new(&p.theta0, 4).map_err(|e| e.to_string())?;
    let reference = pen.registry().clone();
    train_penalty(&mut pen, &reference, &plan, 0.0, &p.data, &cfg, &mut OptState::new(4)).map_err(|e| e.to_string())?;
    let mut fft = LinearRegression::new(&p.theta0, 4).map_err(|e| e.to_string())?;
    let full = plan_full(fft.registry(), 1, 0);
    train_round(&mut fft, &full, &p.data, &cfg, &mut OptState::new(4)).map_err(|e| e.to_string())?;
    let same = pen.registry().bits_eq(fft.registry());
    let monotone = devs.windows(2).all(|w| w[1] <= w[0]);
    check(
        monotone && devs[4] < PENALTY_TOL && same,
        format!(
            "deviation over λ {LAMBDAS:?}: [{}], max |w − w*| {worst_gap:.1e}, λ=0 bitwise FFT: {same}",
            devs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

struct PairedRun {
    seed: u64,
    fft: RunResult<f32>,
    hft: RunResult<f32>,
}

fn forgetting_runs() -> Result<(Vec<PairedRun>, f64), String> {
    let cfg = ExperimentConfig::load(&workspace().join("configs/forgetting.toml")).map_err(|e| format!("{e:#}"))?;
    cfg.validate().map_err(|e| format!("{e:#}"))?;
    let tasks: Vec<_> = cfg
        .kinds()
        .into_iter()
        .map(|k| make_task(k, cfg.suite.seed, &cfg.tasks))
        .collect::<hft_core::Result<_>>()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut runs = Vec::new();
    for &seed in cfg.run.seeds.iter().take(FORGETTING_SEEDS) {
        let model0 = build_model::<f32>(&cfg.model, seed).map_err(|e| e.to_string())?;
        let mut hft_cfg = cfg.clone();
        hft_cfg.run.mask = MaskKind::HftCategory;
        let mut fft_cfg = cfg.clone();
        fft_cfg.run.mask = MaskKind::Fft;
        let fft = run_sequence(&model0, &tasks, &fft_cfg.run_config(seed)).map_err(|e| e.to_string())?;
        let hft = run_sequence(&model0, &tasks, &hft_cfg.run_config(seed)).map_err(|e| e.to_string())?;
        runs.push(PairedRun { seed, fft, hft });
    }
    Ok((runs, start.elapsed().as_secs_f64() / 60.0))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn final_bwt(r: &RunResult<f32>) -> f64 {
    let t = r.matrix.rounds();
    r.matrix.bwt_score(t).expect("complete matrix")
}

fn forgetting_direction(runs: &[PairedRun], minutes: f64) -> Outcome {
    if runs.len() != FORGETTING_SEEDS {
        return Err(format!("{} seeds configured, {FORGETTING_SEEDS} required", runs.len()));
    }
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for r in runs {
        let (f, h) = (final_bwt(&r.fft), final_bwt(&r.hft));
        wins += usize::from(h >= f);
        per_seed.push(format!("seed {} FFT {f:.2} HFT {h:.2}", r.seed));
    }
    let mf = median(runs.iter().map(|r| final_bwt(&r.fft)).collect());
    let mh = median(runs.iter().map(|r| final_bwt(&r.hft)).collect());
    check(
        mh >= mf && wins >= FORGETTING_MIN_WINS && minutes < FORGETTING_MINUTES,
        format!(
            "median BWT FFT {mf:.2} HFT {mh:.2}, {wins}/{} seeds favour HFT, {minutes:.1} min [{}]",
            runs.len(),
            per_seed.join("; ")
        ),
    )
}

fn efficiency_direction() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = ExperimentConfig { out_dir: dir.path().to_path_buf(), ..ExperimentConfig::default() };
    cfg.suite.kinds = vec![TaskKind::Copy];
    cfg.optimizer.epochs = 3;
    let mut half = Vec::new();
    let mut full = Vec::new();
    for _ in 0..BENCH_REPEATS {
        let rows = cmd_bench(&cfg, &[0.5, 1.0]).map_err(|e| format!("{e:#}"))?;
        half.push(rows[0].wall_ms);
        full.push(rows[1].wall_ms);
    }
    let (h, f) = (median(half), median(full));
    check(h <= f, format!("median wall time over {BENCH_REPEATS} repeats: 50% {h:.0} ms, FFT {f:.0} ms, ratio {:.1}%", 100.0 * h / f))
}

fn drift_structure(runs: &[PairedRun]) -> Outcome {
    let r = runs.first().ok_or("no forgetting runs")?;
    let theta0 = &r.hft.snapshots[0];
    let hft_final = r.hft.snapshots.last().unwrap();
    let fft_final = r.fft.snapshots.last().unwrap();
    let history: &SelectionHistory = &r.hft.history;
    let times = history.selected_times(theta0).map_err(|e| e.to_string())?;
    let vars = entry_variations(hft_final, theta0, Norm::MeanAbs).map_err(|e| e.to_string())?;
    let never: Vec<f64> = times.iter().zip(&vars).filter(|(t, _)| **t == 0).map(|(_, &v)| v).collect();
    let buckets = variation_by_selected_times(hft_final, theta0, history, Norm::MeanAbs).map_err(|e| e.to_string())?;
    let filled: Vec<(f64, f64)> =
        buckets.iter().filter_map(|b| b.variation.map(|v| (b.selected_times as f64, v))).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = filled.iter().copied().unzip();
    let rho = spearman(&xs, &ys).map_err(|e| e.to_string())?;
    let hft_blocks = block_variation(hft_final, theta0, Norm::MeanAbs).map_err(|e| e.to_string())?;
    let fft_blocks = block_variation(fft_final, theta0, Norm::MeanAbs).map_err(|e| e.to_string())?;
    let above: Vec<String> = hft_blocks
        .iter()
        .zip(&fft_blocks)
        .filter(|(h, f)| h.variation > f.variation)
        .map(|(h, _)| format!("{}:{}", h.group, h.category.as_str()))
        .collect();
    check(
        never.iter().all(|&v| v == 0.0) && rho > SPEARMAN_MIN && above.is_empty(),
        format!(
            "seed {}: {} never-selected matrices (max variation {:e}), buckets {:?}, Spearman ρ {rho:.3}, blocks where HFT > FFT: {above:?}",
            r.seed,
            never.len(),
            never.iter().copied().fold(0.0, f64::max),
            filled.iter().map(|(k, v)| format!("{k}:{v:.2e}")).collect::<Vec<_>>(),
        ),
    )
}

fn roundtrip<T: hft_core::Element>(dir: &Path, dtype: DType) -> Result<(bool, bool), String> {
    let model = build_model::<T>(&desk(dtype), 10).map_err(|e| e.to_string())?;
    let meta = RunMetadata { seeds: vec![10], strategy: "fft".into(), round: 0, ..RunMetadata::default() };
    let path = dir.join(format!("{dtype:?}.ckpt"));
    save_checkpoint(&model, &SelectionHistory::default(), &meta, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint::<T>(&path, LoadOptions::default()).map_err(|e| e.to_string())?;
    let exact = back.model.registry.bits_eq(&model.registry) && back.metadata == meta;
    let mut bytes = encode_checkpoint(&model, &SelectionHistory::default(), &meta).map_err(|e| e.to_string())?;
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    let caught = matches!(decode_checkpoint::<T>(&bytes, LoadOptions::default()), Err(CheckpointError::Checksum { .. }));
    std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
    let caught_file = matches!(
        load_checkpoint::<T>(&path, LoadOptions::default()),
        Err(Error::Checkpoint { kind: CheckpointError::Checksum { .. }, .. })
    );
    Ok((exact, caught && caught_file))
}

fn checkpoint_roundtrip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (e32, c32) = roundtrip::<f32>(dir.path(), DType::F32)?;
    let (e64, c64) = roundtrip::<f64>(dir.path(), DType::F64)?;
    check(
        e32 && e64 && c32 && c64,
        format!("bit-exact f32 {e32} f64 {e64}; flipped payload byte caught f32 {c32} f64 {c64}"),
    )
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag} {name} ({secs:.1}s): {detail}");
    outcome.is_ok()
}

fn main() -> ExitCode {
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut failed = Vec::new();
    let mut record = |n: usize, ok: bool| {
        if !ok {
            failed.push(n);
        }
    };
    if on(1) {
        record(1, run(1, "metric oracle", metric_oracle));
    }
    if on(2) {
        record(2, run(2, "selection exactness", selection_exactness));
    }
    if on(3) {
        record(3, run(3, "frozen-bit identity", frozen_bit_identity));
    }
    if on(4) {
        record(4, run(4, "gradient correctness", gradient_correctness));
    }
    if on(5) {
        record(5, run(5, "half-reset correctness", half_reset_correctness));
    }
    if on(6) {
        record(6, run(6, "penalty consistency", penalty_consistency));
    }
    if on(7) || on(9) {
        match forgetting_runs() {
            Ok((runs, minutes)) => {
                if on(7) {
                    record(7, run(7, "forgetting direction", || forgetting_direction(&runs, minutes)));
                }
                if on(9) {
                    record(9, run(9, "drift structure", || drift_structure(&runs)));
                }
            }
            Err(e) => {
                for n in [7, 9].into_iter().filter(|&n| on(n)) {
                    record(n, run(n, "continual runs", || Err(e.clone())));
                }
            }
        }
    }
    if on(8) {
        record(8, run(8, "efficiency direction", efficiency_direction));
    }
    if on(10) {
        record(10, run(10, "checkpoint roundtrip", checkpoint_roundtrip));
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
