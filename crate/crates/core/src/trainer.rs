//! Masked-gradient training: frozen parameters keep their values and their
//! optimizer state, trainable ones follow SGD or AdamW.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, Model, ParamEntry, ParameterRegistry};
use crate::selection::SelectionPlan;
use crate::tensor::{Element, Tensor};

/// A differentiable training objective over a parameter registry.
pub trait Objective<T: Element> {
    type Example: Clone + Send + Sync;

    fn registry(&self) -> &ParameterRegistry<T>;

    fn registry_mut(&mut self) -> &mut ParameterRegistry<T>;

    /// Mean loss over `batch` and one gradient per registry entry; entries
    /// whose `trainable` flag is false get `None`.
    fn loss_and_grads(&self, batch: &[Self::Example], trainable: &[bool]) -> Result<(T, Vec<Option<Tensor<T>>>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub schedule: Schedule,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: Option<f64>,
    /// Seeds the per-epoch batch order.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 3e-4,
            warmup_fraction: 0.03,
            schedule: Schedule::LinearDecay,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 1,
            batch_size: 16,
            grad_clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    /// Plain SGD with a constant rate and no clipping.
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            warmup_fraction: 0.0,
            schedule: Schedule::Constant,
            grad_clip_norm: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1), got {}", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.eps > 0.0) {
            return bad(format!("betas {:?} and eps {} out of range", self.betas, self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Learning rate at zero-based `step` of a run of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_fraction * total as f64).floor() as usize;
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::LinearDecay => {
                let span = (total - warmup).max(1) as f64;
                self.learning_rate * ((total - step) as f64 / span).max(0.0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Per-parameter optimizer state. Entries advance only on steps in which the
/// parameter is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Element> OptState<T> {
    pub fn new(n_params: usize) -> Self {
        Self { moments: vec![None; n_params] }
    }

    /// Number of updates applied to parameter `i`.
    pub fn steps(&self, i: usize) -> u64 {
        self.moments.get(i).and_then(Option::as_ref).map_or(0, |m| m.steps)
    }

    pub fn first_moment(&self, i: usize) -> Option<&[T]> {
        self.moments.get(i).and_then(Option::as_ref).map(|m| m.m.as_slice())
    }
}

/// Quadratic pull of frozen coordinates toward a reference:
/// `λ‖(I−M)(θ−θ0)‖²`.
pub struct Penalty<'a, T> {
    pub reference: &'a ParameterRegistry<T>,
    /// Trainable flags of M in registry order.
    pub mask: &'a [bool],
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub trainable_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn total_wall_ms(&self) -> f64 {
        self.records.iter().map(|r| r.wall_ms).sum()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One optimizer step on `batch`. Frozen parameters (false in `mask`) and
/// their optimizer state are left untouched.
#[allow(clippy::too_many_arguments)]
pub fn step<T: Element, O: Objective<T>>(
    obj: &mut O,
    batch: &[O::Example],
    mask: &[bool],
    cfg: &OptimizerConfig,
    state: &mut OptState<T>,
    lr: f64,
    step_index: usize,
    penalty: Option<&Penalty<'_, T>>,
) -> Result<T> {
    let n = obj.registry().len();
    if mask.len() != n || state.moments.len() != n {
        return Err(Error::StructureMismatch(format!(
            "mask of {} and state of {} for {n} parameters",
            mask.len(),
            state.moments.len()
        )));
    }
    let (loss, mut grads) = obj.loss_and_grads(batch, mask)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteTraining { what: "loss", step: step_index });
    }
    if let Some(p) = penalty.filter(|p| p.lambda != 0.0) {
        let two_lambda = T::from_f64(2.0 * p.lambda);
        for (i, g) in grads.iter_mut().enumerate() {
            let (Some(g), false) = (g.as_mut(), p.mask[i]) else { continue };
            let theta = obj.registry().entries()[i].tensor.data();
            let theta0 = p.reference.entries()[i].tensor.data();
            for ((gi, &t), &t0) in g.data_mut().iter_mut().zip(theta).zip(theta0) {
                *gi += two_lambda * (t - t0);
            }
        }
    }
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        if !g.is_finite() {
            return Err(Error::NonFiniteTraining { what: "gradient", step: step_index });
        }
        sq += g.sq_norm();
    }
    let clip = match cfg.grad_clip_norm {
        Some(c) if sq.sqrt() > c => T::from_f64(c / sq.sqrt()),
        _ => T::one(),
    };
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(cfg.weight_decay);
    let (b1, b2) = (T::from_f64(cfg.betas.0), T::from_f64(cfg.betas.1));
    let eps = T::from_f64(cfg.eps);
    for (i, g) in grads.into_iter().enumerate() {
        let Some(g) = g.filter(|_| mask[i]) else { continue };
        let theta = obj.registry_mut().tensor_mut_at(i).data_mut();
        let g = g.data();
        match cfg.kind {
            OptimizerKind::Sgd => {
                for (t, &gi) in theta.iter_mut().zip(g) {
                    *t -= lr_t * (gi * clip + wd * *t);
                }
            }
            OptimizerKind::AdamW => {
                let mo = state.moments[i]
                    .get_or_insert_with(|| Moments { m: vec![T::zero(); g.len()], v: vec![T::zero(); g.len()], steps: 0 });
                mo.steps += 1;
                let c1 = T::one() - b1.powi(mo.steps as i32);
                let c2 = T::one() - b2.powi(mo.steps as i32);
                for (((t, &gi), m), v) in theta.iter_mut().zip(g).zip(&mut mo.m).zip(&mut mo.v) {
                    let gi = gi * clip;
                    *m = b1 * *m + (T::one() - b1) * gi;
                    *v = b2 * *v + (T::one() - b2) * gi * gi;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                    *t -= lr_t * (update + wd * *t);
                }
            }
        }
        if cfg.kind == OptimizerKind::Sgd {
            let mo = state.moments[i].get_or_insert_with(|| Moments { m: Vec::new(), v: Vec::new(), steps: 0 });
            mo.steps += 1;
        }
    }
    Ok(loss)
}

fn layers_fraction<T: Element>(registry: &ParameterRegistry<T>, mask: &[bool]) -> f64 {
    let (mut on, mut all) = (0u64, 0u64);
    for (e, &m) in registry.iter().zip(mask) {
        if e.category.in_layers() {
            all += e.tensor.numel() as u64;
            on += if m { e.tensor.numel() as u64 } else { 0 };
        }
    }
    if all == 0 {
        0.0
    } else {
        on as f64 / all as f64
    }
}

fn run<T: Element, O: Objective<T>>(
    obj: &mut O,
    mask: &[bool],
    round: usize,
    data: &[O::Example],
    cfg: &OptimizerConfig,
    state: &mut OptState<T>,
    penalty: Option<&Penalty<'_, T>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = per_epoch * cfg.epochs;
    let fraction = layers_fraction(obj.registry(), mask);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(round as u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let s = log.records.len();
            let started = Instant::now();
            batch.clear();
            batch.extend(chunk.iter().map(|&i| data[i].clone()));
            let loss = step(obj, &batch, mask, cfg, state, cfg.lr_at(s, total), s, penalty)?;
            log.records.push(StepRecord {
                step: s,
                loss: loss.as_f64(),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                trainable_fraction: fraction,
            });
        }
    }
    Ok(log)
}

/// Trains one round under `plan`, updating only its trainable parameters.
pub fn train_round<T: Element, O: Objective<T>>(
    obj: &mut O,
    plan: &SelectionPlan,
    data: &[O::Example],
    cfg: &OptimizerConfig,
    state: &mut OptState<T>,
) -> Result<TrainLog> {
    let mask = plan.mask(obj.registry())?;
    run(obj, &mask, plan.round, data, cfg, state, None)
}

/// Trains every parameter on `L(θ) + λ‖(I−M)(θ−θ0)‖²`, where `plan`
/// supplies M and `reference` supplies θ0.
pub fn train_penalty<T: Element, O: Objective<T>>(
    obj: &mut O,
    reference: &ParameterRegistry<T>,
    plan: &SelectionPlan,
    lambda: f64,
    data: &[O::Example],
    cfg: &OptimizerConfig,
    state: &mut OptState<T>,
) -> Result<TrainLog> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    obj.registry().check_compatible(reference)?;
    let m = plan.mask(obj.registry())?;
    let all = vec![true; m.len()];
    let penalty = Penalty { reference, mask: &m, lambda };
    run(obj, &all, plan.round, data, cfg, state, Some(&penalty))
}

/// `‖(I−M)(θ−θ0)‖`: distance of the frozen coordinates from the reference.
pub fn frozen_deviation<T: Element>(
    theta: &ParameterRegistry<T>,
    reference: &ParameterRegistry<T>,
    plan: &SelectionPlan,
) -> Result<f64> {
    theta.check_compatible(reference)?;
    let mut sq = 0.0;
    for (a, b) in theta.iter().zip(reference.iter()) {
        if plan.is_frozen(&a.name) {
            sq += a.tensor.sub(&b.tensor)?.sq_norm();
        }
    }
    Ok(sq.sqrt())
}

/// One sample of a linear least-squares problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSample {
    pub x: Vec<f64>,
    pub y: f64,
}

/// `L(w) = mean((x·w − y)²)` with `w` split into equal named chunks.
#[derive(Debug, Clone)]
pub struct LinearRegression {
    registry: ParameterRegistry<f64>,
}

impl LinearRegression {
    /// `n_params` weights in `chunks` registry entries named `w.0`, `w.1`, ….
    pub fn new(initial: &[f64], chunks: usize) -> Result<Self> {
        if chunks == 0 || initial.is_empty() || initial.len() % chunks != 0 {
            return Err(Error::InvalidArgument(format!("{} weights do not split into {chunks} chunks", initial.len())));
        }
        let size = initial.len() / chunks;
        let entries = initial
            .chunks(size)
            .enumerate()
            .map(|(i, c)| ParamEntry {
                name: format!("w.{i}"),
                category: Category::Ffn,
                layer: Some(0),
                tensor: Tensor::from_parts(vec![size], c.to_vec()),
            })
            .collect();
        Ok(Self { registry: ParameterRegistry::from_entries(entries)? })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.registry.flatten()
    }
}

impl Objective<f64> for LinearRegression {
    type Example = RegressionSample;

    fn registry(&self) -> &ParameterRegistry<f64> {
        &self.registry
    }

    fn registry_mut(&mut self) -> &mut ParameterRegistry<f64> {
        &mut self.registry
    }

    fn loss_and_grads(&self, batch: &[RegressionSample], trainable: &[bool]) -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let w = self.weights();
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        for s in batch {
            if s.x.len() != w.len() {
                return Err(Error::Shape { op: "linear_regression", detail: format!("{} features for {} weights", s.x.len(), w.len()) });
            }
            let r: f64 = s.x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - s.y;
            loss += r * r / n;
            for (g, &xi) in grad.iter_mut().zip(&s.x) {
                *g += 2.0 * r * xi / n;
            }
        }
        let mut offset = 0;
        let grads = self
            .registry
            .iter()
            .zip(trainable)
            .map(|(e, &t)| {
                let k = e.tensor.numel();
                let g = t.then(|| Tensor::from_parts(vec![k], grad[offset..offset + k].to_vec()));
                offset += k;
                g
            })
            .collect();
        Ok((loss, grads))
    }
}

/// Predicted share of backward work skipped by not forming weight gradients
/// of frozen parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradSkip {
    pub skipped_fraction: f64,
    /// Weight-gradient FLOPs of all transformer-layer parameters over total backward FLOPs.
    pub layer_weight_grad_share: f64,
    pub backward_flops_per_token: f64,
}

/// Per-token FLOP model of the backward pass at sequence length `seq_len`:
/// a `[m, n]` projection costs `2mn` for its weight gradient and `2mn` for its
/// input gradient; a norm gain costs `2d` and `6d`; the embedding gradient
/// costs `2d` per lookup (token and position); attention scores and mixing
/// cost `8·seq_len·d` per layer. Frozen parameters lose their weight-gradient
/// term only.
pub fn grad_skip_accounting<T: Element>(plan: &SelectionPlan, model: &Model<T>, seq_len: usize) -> Result<GradSkip> {
    let mask = plan.mask(&model.registry)?;
    let d = model.config.d_model as f64;
    let mut weight = 0.0;
    let mut skipped = 0.0;
    let mut layer_weight = 0.0;
    let mut activation = 8.0 * seq_len as f64 * d * model.config.n_layers as f64;
    for (e, &trainable) in model.registry.iter().zip(&mask) {
        let n = e.tensor.numel() as f64;
        let (w, a) = match e.category {
            Category::San | Category::Ffn | Category::Head => (2.0 * n, 2.0 * n),
            Category::Ln => (2.0 * n, 6.0 * n),
            Category::Emb => (4.0 * d, 0.0),
        };
        weight += w;
        activation += a;
        if e.category.in_layers() {
            layer_weight += w;
        }
        if !trainable {
            skipped += w;
        }
    }
    let total = weight + activation;
    Ok(GradSkip {
        skipped_fraction: skipped / total,
        layer_weight_grad_share: layer_weight / total,
        backward_flops_per_token: total,
    })
}
