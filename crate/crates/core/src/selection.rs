//! Per-round partitions of the registry into trainable and frozen parameters.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, ParameterRegistry};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Category,
    Layer,
    Model,
    Ratio,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Category => "category",
            Strategy::Layer => "layer",
            Strategy::Model => "model",
            Strategy::Ratio => "ratio",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Strategy::Category),
            "layer" => Ok(Strategy::Layer),
            "model" => Ok(Strategy::Model),
            "ratio" => Ok(Strategy::Ratio),
            other => Err(Error::InvalidArgument(format!("unknown selection strategy `{other}`"))),
        }
    }
}

/// A partition of the registry for one round. Names not listed in `frozen`
/// are trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPlan {
    pub round: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub freeze_io: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub frozen: BTreeSet<String>,
}

impl SelectionPlan {
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Trainable flags in registry order.
    pub fn mask<T: Element>(&self, registry: &ParameterRegistry<T>) -> Result<Vec<bool>> {
        if let Some(unknown) = self.frozen.iter().find(|n| registry.position(n).is_none()) {
            return Err(Error::UnknownName(unknown.clone()));
        }
        Ok(registry.names().map(|n| !self.frozen.contains(n)).collect())
    }

    pub fn trainable<'r, T: Element>(&self, registry: &'r ParameterRegistry<T>) -> Vec<&'r str> {
        registry.names().filter(|n| !self.frozen.contains(*n)).collect()
    }

    /// The same plan with trainable and frozen sets swapped.
    pub fn complement<T: Element>(&self, registry: &ParameterRegistry<T>) -> Self {
        Self { frozen: self.trainable(registry).into_iter().map(String::from).collect(), ..self.clone() }
    }
}

/// One plan per round, rounds numbered contiguously from 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistory {
    pub plans: Vec<SelectionPlan>,
}

impl SelectionHistory {
    pub fn push(&mut self, plan: SelectionPlan) -> Result<()> {
        let expected = self.plans.len() + 1;
        if plan.round != expected {
            return Err(Error::InvalidArgument(format!("plan for round {} appended at round {expected}", plan.round)));
        }
        self.plans.push(plan);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.plans.iter().enumerate() {
            if p.round != i + 1 {
                return Err(Error::InvalidArgument(format!("round {} stored at position {}", p.round, i + 1)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    /// Number of rounds each registry entry was trainable, in registry order.
    pub fn selected_times<T: Element>(&self, registry: &ParameterRegistry<T>) -> Result<Vec<usize>> {
        let mut counts = vec![0; registry.len()];
        for plan in &self.plans {
            for (c, trainable) in counts.iter_mut().zip(plan.mask(registry)?) {
                *c += usize::from(trainable);
            }
        }
        Ok(counts)
    }
}

/// Per-round generator: the run seed with the round index as stream id.
pub fn round_rng(seed: u64, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    rng
}

fn shuffled(mut names: Vec<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    names.sort();
    names.shuffle(rng);
    names
}

struct LayerBlocks {
    san: Vec<String>,
    ffn: Vec<String>,
    ln: Vec<String>,
}

/// Groups layer matrices by block and checks the 4/3/2 taxonomy.
fn layer_blocks<T: Element>(registry: &ParameterRegistry<T>) -> Result<Vec<LayerBlocks>> {
    let n = registry.n_layers();
    let mut layers: Vec<LayerBlocks> =
        (0..n).map(|_| LayerBlocks { san: Vec::new(), ffn: Vec::new(), ln: Vec::new() }).collect();
    for e in registry.iter() {
        match (e.category, e.layer) {
            (Category::San, Some(l)) => layers[l].san.push(e.name.clone()),
            (Category::Ffn, Some(l)) => layers[l].ffn.push(e.name.clone()),
            (Category::Ln, Some(l)) => layers[l].ln.push(e.name.clone()),
            (Category::Emb | Category::Head, None) => {}
            (c, l) => return Err(Error::Taxonomy(format!("`{}` has category {c} and layer {l:?}", e.name))),
        }
    }
    for (l, b) in layers.iter().enumerate() {
        if (b.san.len(), b.ffn.len(), b.ln.len()) != (4, 3, 2) {
            return Err(Error::Taxonomy(format!(
                "layer {l} has {} SAN, {} FFN, {} LN entries; expected 4, 3, 2",
                b.san.len(),
                b.ffn.len(),
                b.ln.len()
            )));
        }
    }
    Ok(layers)
}

fn require_even_layers(n: usize) -> Result<()> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!("strategy needs a positive, even layer count, got {n}")));
    }
    Ok(())
}

fn io_names<T: Element>(registry: &ParameterRegistry<T>) -> impl Iterator<Item = String> + '_ {
    registry.iter().filter(|e| !e.category.in_layers()).map(|e| e.name.clone())
}

fn finish<T: Element>(
    registry: &ParameterRegistry<T>,
    round: usize,
    strategy: Strategy,
    seed: u64,
    freeze_io: bool,
    ratio: Option<f64>,
    mut frozen: BTreeSet<String>,
) -> SelectionPlan {
    if freeze_io {
        frozen.extend(io_names(registry));
    }
    SelectionPlan { round, strategy, seed, freeze_io, ratio, frozen }
}

/// Category-level selection: per layer two of four SAN matrices and one of
/// two LN vectors are frozen; a random half of the layers freeze two FFN
/// matrices and the other half freeze one.
pub fn plan_category<T: Element>(
    registry: &ParameterRegistry<T>,
    round: usize,
    seed: u64,
    freeze_io: bool,
) -> Result<SelectionPlan> {
    let layers = layer_blocks(registry)?;
    require_even_layers(layers.len())?;
    let mut rng = round_rng(seed, round);
    let mut order: Vec<usize> = (0..layers.len()).collect();
    order.shuffle(&mut rng);
    let marked: HashSet<usize> = order[..layers.len() / 2].iter().copied().collect();
    let mut frozen = BTreeSet::new();
    for (l, b) in layers.into_iter().enumerate() {
        let ffn_frozen = if marked.contains(&l) { 2 } else { 1 };
        frozen.extend(shuffled(b.san, &mut rng).into_iter().take(2));
        frozen.extend(shuffled(b.ffn, &mut rng).into_iter().take(ffn_frozen));
        frozen.extend(shuffled(b.ln, &mut rng).into_iter().take(1));
    }
    Ok(finish(registry, round, Strategy::Category, seed, freeze_io, None, frozen))
}

/// Layer-level selection: every other layer is frozen whole; a seeded coin
/// picks even or odd layers.
pub fn plan_layer<T: Element>(
    registry: &ParameterRegistry<T>,
    round: usize,
    seed: u64,
    freeze_io: bool,
) -> Result<SelectionPlan> {
    let n = registry.n_layers();
    require_even_layers(n)?;
    let parity = usize::from(round_rng(seed, round).random::<bool>());
    let frozen = registry
        .iter()
        .filter(|e| e.category.in_layers() && e.layer.is_some_and(|l| l % 2 == parity))
        .map(|e| e.name.clone())
        .collect();
    Ok(finish(registry, round, Strategy::Layer, seed, freeze_io, None, frozen))
}

/// Model-level selection: a seeded half (by count, rounded down) of all
/// transformer-layer matrices is frozen, regardless of category.
pub fn plan_model<T: Element>(registry: &ParameterRegistry<T>, round: usize, seed: u64, freeze_io: bool) -> SelectionPlan {
    let names: Vec<String> = registry.iter().filter(|e| e.category.in_layers()).map(|e| e.name.clone()).collect();
    let half = names.len() / 2;
    let mut rng = round_rng(seed, round);
    let frozen = shuffled(names, &mut rng).into_iter().take(half).collect();
    finish(registry, round, Strategy::Model, seed, freeze_io, None, frozen)
}

/// Ratio selection: walks transformer-layer matrices in seeded order and
/// keeps each trainable if it still fits under `p` of the layer element
/// total. The achieved fraction falls short of `p` by less than one matrix.
pub fn plan_ratio<T: Element>(
    registry: &ParameterRegistry<T>,
    round: usize,
    seed: u64,
    p: f64,
    freeze_io: bool,
) -> Result<SelectionPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("trainable ratio must lie in [0, 1], got {p}")));
    }
    let sizes: BTreeMap<String, u64> = registry
        .iter()
        .filter(|e| e.category.in_layers())
        .map(|e| (e.name.clone(), e.tensor.numel() as u64))
        .collect();
    let total: u64 = sizes.values().sum();
    let budget = p * total as f64;
    let mut rng = round_rng(seed, round);
    let mut taken = 0u64;
    let mut frozen = BTreeSet::new();
    for name in shuffled(sizes.keys().cloned().collect(), &mut rng) {
        let n = sizes[&name];
        if (taken + n) as f64 <= budget {
            taken += n;
        } else {
            frozen.insert(name);
        }
    }
    Ok(finish(registry, round, Strategy::Ratio, seed, freeze_io, Some(p), frozen))
}

/// The plan that trains everything: a ratio plan at p = 1.
pub fn plan_full<T: Element>(registry: &ParameterRegistry<T>, round: usize, seed: u64) -> SelectionPlan {
    plan_ratio(registry, round, seed, 1.0, false).expect("1.0 is a valid ratio")
}

/// Builds a plan with the named strategy. `ratio` is read only by [`Strategy::Ratio`].
pub fn plan_with<T: Element>(
    registry: &ParameterRegistry<T>,
    strategy: Strategy,
    round: usize,
    seed: u64,
    freeze_io: bool,
    ratio: f64,
) -> Result<SelectionPlan> {
    match strategy {
        Strategy::Category => plan_category(registry, round, seed, freeze_io),
        Strategy::Layer => plan_layer(registry, round, seed, freeze_io),
        Strategy::Model => Ok(plan_model(registry, round, seed, freeze_io)),
        Strategy::Ratio => plan_ratio(registry, round, seed, ratio, freeze_io),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Share {
    pub trainable_matrices: usize,
    pub matrices: usize,
    pub trainable_elements: u64,
    pub elements: u64,
}

impl Share {
    fn add(&mut self, n: usize, trainable: bool) {
        self.matrices += 1;
        self.elements += n as u64;
        if trainable {
            self.trainable_matrices += 1;
            self.trainable_elements += n as u64;
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.trainable_elements as f64 / self.elements as f64
        }
    }

    /// Exactly half the elements trainable, checked in integers.
    pub fn is_exact_half(&self) -> bool {
        2 * self.trainable_elements == self.elements
    }
}

/// Trainable shares over transformer layers only and over every parameter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub layers: Share,
    pub total: Share,
    pub by_category: BTreeMap<Category, Share>,
}

pub fn mask_stats<T: Element>(plan: &SelectionPlan, registry: &ParameterRegistry<T>) -> Result<MaskStats> {
    let mask = plan.mask(registry)?;
    let mut stats = MaskStats::default();
    for (e, &trainable) in registry.iter().zip(&mask) {
        let n = e.tensor.numel();
        stats.by_category.entry(e.category).or_default().add(n, trainable);
        if e.category.in_layers() {
            stats.layers.add(n, trainable);
        }
        stats.total.add(n, trainable);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::tensor::DType;

    fn registry(n_layers: usize) -> ParameterRegistry<f64> {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_layers,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            dtype: DType::F64,
        };
        build_model::<f64>(&cfg, 0).unwrap().registry
    }

    fn frozen_in(plan: &SelectionPlan, reg: &ParameterRegistry<f64>, c: Category) -> (usize, usize) {
        let all: Vec<_> = reg.iter().filter(|e| e.category == c).collect();
        (all.iter().filter(|e| plan.is_frozen(&e.name)).count(), all.len())
    }

    #[test]
    fn category_plan_counts_on_four_layers() {
        let reg = registry(4);
        let plan = plan_category(&reg, 1, 42, false).unwrap();
        assert_eq!(frozen_in(&plan, &reg, Category::San), (8, 16));
        assert_eq!(frozen_in(&plan, &reg, Category::Ffn), (6, 12));
        assert_eq!(frozen_in(&plan, &reg, Category::Ln), (4, 8));
        assert_eq!(frozen_in(&plan, &reg, Category::Emb), (0, 1));
        assert_eq!(frozen_in(&plan, &reg, Category::Head), (0, 1));
        for l in 0..4 {
            let in_layer = |c| reg.iter().filter(|e| e.layer == Some(l) && e.category == c && plan.is_frozen(&e.name)).count();
            assert_eq!(in_layer(Category::San), 2);
            assert_eq!(in_layer(Category::Ln), 1);
            assert!((1..=2).contains(&in_layer(Category::Ffn)));
        }
    }

    #[test]
    fn category_plan_is_exactly_half_and_deterministic() {
        let reg = registry(4);
        let plan = plan_category(&reg, 3, 9, false).unwrap();
        let stats = mask_stats(&plan, &reg).unwrap();
        assert!(stats.layers.is_exact_half());
        assert_eq!(stats.layers.fraction(), 0.5);
        assert!(stats.total.fraction() > 0.5);
        assert_eq!(plan, plan_category(&reg, 3, 9, false).unwrap());
    }

    #[test]
    fn freeze_io_freezes_embedding_and_head() {
        let reg = registry(2);
        let plan = plan_category(&reg, 1, 0, true).unwrap();
        assert!(plan.is_frozen("embed") && plan.is_frozen("lm_head"));
        let stats = mask_stats(&plan, &reg).unwrap();
        assert!(stats.total.fraction() < 0.5);
    }

    #[test]
    fn odd_layer_count_is_rejected() {
        let reg = registry(3);
        assert!(plan_category(&reg, 1, 0, false).is_err());
        assert!(plan_layer(&reg, 1, 0, false).is_err());
    }

    #[test]
    fn malformed_taxonomy_is_rejected() {
        let reg = registry(2);
        let broken = ParameterRegistry::from_entries(
            reg.iter().filter(|e| e.name != "layer.1.san.wq").cloned().collect(),
        )
        .unwrap();
        assert!(matches!(plan_category(&broken, 1, 0, false), Err(Error::Taxonomy(_))));
    }

    #[test]
    fn plans_vary_across_rounds() {
        let reg = registry(4);
        let plans: Vec<_> = (1..=5).map(|r| plan_category(&reg, r, 17, false).unwrap().frozen).collect();
        for i in 0..plans.len() {
            for j in i + 1..plans.len() {
                assert_ne!(plans[i], plans[j]);
            }
        }
    }

    #[test]
    fn layer_plan_freezes_alternate_whole_layers() {
        let reg = registry(4);
        let plan = plan_layer(&reg, 1, 5, false).unwrap();
        let frozen_layers: BTreeSet<usize> =
            reg.iter().filter(|e| plan.is_frozen(&e.name)).filter_map(|e| e.layer).collect();
        assert_eq!(frozen_layers.len(), 2);
        for l in &frozen_layers {
            assert!(reg.iter().filter(|e| e.layer == Some(*l)).all(|e| plan.is_frozen(&e.name)));
        }
        let parity: Vec<usize> = frozen_layers.iter().map(|l| l % 2).collect();
        assert_eq!(parity[0], parity[1]);
        assert_eq!(plan, plan_layer(&reg, 1, 5, false).unwrap());
        let comp = plan.complement(&reg);
        let covered = reg
            .iter()
            .filter(|e| e.category.in_layers())
            .all(|e| plan.is_frozen(&e.name) ^ comp.is_frozen(&e.name));
        assert!(covered);
    }

    #[test]
    fn model_plan_freezes_half_by_count() {
        let reg = registry(2);
        let plan = plan_model(&reg, 1, 3, false);
        assert_eq!(plan.frozen.len(), 9);
        assert_eq!(plan, plan_model(&reg, 1, 3, false));
        let flagged = (0..50).any(|s| !mask_stats(&plan_model(&reg, 1, s, false), &reg).unwrap().layers.is_exact_half());
        assert!(flagged);
    }

    #[test]
    fn ratio_plan_extremes_and_bound() {
        let reg = registry(4);
        let full = plan_ratio(&reg, 1, 0, 1.0, false).unwrap();
        assert!(full.frozen.is_empty());
        let none = plan_ratio(&reg, 1, 0, 0.0, false).unwrap();
        assert!(reg.iter().filter(|e| e.category.in_layers()).all(|e| none.is_frozen(&e.name)));
        let largest = reg.iter().filter(|e| e.category.in_layers()).map(|e| e.tensor.numel()).max().unwrap() as f64;
        for seed in 0..20 {
            let stats = mask_stats(&plan_ratio(&reg, 1, seed, 0.5, false).unwrap(), &reg).unwrap();
            assert!((stats.layers.fraction() - 0.5).abs() <= largest / stats.layers.elements as f64);
        }
        assert!(plan_ratio(&reg, 1, 0, 1.5, false).is_err());
        assert_eq!(plan_full(&reg, 1, 0), full);
    }

    #[test]
    fn mask_stats_edge_cases() {
        let reg = registry(2);
        let all_frozen = plan_ratio(&reg, 1, 0, 0.0, true).unwrap();
        let stats = mask_stats(&all_frozen, &reg).unwrap();
        assert_eq!(stats.layers.fraction(), 0.0);
        assert_eq!(stats.total.fraction(), 0.0);
        let mut bogus = all_frozen.clone();
        bogus.frozen.insert("layer.9.san.wq".into());
        assert!(matches!(mask_stats(&bogus, &reg), Err(Error::UnknownName(_))));
    }

    #[test]
    fn plan_json_roundtrip() {
        let reg = registry(2);
        let plan = plan_category(&reg, 2, 8, false).unwrap();
        let json = serde_json::to_value(&plan).unwrap();
        let keys: BTreeSet<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, BTreeSet::from(["round", "strategy", "seed", "freeze_io", "frozen"]));
        assert_eq!(json["strategy"], "category");
        let back: SelectionPlan = serde_json::from_value(json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn history_counts_selected_times() {
        let reg = registry(2);
        let mut h = SelectionHistory::default();
        for r in 1..=3 {
            h.push(plan_category(&reg, r, 1, false).unwrap()).unwrap();
        }
        assert!(h.push(plan_category(&reg, 7, 1, false).unwrap()).is_err());
        let times = h.selected_times(&reg).unwrap();
        assert_eq!(times[reg.position("embed").unwrap()], 3);
        assert!(times.iter().all(|&t| t <= 3));
    }
}
