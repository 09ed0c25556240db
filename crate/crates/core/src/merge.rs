//! Task vectors and Half-Reset: rolling a chosen part of a fine-tuned model
//! back to its base.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::Result;
use crate::model::{Category, ParameterRegistry};
use crate::selection::{plan_with, round_rng, SelectionPlan, Strategy};
use crate::tensor::{Element, Tensor};

/// Elementwise `θ_ft − θ0`, stored with the same names and order as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector<T> {
    pub delta: ParameterRegistry<T>,
}

pub fn task_vector<T: Element>(
    theta_ft: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
) -> Result<TaskVector<T>> {
    theta_ft.check_compatible(theta_0)?;
    let delta = theta_ft.map_tensors(|e| {
        let base = theta_0.tensor(&e.name).expect("checked compatible");
        e.tensor.sub(base).expect("shapes match")
    });
    Ok(TaskVector { delta })
}

impl<T: Element> TaskVector<T> {
    /// `θ0 + Δθ`.
    pub fn apply(&self, theta_0: &ParameterRegistry<T>) -> Result<ParameterRegistry<T>> {
        self.apply_masked(theta_0, |_| true)
    }

    /// `θ0 + MΔθ` with M given per entry by `keep`.
    pub fn apply_masked(
        &self,
        theta_0: &ParameterRegistry<T>,
        keep: impl Fn(&str) -> bool,
    ) -> Result<ParameterRegistry<T>> {
        self.delta.check_compatible(theta_0)?;
        Ok(theta_0.map_tensors(|e| {
            if keep(&e.name) {
                e.tensor.add(self.delta.tensor(&e.name).expect("checked")).expect("shapes match")
            } else {
                e.tensor.clone()
            }
        }))
    }

    /// L2 norm of the vector restricted to each category.
    pub fn norms_by_category(&self) -> BTreeMap<Category, f64> {
        let mut sq: BTreeMap<Category, f64> = BTreeMap::new();
        for e in self.delta.iter() {
            *sq.entry(e.category).or_default() += e.tensor.sq_norm();
        }
        sq.into_iter().map(|(c, s)| (c, s.sqrt())).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|e| e.tensor.data().iter().all(|x| x.is_zero()))
    }
}

/// Parameters trainable in `keep_plan` come from `θ_ft`, frozen ones from `θ0`.
pub fn half_reset<T: Element>(
    theta_ft: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
    keep_plan: &SelectionPlan,
) -> Result<ParameterRegistry<T>> {
    theta_ft.check_compatible(theta_0)?;
    keep_plan.mask(theta_ft)?;
    Ok(theta_ft.map_tensors(|e| {
        if keep_plan.is_frozen(&e.name) {
            theta_0.tensor(&e.name).expect("checked compatible").clone()
        } else {
            e.tensor.clone()
        }
    }))
}

/// Zeroes a seeded `round(q · n)` of the vector's `n` matrices.
pub fn drop_ratio<T: Element>(tv: &TaskVector<T>, q: f64, seed: u64) -> Result<TaskVector<T>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(crate::Error::InvalidArgument(format!("drop ratio must lie in [0, 1], got {q}")));
    }
    let mut names: Vec<&str> = tv.delta.names().collect();
    names.sort_unstable();
    names.shuffle(&mut round_rng(seed, 0));
    let k = (q * names.len() as f64).round() as usize;
    let dropped: std::collections::HashSet<&str> = names.into_iter().take(k).collect();
    let delta = tv.delta.map_tensors(|e| {
        if dropped.contains(e.name.as_str()) {
            Tensor::zeros(e.tensor.shape())
        } else {
            e.tensor.clone()
        }
    });
    Ok(TaskVector { delta })
}

/// The keep plan a reset strategy uses; EMB/HEAD stay fine-tuned unless `reset_io`.
pub fn reset_plan<T: Element>(
    registry: &ParameterRegistry<T>,
    strategy: Strategy,
    seed: u64,
    reset_io: bool,
) -> Result<SelectionPlan> {
    plan_with(registry, strategy, 1, seed, reset_io, 0.5)
}

/// Half-Reset with a plan drawn by the given selection strategy.
pub fn reset_strategies<T: Element>(
    theta_ft: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
    strategy: Strategy,
    seed: u64,
    reset_io: bool,
) -> Result<ParameterRegistry<T>> {
    let plan = reset_plan(theta_ft, strategy, seed, reset_io)?;
    half_reset(theta_ft, theta_0, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::selection::{plan_category, plan_full, plan_ratio};
    use crate::tensor::DType;

    /// A base model and a fine-tuned copy that moved every element slightly.
    fn pair() -> (ParameterRegistry<f64>, ParameterRegistry<f64>) {
        let cfg = ModelConfig { dtype: DType::F64, ..ModelConfig::default() };
        let base = build_model::<f64>(&cfg, 1).unwrap().registry;
        let ft = base.map_tensors(|e| {
            let data = e.tensor.data().iter().enumerate().map(|(k, x)| x * (1.0 + 1e-3 * (k as f64).sin())).collect();
            Tensor::new(e.tensor.shape().to_vec(), data).unwrap()
        });
        (ft, base)
    }

    #[test]
    fn identical_models_give_zero_vector() {
        let (a, _) = pair();
        let tv = task_vector(&a, &a).unwrap();
        assert!(tv.is_zero());
        assert!(tv.norms_by_category().values().all(|&n| n == 0.0));
    }

    #[test]
    fn reconstruction_is_bitwise_in_f64() {
        let (ft, base) = pair();
        let tv = task_vector(&ft, &base).unwrap();
        assert!(tv.apply(&base).unwrap().bits_eq(&ft));
        assert!(tv.norms_by_category().values().all(|&n| n > 0.0));
    }

    #[test]
    fn half_reset_extremes() {
        let (ft, base) = pair();
        assert!(half_reset(&ft, &base, &plan_full(&ft, 1, 0)).unwrap().bits_eq(&ft));
        let none = plan_ratio(&ft, 1, 0, 0.0, false).unwrap();
        let out = half_reset(&ft, &base, &none).unwrap();
        for (o, (b, f)) in out.iter().zip(base.iter().zip(ft.iter())) {
            let want = if o.category.in_layers() { b } else { f };
            assert!(o.tensor.bits_eq(&want.tensor), "{}", o.name);
        }
    }

    #[test]
    fn half_reset_matches_masked_reconstruction() {
        let (ft, base) = pair();
        let plan = plan_category(&ft, 1, 3, false).unwrap();
        let reset = half_reset(&ft, &base, &plan).unwrap();
        let tv = task_vector(&ft, &base).unwrap();
        let composed = tv.apply_masked(&base, |n| !plan.is_frozen(n)).unwrap();
        assert!(reset.bits_eq(&composed));
    }

    #[test]
    fn drop_ratio_counts() {
        let (ft, base) = pair();
        let tv = task_vector(&ft, &base).unwrap();
        assert_eq!(drop_ratio(&tv, 0.0, 1).unwrap(), tv);
        assert!(drop_ratio(&tv, 1.0, 1).unwrap().is_zero());
        let half = drop_ratio(&tv, 0.5, 1).unwrap();
        let zeroed = half.delta.iter().filter(|e| e.tensor.data().iter().all(|x| *x == 0.0)).count();
        assert_eq!(zeroed, tv.delta.len() / 2);
        assert!(drop_ratio(&tv, -0.1, 1).is_err());
    }

    #[test]
    fn strategies_are_compositional_and_distinct() {
        let (ft, base) = pair();
        let cat = reset_strategies(&ft, &base, Strategy::Category, 5, false).unwrap();
        let plan = plan_category(&ft, 1, 5, false).unwrap();
        assert!(cat.bits_eq(&half_reset(&ft, &base, &plan).unwrap()));
        let layer = reset_strategies(&ft, &base, Strategy::Layer, 5, false).unwrap();
        let model = reset_strategies(&ft, &base, Strategy::Model, 5, false).unwrap();
        assert!(!cat.bits_eq(&layer) && !cat.bits_eq(&model) && !layer.bits_eq(&model));
        let reset_layers: std::collections::BTreeSet<usize> = layer
            .iter()
            .zip(base.iter())
            .filter(|(a, b)| a.category.in_layers() && a.tensor.bits_eq(&b.tensor))
            .filter_map(|(a, _)| a.layer)
            .collect();
        assert_eq!(reset_layers.len(), 2);
        let v: Vec<usize> = reset_layers.into_iter().collect();
        assert_eq!(v[1] - v[0], 2);
    }
}
