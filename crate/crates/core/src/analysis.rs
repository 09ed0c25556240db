//! Parameter drift between two registries, grouped by block position or by
//! how often each matrix was trainable, and wall-time summaries.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Category, ParameterRegistry};
use crate::selection::SelectionHistory;
use crate::tensor::Element;
use crate::trainer::TrainLog;

/// How the elementwise differences of one matrix are summarised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    MeanAbs,
    Rms,
}

impl Norm {
    pub fn as_str(self) -> &'static str {
        match self {
            Norm::MeanAbs => "mean_abs",
            Norm::Rms => "rms",
        }
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_abs" => Ok(Norm::MeanAbs),
            "rms" => Ok(Norm::Rms),
            other => Err(Error::InvalidArgument(format!("unknown norm `{other}`"))),
        }
    }
}

fn matrix_variation<T: Element>(a: &[T], b: &[T], norm: Norm) -> f64 {
    let n = a.len() as f64;
    match norm {
        Norm::MeanAbs => a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / n,
        Norm::Rms => (a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n).sqrt(),
    }
}

/// Variation of every registry entry, in registry order.
pub fn entry_variations<T: Element>(
    theta_final: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
    norm: Norm,
) -> Result<Vec<f64>> {
    theta_final.check_compatible(theta_0)?;
    Ok(theta_final
        .iter()
        .zip(theta_0.iter())
        .map(|(a, b)| matrix_variation(a.tensor.data(), b.tensor.data(), norm))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockVariation {
    /// Adjacent-layer pair index: layers `2g` and `2g + 1`.
    pub group: usize,
    pub category: Category,
    pub variation: f64,
}

/// Mean matrix variation per (layer pair, SAN/FFN) block.
pub fn block_variation<T: Element>(
    theta_final: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
    norm: Norm,
) -> Result<Vec<BlockVariation>> {
    let n_layers = theta_final.n_layers();
    if n_layers % 2 != 0 {
        return Err(Error::InvalidArgument(format!("layer-pair grouping needs an even layer count, got {n_layers}")));
    }
    let vars = entry_variations(theta_final, theta_0, norm)?;
    let mut out = Vec::new();
    for group in 0..n_layers / 2 {
        for category in [Category::San, Category::Ffn] {
            let members: Vec<f64> = theta_final
                .iter()
                .zip(&vars)
                .filter(|(e, _)| e.category == category && e.layer.is_some_and(|l| l / 2 == group))
                .map(|(_, &v)| v)
                .collect();
            let variation = members.iter().sum::<f64>() / members.len().max(1) as f64;
            out.push(BlockVariation { group, category, variation });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedTimesBucket {
    pub selected_times: usize,
    pub matrices: usize,
    /// Mean variation of the bucket's matrices; `None` for an empty bucket.
    pub variation: Option<f64>,
}

/// SAN and FFN matrices bucketed by the number of rounds they were
/// trainable, with the mean variation of each bucket. Buckets run `0..=T`.
pub fn variation_by_selected_times<T: Element>(
    theta_final: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
    history: &SelectionHistory,
    norm: Norm,
) -> Result<Vec<SelectedTimesBucket>> {
    history.validate()?;
    let vars = entry_variations(theta_final, theta_0, norm)?;
    let times = history.selected_times(theta_final)?;
    let rounds = history.len();
    let mut sums = vec![(0usize, 0.0f64); rounds + 1];
    for ((e, &v), &k) in theta_final.iter().zip(&vars).zip(&times) {
        if matches!(e.category, Category::San | Category::Ffn) {
            sums[k].0 += 1;
            sums[k].1 += v;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(k, (n, s))| SelectedTimesBucket {
            selected_times: k,
            matrices: n,
            variation: (n > 0).then(|| s / n as f64),
        })
        .collect())
}

/// Mean variation over all SAN and FFN matrices.
pub fn mean_block_variation<T: Element>(
    theta_final: &ParameterRegistry<T>,
    theta_0: &ParameterRegistry<T>,
    norm: Norm,
) -> Result<f64> {
    let vars = entry_variations(theta_final, theta_0, norm)?;
    let picked: Vec<f64> = theta_final
        .iter()
        .zip(&vars)
        .filter(|(e, _)| matches!(e.category, Category::San | Category::Ffn))
        .map(|(_, &v)| v)
        .collect();
    Ok(picked.iter().sum::<f64>() / picked.len().max(1) as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(format!("spearman needs two equal-length samples of ≥ 2, got {} and {}", xs.len(), ys.len())));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("spearman is undefined for a constant sample".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    /// Trainable share of transformer-layer parameters, in percent.
    pub trainable_pct: f64,
    pub wall_ms: f64,
    /// Wall time relative to the fully trainable run, in percent.
    pub wall_pct_of_fft: f64,
}

/// Normalises wall time of each `(trainable fraction, log)` pair to the run
/// with fraction 1. All logs must have the same number of steps.
pub fn runtime_report(runs: &[(f64, &TrainLog)]) -> Result<Vec<RuntimeRow>> {
    let fft = runs
        .iter()
        .find(|(r, _)| *r == 1.0)
        .ok_or_else(|| Error::InvalidArgument("runtime report needs a run with ratio 1.0".into()))?;
    let steps = fft.1.steps();
    if let Some((r, log)) = runs.iter().find(|(_, l)| l.steps() != steps) {
        return Err(Error::InvalidArgument(format!("run at ratio {r} has {} steps, the full run {steps}", log.steps())));
    }
    let base = fft.1.total_wall_ms();
    Ok(runs
        .iter()
        .map(|(r, log)| RuntimeRow {
            trainable_pct: 100.0 * r,
            wall_ms: log.total_wall_ms(),
            wall_pct_of_fft: 100.0 * log.total_wall_ms() / base,
        })
        .collect())
}

pub fn write_block_csv(rows: &[BlockVariation], norm: Norm, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "category", &format!("variation_{}", norm.as_str())])?;
    for r in rows {
        w.write_record([r.group.to_string(), r.category.to_string(), r.variation.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_selected_times_csv(
    buckets: &[SelectedTimesBucket],
    fft_baseline: Option<f64>,
    norm: Norm,
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["selected_times", "matrices", &format!("variation_{}", norm.as_str()), "fft_baseline"])?;
    let base = fft_baseline.map(|b| b.to_string()).unwrap_or_default();
    for b in buckets {
        w.write_record([
            b.selected_times.to_string(),
            b.matrices.to_string(),
            b.variation.map(|v| v.to_string()).unwrap_or_default(),
            base.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runtime_csv(rows: &[RuntimeRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trainable_pct", "wall_ms", "wall_pct_of_fft"])?;
    for r in rows {
        w.write_record([format!("{:.1}", r.trainable_pct), format!("{:.3}", r.wall_ms), format!("{:.1}", r.wall_pct_of_fft)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use crate::selection::{plan_category, plan_full};
    use crate::tensor::{DType, Tensor};
    use crate::trainer::StepRecord;

    fn reg() -> ParameterRegistry<f64> {
        build_model::<f64>(&ModelConfig { dtype: DType::F64, ..ModelConfig::default() }, 0).unwrap().registry
    }

    #[test]
    fn identical_registries_have_zero_variation() {
        let r = reg();
        for norm in [Norm::MeanAbs, Norm::Rms] {
            assert!(block_variation(&r, &r, norm).unwrap().iter().all(|b| b.variation == 0.0));
        }
        assert_eq!(block_variation(&r, &r, Norm::MeanAbs).unwrap().len(), 4);
    }

    #[test]
    fn single_matrix_shift_moves_one_block() {
        let base = reg();
        let mut moved = base.clone();
        let name = "layer.2.ffn.w_up";
        let shifted = moved.tensor(name).unwrap().data().iter().map(|x| x + 0.3).collect();
        moved.set_tensor(name, Tensor::new(base.tensor(name).unwrap().shape().to_vec(), shifted).unwrap()).unwrap();
        let blocks = block_variation(&moved, &base, Norm::MeanAbs).unwrap();
        for b in blocks {
            let want = if b.group == 1 && b.category == Category::Ffn { 0.3 / 6.0 } else { 0.0 };
            assert!((b.variation - want).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn selected_times_buckets() {
        let base = reg();
        let mut h = SelectionHistory::default();
        h.push(plan_category(&base, 1, 0, false).unwrap()).unwrap();
        h.push(plan_full(&base, 2, 0)).unwrap();
        let b = variation_by_selected_times(&base, &base, &h, Norm::MeanAbs).unwrap();
        assert_eq!(b.iter().map(|x| x.selected_times).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(b[0].matrices, 0);
        assert_eq!(b[0].variation, None);
        assert_eq!(b.iter().map(|x| x.matrices).sum::<usize>(), 28);
        let mut other = SelectionHistory::default();
        let mut bad = plan_full(&base, 1, 0);
        bad.frozen.insert("nope".into());
        other.plans.push(bad);
        assert!(variation_by_selected_times(&base, &base, &other, Norm::MeanAbs).is_err());
    }

    #[test]
    fn spearman_reference_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // Ranks x = (1,2,3,4,5), y = (2,1,4,3,5): Σd² = 4, ρ = 1 − 6·4/(5·24) = 0.8.
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    fn log(steps: usize, ms: f64) -> TrainLog {
        TrainLog {
            records: (0..steps).map(|s| StepRecord { step: s, loss: 1.0, wall_ms: ms, trainable_fraction: 1.0 }).collect(),
        }
    }

    #[test]
    fn runtime_report_normalises_to_full_run() {
        let (full, half) = (log(10, 2.0), log(10, 1.5));
        let rows = runtime_report(&[(0.5, &half), (1.0, &full)]).unwrap();
        assert_eq!(rows[1].wall_pct_of_fft, 100.0);
        assert_eq!(rows[0].wall_pct_of_fft, 75.0);
        assert!(runtime_report(&[(0.5, &log(9, 1.0)), (1.0, &full)]).is_err());
        assert!(runtime_report(&[(0.5, &half)]).is_err());
    }

    #[test]
    fn csv_headers_carry_norm() {
        let mut buf = Vec::new();
        write_block_csv(&[BlockVariation { group: 0, category: Category::San, variation: 0.0 }], Norm::Rms, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "group,category,variation_rms\n0,SAN,0\n");
        let mut buf = Vec::new();
        let b = [SelectedTimesBucket { selected_times: 0, matrices: 0, variation: None }];
        write_selected_times_csv(&b, Some(0.5), Norm::MeanAbs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "selected_times,matrices,variation_mean_abs,fft_baseline\n0,0,,0.5\n");
    }
}
