//! Python bindings (`hft_lab`). Models are f32.

use std::fs::File;

use hft_core::continual::{run_sequence, EvalMatrix, Masking, RunConfig, Sequence};
use hft_core::io::{load_checkpoint, save_checkpoint, LoadOptions, RunMetadata};
use hft_core::merge::{half_reset, task_vector};
use hft_core::model::TokenBatch;
use hft_core::selection::{mask_stats, plan_full, plan_with};
use hft_core::tasks::{eval_exact_match, make_task, TaskConfig, TaskKind, TaskSpec};
use hft_core::trainer::{train_round, OptState, OptimizerConfig};
use hft_core::{build_model, Category, Model, ModelConfig, SelectionHistory, SelectionPlan, Strategy};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: hft_core::Error) -> PyErr {
    match e {
        hft_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        e @ hft_core::Error::Checkpoint { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = hft_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "Model", module = "hft_lab", skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model<f32>,
    history: SelectionHistory,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed=0, vocab_size=64, d_model=64, n_layers=4, n_heads=4, d_ff=128, max_seq_len=16))]
    fn new(
        seed: u64,
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        max_seq_len: usize,
    ) -> PyResult<Self> {
        let cfg = ModelConfig { vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, ..ModelConfig::default() };
        let inner = build_model::<f32>(&cfg, seed).map_err(err)?;
        Ok(Self { inner, history: SelectionHistory::default() })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(path, LoadOptions { allow_conversion: true }).map_err(err)?;
        Ok(Self { inner: ck.model, history: ck.history })
    }

    fn save(&self, path: &str) -> PyResult<u64> {
        let meta = RunMetadata { round: self.history.len(), ..RunMetadata::default() };
        save_checkpoint(&self.inner, &self.history, &meta, path).map_err(err)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.registry.names().map(str::to_string).collect()
    }

    fn param_count(&self) -> usize {
        self.inner.registry.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Flat values of one parameter.
    fn param(&self, name: &str) -> PyResult<Vec<f32>> {
        Ok(self.inner.registry.tensor(name).map_err(err)?.data().to_vec())
    }

    /// Logits as `[batch][seq][vocab]` for equal-length token rows.
    fn forward(&self, tokens: Vec<Vec<u32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let batch = TokenBatch::new(&tokens).map_err(err)?;
        let logits = self.inner.forward_logits(&batch).map_err(err)?;
        let (t, v) = (batch.seq(), self.inner.config.vocab_size);
        Ok(logits.data().chunks(t * v).map(|row| row.chunks(v).map(<[f32]>::to_vec).collect()).collect())
    }

    /// One training round; returns the per-step losses.
    #[pyo3(signature = (task, plan=None, epochs=1, learning_rate=3e-3, batch_size=16))]
    fn train(
        &mut self,
        task: &PyTask,
        plan: Option<&PyPlan>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
    ) -> PyResult<Vec<f64>> {
        let round = self.history.len() + 1;
        let plan = match plan {
            Some(p) => SelectionPlan { round, ..p.inner.clone() },
            None => plan_full(&self.inner.registry, round, 0),
        };
        let opt = OptimizerConfig { epochs, learning_rate, batch_size, ..OptimizerConfig::default() };
        let mut state = OptState::new(self.inner.registry.len());
        let log = train_round(&mut self.inner, &plan, &task.inner.train, &opt, &mut state).map_err(err)?;
        self.history.push(plan).map_err(err)?;
        Ok(log.records.iter().map(|r| r.loss).collect())
    }

    fn evaluate(&self, task: &PyTask) -> PyResult<f64> {
        eval_exact_match(&self.inner, &task.inner).map_err(err)
    }

    /// L2 norm of `self − base` per category.
    fn task_vector_norms(&self, base: &PyModel) -> PyResult<Vec<(String, f64)>> {
        let tv = task_vector(&self.inner.registry, &base.inner.registry).map_err(err)?;
        Ok(tv.norms_by_category().into_iter().map(|(c, n)| (c.to_string(), n)).collect())
    }

    /// Keeps the plan's trainable tensors and rolls the rest back to `base`.
    fn half_reset(&self, base: &PyModel, plan: &PyPlan) -> PyResult<PyModel> {
        let registry = half_reset(&self.inner.registry, &base.inner.registry, &plan.inner).map_err(err)?;
        let inner = Model::from_registry(self.inner.config.clone(), registry).map_err(err)?;
        Ok(Self { inner, history: self.history.clone() })
    }

    fn bits_equal(&self, other: &PyModel) -> bool {
        self.inner.registry.bits_eq(&other.inner.registry)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!("Model(d_model={}, n_layers={}, params={})", c.d_model, c.n_layers, self.param_count())
    }
}

#[pyclass(name = "SelectionPlan", module = "hft_lab", skip_from_py_object)]
#[derive(Clone)]
struct PyPlan {
    inner: SelectionPlan,
}

#[pymethods]
impl PyPlan {
    #[getter]
    fn round(&self) -> usize {
        self.inner.round
    }

    #[getter]
    fn strategy(&self) -> &'static str {
        self.inner.strategy.as_str()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn freeze_io(&self) -> bool {
        self.inner.freeze_io
    }

    #[getter]
    fn frozen(&self) -> Vec<String> {
        self.inner.frozen.iter().cloned().collect()
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.inner.is_frozen(name)
    }

    /// Trainable share over transformer layers (`"layers"`) or all parameters (`"total"`).
    #[pyo3(signature = (model, calibre="layers"))]
    fn trainable_fraction(&self, model: &PyModel, calibre: &str) -> PyResult<f64> {
        let stats = mask_stats(&self.inner, &model.inner.registry).map_err(err)?;
        match calibre {
            "layers" => Ok(stats.layers.fraction()),
            "total" => Ok(stats.total.fraction()),
            other => Err(PyValueError::new_err(format!("unknown calibre `{other}`"))),
        }
    }

    fn complement(&self, model: &PyModel) -> PyPlan {
        PyPlan { inner: self.inner.complement(&model.inner.registry) }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json_string(&self.inner)
    }
}

fn serde_json_string(plan: &SelectionPlan) -> PyResult<String> {
    serde_json::to_string(plan).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Draws a selection plan for `round`.
#[pyfunction]
#[pyo3(signature = (model, strategy="category", round=1, seed=0, freeze_io=false, ratio=0.5))]
fn plan(model: &PyModel, strategy: &str, round: usize, seed: u64, freeze_io: bool, ratio: f64) -> PyResult<PyPlan> {
    let strategy: Strategy = parse(strategy)?;
    let inner = plan_with(&model.inner.registry, strategy, round, seed, freeze_io, ratio).map_err(err)?;
    Ok(PyPlan { inner })
}

#[pyclass(name = "Task", module = "hft_lab", skip_from_py_object)]
#[derive(Clone)]
struct PyTask {
    inner: TaskSpec,
}

#[pymethods]
impl PyTask {
    #[new]
    #[pyo3(signature = (kind, seed=0, train_size=512, eval_size=500))]
    fn new(kind: &str, seed: u64, train_size: usize, eval_size: usize) -> PyResult<Self> {
        let kind: TaskKind = parse(kind)?;
        let cfg = TaskConfig { train_size, eval_size, ..TaskConfig::default() };
        Ok(Self { inner: make_task(kind, seed, &cfg).map_err(err)? })
    }

    #[staticmethod]
    fn kinds() -> Vec<&'static str> {
        TaskKind::ALL.iter().map(|k| k.as_str()).collect()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// `(input_tokens, target_tokens)` pairs of the train split.
    fn train_examples(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        self.inner.train.iter().map(|e| (e.input_tokens.clone(), e.target_tokens.clone())).collect()
    }

    fn eval_examples(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        self.inner.eval.iter().map(|e| (e.input_tokens.clone(), e.target_tokens.clone())).collect()
    }
}

#[pyclass(name = "EvalMatrix", module = "hft_lab", skip_from_py_object)]
#[derive(Clone)]
struct PyEvalMatrix {
    inner: EvalMatrix,
}

#[pymethods]
impl PyEvalMatrix {
    /// Row `t` holds the scores on tasks `1..=t` after round `t`.
    #[new]
    fn new(tasks: Vec<String>, rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: EvalMatrix::from_rows(tasks, rows).map_err(err)? })
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        let file = File::open(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: EvalMatrix::read_csv(file).map_err(err)? })
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let file = File::create(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        self.inner.write_csv(file).map_err(err)
    }

    fn rounds(&self) -> usize {
        self.inner.rounds()
    }

    fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.inner.get(t, i)
    }

    fn op(&self, t: usize) -> PyResult<f64> {
        self.inner.op_score(t).map_err(err)
    }

    fn bwt(&self, t: usize) -> PyResult<f64> {
        self.inner.bwt_score(t).map_err(err)
    }
}

/// Sequential fine-tuning over `tasks`; `masking` is `"fft"` or an HFT strategy name.
#[pyfunction]
#[pyo3(signature = (model, tasks, masking="category", seed=0, epochs=None, learning_rate=3e-3, replay=false))]
fn run_continual(
    py: Python<'_>,
    model: &PyModel,
    tasks: Vec<PyRef<'_, PyTask>>,
    masking: &str,
    seed: u64,
    epochs: Option<Vec<usize>>,
    learning_rate: f64,
    replay: bool,
) -> PyResult<(PyEvalMatrix, PyModel)> {
    let masking = match masking {
        "fft" => Masking::Fft,
        s => Masking::Hft { strategy: parse(s)?, freeze_io: false, ratio: 0.5 },
    };
    let mut cfg = RunConfig {
        masking,
        seed,
        sequence: if replay { Sequence::Replay } else { Sequence::SeqFt },
        opt: OptimizerConfig { learning_rate, ..OptimizerConfig::default() },
        ..RunConfig::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.inner.clone()).collect();
    let model0 = model.inner.clone();
    let result = py.detach(move || run_sequence(&model0, &specs, &cfg)).map_err(err)?;
    let trained = PyModel { inner: result.model, history: result.history };
    Ok((PyEvalMatrix { inner: result.matrix }, trained))
}

/// Element counts per category.
#[pyfunction]
fn census(model: &PyModel) -> Vec<(String, usize)> {
    let c = hft_core::model::param_census(&model.inner.registry);
    Category::ALL.iter().map(|&cat| (cat.to_string(), c.category(cat).elements as usize)).collect()
}

#[pymodule]
fn hft_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PyTask>()?;
    m.add_class::<PyEvalMatrix>()?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(run_continual, m)?)?;
    m.add_function(wrap_pyfunction!(census, m)?)?;
    Ok(())
}
