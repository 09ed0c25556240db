//! Decoder-only transformer whose parameters follow a fixed block taxonomy:
//! four self-attention matrices, three feed-forward matrices and two norm
//! vectors per layer, plus an embedding table and an untied output head.

mod registry;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{Example, PAD};
use crate::tensor::{DType, Element, Graph, Tensor, Var};
use crate::trainer::Objective;

pub use registry::{param_census, Category, Census, Count, ParamEntry, ParameterRegistry};

const RMS_EPS: f64 = 1e-5;

pub const SAN_MATRICES: [&str; 4] = ["wq", "wk", "wv", "wo"];
pub const FFN_MATRICES: [&str; 3] = ["w_gate", "w_up", "w_down"];
pub const LN_VECTORS: [&str; 2] = ["attn_norm", "ffn_norm"];
pub const EMBED: &str = "embed";
pub const LM_HEAD: &str = "lm_head";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 64, d_model: 64, n_layers: 4, n_heads: 4, d_ff: 128, max_seq_len: 16, dtype: DType::F32 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

pub fn layer_param_name(layer: usize, category: Category, leaf: &str) -> String {
    let block = match category {
        Category::San => "san",
        Category::Ffn => "ffn",
        Category::Ln => "ln",
        Category::Emb | Category::Head => unreachable!("not a layer block"),
    };
    format!("layer.{layer}.{block}.{leaf}")
}

/// Token ids laid out as `[batch, seq]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Shape { op: "token_batch", detail: "rows must be non-empty and of equal length".into() });
        }
        Ok(Self { batch: rows.len(), seq, ids: rows.concat() })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub registry: ParameterRegistry<T>,
}

/// Builds a model with seeded scaled-Gaussian initialisation: std 0.02 for
/// the embedding and head, 0.02/√n_layers for layer projections, ones for
/// norm gains.
pub fn build_model<T: Element>(config: &ModelConfig, init_seed: u64) -> Result<Model<T>> {
    config.validate()?;
    if config.dtype != T::DTYPE {
        return Err(Error::InvalidConfig(format!("config dtype {} built as {}", config.dtype, T::DTYPE)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut gaussian = |shape: &[usize], std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut rng)))
    };
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
    let proj_std = 0.02 / (config.n_layers as f64).sqrt();
    let mut registry = ParameterRegistry::new();
    // Rows [0, vocab) embed tokens, rows [vocab, vocab + max_seq_len) embed positions.
    registry.push(ParamEntry {
        name: EMBED.into(),
        category: Category::Emb,
        layer: None,
        tensor: gaussian(&[v + config.max_seq_len, d], 0.02),
    })?;
    for l in 0..config.n_layers {
        for leaf in SAN_MATRICES {
            registry.push(ParamEntry {
                name: layer_param_name(l, Category::San, leaf),
                category: Category::San,
                layer: Some(l),
                tensor: gaussian(&[d, d], proj_std),
            })?;
        }
        for leaf in FFN_MATRICES {
            let shape = if leaf == "w_down" { [f, d] } else { [d, f] };
            registry.push(ParamEntry {
                name: layer_param_name(l, Category::Ffn, leaf),
                category: Category::Ffn,
                layer: Some(l),
                tensor: gaussian(&shape, proj_std),
            })?;
        }
        for leaf in LN_VECTORS {
            registry.push(ParamEntry {
                name: layer_param_name(l, Category::Ln, leaf),
                category: Category::Ln,
                layer: Some(l),
                tensor: Tensor::full(&[d], T::one()),
            })?;
        }
    }
    registry.push(ParamEntry {
        name: LM_HEAD.into(),
        category: Category::Head,
        layer: None,
        tensor: gaussian(&[d, v], 0.02),
    })?;
    Ok(Model { config: config.clone(), registry })
}

impl<T: Element> Model<T> {
    /// Wraps an existing registry, checking it matches the shapes `config` implies.
    pub fn from_registry(config: ModelConfig, registry: ParameterRegistry<T>) -> Result<Self> {
        let template = build_model::<T>(&config, 0)?;
        template.registry.check_compatible(&registry)?;
        Ok(Self { config, registry })
    }

    fn check_tokens(&self, tokens: &TokenBatch) -> Result<()> {
        if tokens.seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.seq, max: self.config.max_seq_len });
        }
        if let Some(&token) = tokens.ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Returns `[batch·seq, vocab]` logits
    /// and one leaf per registry entry (in registry order).
    pub fn trace(&self, g: &mut Graph<T>, tokens: &TokenBatch, requires_grad: &[bool]) -> Result<(Var, Vec<Var>)> {
        self.check_tokens(tokens)?;
        if requires_grad.len() != self.registry.len() {
            return Err(Error::StructureMismatch(format!(
                "{} gradient flags for {} parameters",
                requires_grad.len(),
                self.registry.len()
            )));
        }
        let params: Vec<Var> = self
            .registry
            .iter()
            .zip(requires_grad)
            .map(|(e, &rg)| g.leaf(e.tensor.clone(), rg))
            .collect();
        let p = |name: &str| -> Result<Var> {
            self.registry.position(name).map(|i| params[i]).ok_or_else(|| Error::UnknownName(name.into()))
        };
        let cfg = &self.config;
        let (b, t) = (tokens.batch, tokens.seq);
        let heads = cfg.n_heads;

        let tok_idx: Vec<usize> = tokens.ids.iter().map(|&x| x as usize).collect();
        let pos_idx: Vec<usize> = (0..b * t).map(|r| cfg.vocab_size + r % t).collect();
        let emb = p(EMBED)?;
        let tok = g.embed_lookup(emb, &tok_idx)?;
        let pos = g.embed_lookup(emb, &pos_idx)?;
        let mut x = g.add(tok, pos)?;

        let attn_scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        for l in 0..cfg.n_layers {
            let san = |leaf| p(&layer_param_name(l, Category::San, leaf));
            let ffn = |leaf| p(&layer_param_name(l, Category::Ffn, leaf));
            let ln = |leaf| p(&layer_param_name(l, Category::Ln, leaf));

            let h = g.rms_norm(x, ln("attn_norm")?, RMS_EPS)?;
            let q = g.matmul(h, san("wq")?)?;
            let k = g.matmul(h, san("wk")?)?;
            let v = g.matmul(h, san("wv")?)?;
            let qh = g.split_heads(q, b, t, heads)?;
            let kh = g.split_heads(k, b, t, heads)?;
            let vh = g.split_heads(v, b, t, heads)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, attn_scale)?;
            let probs = g.causal_softmax(scores)?;
            let ctx = g.matmul(probs, vh)?;
            let ctx = g.merge_heads(ctx, b, t, heads)?;
            let attn = g.matmul(ctx, san("wo")?)?;
            x = g.add(x, attn)?;

            let h = g.rms_norm(x, ln("ffn_norm")?, RMS_EPS)?;
            let gate = g.matmul(h, ffn("w_gate")?)?;
            let gate = g.silu(gate)?;
            let up = g.matmul(h, ffn("w_up")?)?;
            let act = g.mul(gate, up)?;
            let down = g.matmul(act, ffn("w_down")?)?;
            x = g.add(x, down)?;
        }
        let logits = g.matmul(x, p(LM_HEAD)?)?;
        Ok((logits, params))
    }

    /// Logits of shape `[batch, seq, vocab]`.
    pub fn forward_logits(&self, tokens: &TokenBatch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let frozen = vec![false; self.registry.len()];
        let (logits, _) = self.trace(&mut g, tokens, &frozen)?;
        let value = g.value(logits).clone();
        value.reshape(vec![tokens.batch, tokens.seq, self.config.vocab_size])
    }

    /// Next-token inputs and targets for prompt/answer pairs: the loss covers
    /// answer tokens only, prompt and padding positions carry no target.
    pub fn lm_batch(&self, batch: &[Example]) -> Result<(TokenBatch, Vec<Option<usize>>)> {
        let width = batch
            .iter()
            .map(|e| e.input_tokens.len() + e.target_tokens.len() - 1)
            .max()
            .ok_or(Error::AllPadded)?;
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len() * width);
        for e in batch {
            let full: Vec<u32> = e.input_tokens.iter().chain(&e.target_tokens).copied().collect();
            let n = full.len() - 1;
            let mut row = full[..n].to_vec();
            row.resize(width, PAD);
            rows.push(row);
            let first_target = e.input_tokens.len() - 1;
            for i in 0..width {
                targets.push((i >= first_target && i < n).then(|| full[i + 1] as usize));
            }
        }
        Ok((TokenBatch::new(&rows)?, targets))
    }
}

/// Mean negative log-likelihood of `targets` under `logits` (`[batch, seq, vocab]`),
/// skipping positions whose target equals `pad_id`.
pub fn loss_ce<T: Element>(logits: &Tensor<T>, targets: &TokenBatch, pad_id: u32) -> Result<T> {
    let &[b, t, v] = logits.shape() else {
        return Err(Error::Shape { op: "loss_ce", detail: format!("logits must be 3-D, got {:?}", logits.shape()) });
    };
    if targets.batch != b || targets.seq != t {
        return Err(Error::Shape {
            op: "loss_ce",
            detail: format!("targets [{}, {}] for logits [{b}, {t}, {v}]", targets.batch, targets.seq),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone().reshape(vec![b * t, v])?);
    let tgt: Vec<Option<usize>> = targets.ids.iter().map(|&id| (id != pad_id).then_some(id as usize)).collect();
    let loss = g.cross_entropy(x, &tgt)?;
    Ok(g.value(loss).item())
}

impl<T: Element> Objective<T> for Model<T> {
    type Example = Example;

    fn registry(&self) -> &ParameterRegistry<T> {
        &self.registry
    }

    fn registry_mut(&mut self) -> &mut ParameterRegistry<T> {
        &mut self.registry
    }

    fn loss_and_grads(&self, batch: &[Example], trainable: &[bool]) -> Result<(T, Vec<Option<Tensor<T>>>)> {
        let (tokens, targets) = self.lm_batch(batch)?;
        let mut g = Graph::new();
        let (logits, params) = self.trace(&mut g, &tokens, trainable)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let value = g.value(loss).item();
        if !trainable.iter().any(|&t| t) {
            return Ok((value, vec![None; params.len()]));
        }
        let mut grads = g.backward(loss)?;
        Ok((value, params.iter().map(|&p| grads.take(p)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        ModelConfig { vocab_size: 32, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 8, dtype: DType::F64 }
    }

    #[test]
    fn registry_has_nine_entries_per_layer_plus_io() {
        let m = build_model::<f64>(&toy(), 1).unwrap();
        assert_eq!(m.registry.len(), 20);
        let c = param_census(&m.registry);
        assert_eq!(c.category(Category::San).matrices, 8);
        assert_eq!(c.category(Category::Ffn).matrices, 6);
        assert_eq!(c.category(Category::Ln).matrices, 4);
        assert_eq!(c.layers.matrices, 18);
        let io = c.category(Category::Emb).elements + c.category(Category::Head).elements;
        assert_eq!(c.total.elements, c.layers.elements + io);
    }

    #[test]
    fn empty_census_is_zero() {
        let c = param_census(&ParameterRegistry::<f32>::new());
        assert_eq!(c.total, Count::default());
        assert_eq!(c.layers, Count::default());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_model::<f64>(&toy(), 9).unwrap();
        let b = build_model::<f64>(&toy(), 9).unwrap();
        assert!(a.registry.bits_eq(&b.registry));
        let c = build_model::<f64>(&toy(), 10).unwrap();
        assert!(!a.registry.bits_eq(&c.registry));
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = ModelConfig { n_heads: 3, ..toy() };
        assert!(matches!(build_model::<f64>(&bad, 0), Err(Error::InvalidConfig(_))));
        let zero = ModelConfig { d_ff: 0, ..toy() };
        assert!(build_model::<f64>(&zero, 0).is_err());
        assert!(build_model::<f32>(&toy(), 0).is_err());
    }

    #[test]
    fn single_token_logit_shape() {
        let m = build_model::<f64>(&toy(), 0).unwrap();
        let logits = m.forward_logits(&TokenBatch::new(&[vec![3]]).unwrap()).unwrap();
        assert_eq!(logits.shape(), &[1, 1, 32]);
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let m = build_model::<f64>(&toy(), 0).unwrap();
        let oob = TokenBatch::new(&[vec![1, 32]]).unwrap();
        assert!(matches!(m.forward_logits(&oob), Err(Error::TokenOutOfRange { .. })));
        let long = TokenBatch::new(&[vec![1; 9]]).unwrap();
        assert!(matches!(m.forward_logits(&long), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn zeroed_head_gives_uniform_loss() {
        let mut m = build_model::<f64>(&toy(), 3).unwrap();
        m.registry.set_tensor(LM_HEAD, Tensor::zeros(&[8, 32])).unwrap();
        let tokens = TokenBatch::new(&[vec![4, 5, 6], vec![7, 8, 9]]).unwrap();
        let logits = m.forward_logits(&tokens).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
        let targets = TokenBatch::new(&[vec![5, 6, 7], vec![8, 9, 10]]).unwrap();
        let loss = loss_ce(&logits, &targets, PAD).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
        assert!((32f64.ln() - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn loss_ce_edge_cases() {
        let v = 5;
        let mut data = vec![0.0f64; 2 * v];
        data[1] = 60.0;
        data[v + 3] = 60.0;
        let logits = Tensor::new(vec![1, 2, v], data).unwrap();
        let targets = TokenBatch::new(&[vec![1, 3]]).unwrap();
        assert!(loss_ce(&logits, &targets, PAD).unwrap() < 1e-20);
        let padded = TokenBatch::new(&[vec![PAD, PAD]]).unwrap();
        assert!(matches!(loss_ce(&logits, &padded, PAD), Err(Error::AllPadded)));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = build_model::<f32>(&ModelConfig { dtype: DType::F32, ..toy() }, 5).unwrap();
        let tokens = TokenBatch::new(&[vec![3, 1, 4, 1, 5]]).unwrap();
        let a = m.forward_logits(&tokens).unwrap();
        let b = m.forward_logits(&tokens).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn lm_batch_targets_only_answers() {
        let m = build_model::<f64>(&toy(), 0).unwrap();
        let ex = Example { input_tokens: vec![3, 11, 12, 1], target_tokens: vec![11, 12, 2] };
        let short = Example { input_tokens: vec![4, 11, 1], target_tokens: vec![13] };
        let (tokens, targets) = m.lm_batch(&[ex, short]).unwrap();
        assert_eq!(tokens.seq(), 6);
        assert_eq!(&tokens.ids()[..6], &[3, 11, 12, 1, 11, 12]);
        assert_eq!(&targets[..6], &[None, None, None, Some(11), Some(12), Some(2)]);
        assert_eq!(&tokens.ids()[6..], &[4, 11, 1, PAD, PAD, PAD]);
        assert_eq!(&targets[6..], &[None, None, Some(13), None, None, None]);
    }
}
