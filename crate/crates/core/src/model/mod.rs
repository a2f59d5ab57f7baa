//! A small pre-norm decoder-only transformer with residual-stream taps.
//!
//! Architecture is Llama-style throughout: RMSNorm before each sublayer,
//! rotary position encoding on query/key heads, SwiGLU MLP, no biases, and
//! untied embedding / unembedding matrices. Layers live in an ordered list;
//! removing entries from that list (plus optionally splicing in a
//! replacement network) is how the pruner produces compressed models.

mod container;

pub use container::{load_model, model_fingerprint, save_model, save_model_to_vec};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::replacement::ReplacementNet;
use crate::tensor::{Graph, Tensor, TensorError, Value};

/// Rotary position encoding wavelength base.
pub const ROPE_BASE: f32 = 10000.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("container io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("checksum mismatch for tensor {name}")]
    ChecksumMismatch { name: String },
    #[error("unknown tensor name {name}")]
    UnknownTensor { name: String },
    #[error("container manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub norm_eps: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers < 1 {
            return Err(ModelError::Config("n_layers must be >= 1".into()));
        }
        if self.max_seq_len < 1 {
            return Err(ModelError::Config("max_seq_len must be >= 1".into()));
        }
        if self.vocab_size < 1 {
            return Err(ModelError::Config("vocab_size must be >= 1".into()));
        }
        if self.n_heads < 1 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(ModelError::Config(
                "head dimension must be even for rotary encoding".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// All parameters of one decoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayerWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub attn_gain: Tensor,
    pub mlp_gain: Tensor,
}

impl TransformerLayerWeights {
    /// Parameter tensors paired with their canonical container names
    /// (relative to the layer prefix).
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("attn.wq", &self.wq),
            ("attn.wk", &self.wk),
            ("attn.wv", &self.wv),
            ("attn.wo", &self.wo),
            ("mlp.w_gate", &self.w_gate),
            ("mlp.w_up", &self.w_up),
            ("mlp.w_down", &self.w_down),
            ("norm.attn_gain", &self.attn_gain),
            ("norm.mlp_gain", &self.mlp_gain),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let expect: &[(&str, Vec<usize>)] = &[
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("mlp.w_gate", vec![d, f]),
            ("mlp.w_up", vec![d, f]),
            ("mlp.w_down", vec![f, d]),
            ("norm.attn_gain", vec![d]),
            ("norm.mlp_gain", vec![d]),
        ];
        for ((name, shape), (_, t)) in expect.iter().zip(self.named_tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "layer tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Config(format!(
                    "layer tensor {name} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy whose attention and MLP output projections are zero,
    /// making the layer an exact identity on the residual stream.
    pub fn with_zeroed_outputs(&self) -> Self {
        let mut w = self.clone();
        w.wo = Tensor::zeros(w.wo.shape().to_vec());
        w.w_down = Tensor::zeros(w.w_down.shape().to_vec());
        w
    }
}

/// A decoder model plus surgery provenance. `layer_labels[i]` is the index
/// the i-th current layer had in the original dense model; replacement
/// networks are keyed by the current position they precede (a key equal to
/// `layers.len()` means "after the last layer").
#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<TransformerLayerWeights>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
    pub layer_labels: Vec<usize>,
    pub replacement_slots: BTreeMap<usize, ReplacementNet>,
}

impl TransformerModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        if self.embedding.shape() != [v, d] {
            return Err(ModelError::Config(format!(
                "embedding shape {:?}, expected [{v}, {d}]",
                self.embedding.shape()
            )));
        }
        if self.unembed.shape() != [d, v] {
            return Err(ModelError::Config(format!(
                "unembed shape {:?}, expected [{d}, {v}]",
                self.unembed.shape()
            )));
        }
        if self.final_norm.shape() != [d] {
            return Err(ModelError::Config(format!(
                "final_norm shape {:?}, expected [{d}]",
                self.final_norm.shape()
            )));
        }
        for layer in &self.layers {
            layer.validate(&self.config)?;
        }
        if self.layer_labels.len() != self.layers.len() {
            return Err(ModelError::Config(format!(
                "{} layer labels for {} layers",
                self.layer_labels.len(),
                self.layers.len()
            )));
        }
        if self.layer_labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ModelError::Config(
                "layer_labels must be strictly increasing".into(),
            ));
        }
        for (&pos, net) in &self.replacement_slots {
            if pos > self.layers.len() {
                return Err(ModelError::Config(format!(
                    "replacement slot {pos} out of range for {} layers",
                    self.layers.len()
                )));
            }
            net.validate(d).map_err(|e| ModelError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Total parameter count: embeddings, layers, final norm, unembedding,
    /// and any replacement networks.
    pub fn parameter_count(&self) -> usize {
        self.embedding.numel()
            + self.unembed.numel()
            + self.final_norm.numel()
            + self
                .layers
                .iter()
                .map(TransformerLayerWeights::parameter_count)
                .sum::<usize>()
            + self
                .replacement_slots
                .values()
                .map(ReplacementNet::parameter_count)
                .sum::<usize>()
    }
}

/// Which residual-stream boundaries `forward` should record.
#[derive(Debug, Clone)]
pub enum Capture {
    None,
    All,
    Boundaries(BTreeSet<usize>),
}

impl Capture {
    pub fn boundaries(ids: impl IntoIterator<Item = usize>) -> Self {
        Capture::Boundaries(ids.into_iter().collect())
    }

    fn wants(&self, boundary: usize) -> bool {
        match self {
            Capture::None => false,
            Capture::All => true,
            Capture::Boundaries(set) => set.contains(&boundary),
        }
    }
}

/// Recorded residual-stream snapshots. `taps[b]` is the hidden state
/// entering layer `b`; `taps[n_layers]` is taken before the final norm.
/// Boundaries that were not requested stay `None`.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub sample_id: usize,
    pub taps: Vec<Option<Tensor>>,
}

impl ActivationTrace {
    pub fn tap(&self, boundary: usize) -> Option<&Tensor> {
        self.taps.get(boundary).and_then(|t| t.as_ref())
    }
}

/// Handles to one layer's weights inside a graph.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
    pub wo: Value,
    pub w_gate: Value,
    pub w_up: Value,
    pub w_down: Value,
    pub attn_gain: Value,
    pub mlp_gain: Value,
}

impl LayerVars {
    pub fn insert(g: &mut Graph, w: &TransformerLayerWeights, trainable: bool) -> Self {
        let mut put = |t: &Tensor| {
            let t = if trainable {
                t.clone().with_grad()
            } else {
                t.clone().detached()
            };
            g.input(t)
        };
        LayerVars {
            wq: put(&w.wq),
            wk: put(&w.wk),
            wv: put(&w.wv),
            wo: put(&w.wo),
            w_gate: put(&w.w_gate),
            w_up: put(&w.w_up),
            w_down: put(&w.w_down),
            attn_gain: put(&w.attn_gain),
            mlp_gain: put(&w.mlp_gain),
        }
    }
}

/// Additive causal attention mask: 0 on and below the diagonal, a large
/// negative value above it.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0f32; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = -1e30;
        }
    }
    Tensor::from_vec(vec![t, t], data).expect("mask shape is valid")
}

/// Pre-norm causal self-attention sublayer output (before the residual add).
pub fn attn_sublayer(
    g: &mut Graph,
    x: Value,
    l: &LayerVars,
    mask: Value,
    n_heads: usize,
    eps: f32,
) -> Result<Value, TensorError> {
    let normed = g.rmsnorm(x, l.attn_gain, eps)?;
    let q = g.matmul(normed, l.wq)?;
    let k = g.matmul(normed, l.wk)?;
    let v = g.matmul(normed, l.wv)?;
    let d = g.value(q).cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let qh = g.rope(qh, ROPE_BASE)?;
        let kh = g.rope(kh, ROPE_BASE)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let masked = g.add(scores, mask)?;
        let att = g.softmax_rows(masked)?;
        heads.push(g.matmul(att, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    g.matmul(merged, l.wo)
}

/// Pre-norm SwiGLU MLP sublayer output (before the residual add).
pub fn mlp_sublayer(g: &mut Graph, x: Value, l: &LayerVars, eps: f32) -> Result<Value, TensorError> {
    let normed = g.rmsnorm(x, l.mlp_gain, eps)?;
    let gate = g.matmul(normed, l.w_gate)?;
    let gate = g.silu(gate);
    let up = g.matmul(normed, l.w_up)?;
    let inner = g.mul(gate, up)?;
    g.matmul(inner, l.w_down)
}

/// One full decoder layer: `x + attn(x)` then `+ mlp(...)`.
pub fn layer_forward(
    g: &mut Graph,
    x: Value,
    l: &LayerVars,
    mask: Value,
    n_heads: usize,
    eps: f32,
) -> Result<Value, TensorError> {
    let attn = attn_sublayer(g, x, l, mask, n_heads, eps)?;
    let x = g.add(x, attn)?;
    let mlp = mlp_sublayer(g, x, l, eps)?;
    g.add(x, mlp)
}

fn embed_tokens(model: &TransformerModel, token_ids: &[u32]) -> Result<Tensor, ModelError> {
    let d = model.config.d_model;
    let mut data = Vec::with_capacity(token_ids.len() * d);
    for &id in token_ids {
        if id as usize >= model.config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: model.config.vocab_size,
            });
        }
        data.extend_from_slice(model.embedding.row(id as usize));
    }
    Ok(Tensor::from_vec(vec![token_ids.len(), d], data)?)
}

/// Full forward pass. Returns `[L x V]` logits and the requested taps;
/// replacement networks run in place of the layer spans they were spliced
/// over, before the tap at their position is recorded.
pub fn forward(
    model: &TransformerModel,
    token_ids: &[u32],
    capture: &Capture,
) -> Result<(Tensor, ActivationTrace), ModelError> {
    if token_ids.is_empty() {
        return Err(ModelError::Contract {
            op: "forward",
            reason: "empty token sequence".into(),
        });
    }
    if token_ids.len() > model.config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: token_ids.len(),
            max: model.config.max_seq_len,
        });
    }
    let n_layers = model.layers.len();
    let eps = model.config.norm_eps;
    let mut taps: Vec<Option<Tensor>> = vec![None; n_layers + 1];

    let mut g = Graph::new();
    let mask = g.input(causal_mask(token_ids.len()));
    let mut h = g.input(embed_tokens(model, token_ids)?);
    for (i, layer) in model.layers.iter().enumerate() {
        if let Some(net) = model.replacement_slots.get(&i) {
            h = net.forward_graph(&mut g, h, false)?;
        }
        if capture.wants(i) {
            taps[i] = Some(g.value(h).clone());
        }
        let vars = LayerVars::insert(&mut g, layer, false);
        h = layer_forward(&mut g, h, &vars, mask, model.config.n_heads, eps)?;
    }
    if let Some(net) = model.replacement_slots.get(&n_layers) {
        h = net.forward_graph(&mut g, h, false)?;
    }
    if capture.wants(n_layers) {
        taps[n_layers] = Some(g.value(h).clone());
    }
    let gain = g.input(model.final_norm.clone());
    let normed = g.rmsnorm(h, gain, eps)?;
    let unembed = g.input(model.unembed.clone());
    let logits = g.matmul(normed, unembed)?;
    Ok((
        g.value(logits).clone(),
        ActivationTrace { sample_id: 0, taps },
    ))
}

/// Mean next-token negative log-likelihood of a sequence given `[L x V]`
/// logits for its first `L` positions (targets are positions `1..=L`).
pub fn nll_from_logits(logits: &Tensor, token_ids: &[u32]) -> Result<f32, ModelError> {
    if token_ids.len() < 2 {
        return Err(ModelError::Contract {
            op: "sentence_ppl",
            reason: format!("need at least 2 tokens, got {}", token_ids.len()),
        });
    }
    let l = token_ids.len();
    let v = logits.cols();
    let mut g = Graph::new();
    let data = logits.data()[..(l - 1) * v].to_vec();
    let lv = g.input(Tensor::from_vec(vec![l - 1, v], data)?);
    let targets: Vec<usize> = token_ids[1..].iter().map(|&t| t as usize).collect();
    let loss = g.softmax_ce(lv, &targets)?;
    Ok(g.value(loss).data()[0])
}

/// Sentence perplexity: `exp` of the mean next-token NLL.
pub fn sentence_ppl(model: &TransformerModel, token_ids: &[u32]) -> Result<f64, ModelError> {
    let (logits, _) = forward(model, token_ids, &Capture::None)?;
    let nll = nll_from_logits(&logits, token_ids)?;
    Ok((nll as f64).exp())
}

/// Greedy decoding; ties pick the lowest token id. The prompt plus
/// `max_new` tokens must fit in `max_seq_len`.
pub fn greedy_decode(
    model: &TransformerModel,
    prompt_ids: &[u32],
    max_new: usize,
) -> Result<Vec<u32>, ModelError> {
    if prompt_ids.is_empty() {
        return Err(ModelError::Contract {
            op: "greedy_decode",
            reason: "empty prompt".into(),
        });
    }
    if prompt_ids.len() + max_new > model.config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: prompt_ids.len() + max_new,
            max: model.config.max_seq_len,
        });
    }
    let mut ids = prompt_ids.to_vec();
    for _ in 0..max_new {
        let (logits, _) = forward(model, &ids, &Capture::None)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 0usize;
        for (j, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = j;
            }
        }
        ids.push(best as u32);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests;
