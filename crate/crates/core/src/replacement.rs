//! Lightweight replacement networks and their MSE trainer.
//!
//! A replacement network `h` stands in for a pruned span of layers: it is
//! trained to map the span's recorded input hidden states to its output
//! hidden states, token by token. Three architectures are supported (plain
//! FFN, gated SwiGLU, a full transformer layer) plus the no-op `None`
//! baseline. FFN and SwiGLU default to the residual form `x + g(norm(x))`
//! and start as an exact identity (zero output projection); pass
//! `residual = false` for the direct form `g(norm(x))`, which gets a random
//! output projection instead.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::HiddenPairDataset;
use crate::model::{causal_mask, layer_forward, LayerVars, ModelConfig, TransformerLayerWeights};
use crate::optim::AdamW;
use crate::tensor::{Graph, Tensor, TensorError, Value};

#[derive(Debug, thiserror::Error)]
pub enum ReplacementError {
    #[error("init strategy {strategy:?} is not valid for kind {kind:?}")]
    StrategyKindMismatch {
        kind: ReplacementKind,
        strategy: InitStrategy,
    },
    #[error("inheriting initialization requires at least one pruned layer")]
    NoPrunedLayers,
    #[error("d_inner must be > 0 for FFN/SwiGLU replacements")]
    ZeroInner,
    #[error("replacement expects d_model {expected}, got {got}")]
    DModelMismatch { expected: usize, got: usize },
    #[error("net is missing parameter {0}")]
    MissingParam(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("non-finite loss at step {step} (epoch {epoch}); aborting")]
    NanLoss { step: usize, epoch: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementKind {
    None,
    Ffn,
    Swiglu,
    Layer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Random,
    First,
    Last,
    Avg,
    NotApplicable,
}

/// A lightweight network with named parameters and init provenance.
#[derive(Debug, Clone)]
pub struct ReplacementNet {
    pub kind: ReplacementKind,
    pub params: BTreeMap<String, Tensor>,
    pub d_model: usize,
    pub d_inner: usize,
    pub residual: bool,
    pub init_strategy: InitStrategy,
    pub n_heads: usize,
    pub norm_eps: f32,
}

/// Graph handles for a net's parameters, keyed by parameter name.
pub struct ReplacementVars {
    pub named: BTreeMap<String, Value>,
}

impl ReplacementNet {
    pub fn validate(&self, d_model: usize) -> Result<(), ReplacementError> {
        if self.d_model != d_model {
            return Err(ReplacementError::DModelMismatch {
                expected: d_model,
                got: self.d_model,
            });
        }
        match self.kind {
            ReplacementKind::None => {
                if !self.params.is_empty() {
                    return Err(ReplacementError::Config(
                        "kind=none must have zero parameters".into(),
                    ));
                }
            }
            ReplacementKind::Ffn => {
                self.expect_shape("norm_gain", &[d_model])?;
                self.expect_shape("w_in", &[d_model, self.d_inner])?;
                self.expect_shape("w_out", &[self.d_inner, d_model])?;
            }
            ReplacementKind::Swiglu => {
                self.expect_shape("norm_gain", &[d_model])?;
                self.expect_shape("w_gate", &[d_model, self.d_inner])?;
                self.expect_shape("w_up", &[d_model, self.d_inner])?;
                self.expect_shape("w_down", &[self.d_inner, d_model])?;
            }
            ReplacementKind::Layer => {
                for (name, _) in layer_param_names(d_model, self.d_inner) {
                    if !self.params.contains_key(name) {
                        return Err(ReplacementError::MissingParam(name.to_string()));
                    }
                }
            }
        }
        Ok(())
    }

    fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<(), ReplacementError> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| ReplacementError::MissingParam(name.to_string()))?;
        if t.shape() != shape {
            return Err(ReplacementError::Config(format!(
                "param {name} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn insert_vars(&self, g: &mut Graph, trainable: bool) -> ReplacementVars {
        let named = self
            .params
            .iter()
            .map(|(name, t)| {
                let t = if trainable {
                    t.clone().with_grad()
                } else {
                    t.clone().detached()
                };
                (name.clone(), g.input(t))
            })
            .collect();
        ReplacementVars { named }
    }

    /// Applies the net to a `[T x d]` hidden-state matrix inside `g`.
    pub fn forward_with_vars(
        &self,
        g: &mut Graph,
        vars: &ReplacementVars,
        x: Value,
    ) -> Result<Value, TensorError> {
        let get = |name: &str| -> Value {
            *vars
                .named
                .get(name)
                .unwrap_or_else(|| panic!("validated net is missing param {name}"))
        };
        match self.kind {
            ReplacementKind::None => Ok(x),
            ReplacementKind::Ffn => {
                let normed = g.rmsnorm(x, get("norm_gain"), self.norm_eps)?;
                let hidden = g.matmul(normed, get("w_in"))?;
                let hidden = g.silu(hidden);
                let out = g.matmul(hidden, get("w_out"))?;
                if self.residual {
                    g.add(x, out)
                } else {
                    Ok(out)
                }
            }
            ReplacementKind::Swiglu => {
                let normed = g.rmsnorm(x, get("norm_gain"), self.norm_eps)?;
                let gate = g.matmul(normed, get("w_gate"))?;
                let gate = g.silu(gate);
                let up = g.matmul(normed, get("w_up"))?;
                let inner = g.mul(gate, up)?;
                let out = g.matmul(inner, get("w_down"))?;
                if self.residual {
                    g.add(x, out)
                } else {
                    Ok(out)
                }
            }
            ReplacementKind::Layer => {
                let l = LayerVars {
                    wq: get("attn.wq"),
                    wk: get("attn.wk"),
                    wv: get("attn.wv"),
                    wo: get("attn.wo"),
                    w_gate: get("mlp.w_gate"),
                    w_up: get("mlp.w_up"),
                    w_down: get("mlp.w_down"),
                    attn_gain: get("norm.attn_gain"),
                    mlp_gain: get("norm.mlp_gain"),
                };
                let t = g.value(x).rows();
                let mask = g.input(causal_mask(t));
                layer_forward(g, x, &l, mask, self.n_heads, self.norm_eps)
            }
        }
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Value,
        trainable: bool,
    ) -> Result<Value, TensorError> {
        let vars = self.insert_vars(g, trainable);
        self.forward_with_vars(g, &vars, x)
    }

    /// Applies the net to a hidden-state matrix outside any training graph.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut g = Graph::new();
        let vx = g.input(x.clone().detached());
        let out = self.forward_graph(&mut g, vx, false)?;
        Ok(g.value(out).clone())
    }

    /// Extracts the Layer-kind parameters as layer weights.
    pub fn as_layer_weights(&self) -> Option<TransformerLayerWeights> {
        if self.kind != ReplacementKind::Layer {
            return None;
        }
        let get = |name: &str| self.params.get(name).cloned();
        Some(TransformerLayerWeights {
            wq: get("attn.wq")?,
            wk: get("attn.wk")?,
            wv: get("attn.wv")?,
            wo: get("attn.wo")?,
            w_gate: get("mlp.w_gate")?,
            w_up: get("mlp.w_up")?,
            w_down: get("mlp.w_down")?,
            attn_gain: get("norm.attn_gain")?,
            mlp_gain: get("norm.mlp_gain")?,
        })
    }
}

fn layer_param_names(d: usize, d_ff: usize) -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("attn.wq", vec![d, d]),
        ("attn.wk", vec![d, d]),
        ("attn.wv", vec![d, d]),
        ("attn.wo", vec![d, d]),
        ("mlp.w_gate", vec![d, d_ff]),
        ("mlp.w_up", vec![d, d_ff]),
        ("mlp.w_down", vec![d_ff, d]),
        ("norm.attn_gain", vec![d]),
        ("norm.mlp_gain", vec![d]),
    ]
}

fn layer_params_map(w: &TransformerLayerWeights) -> BTreeMap<String, Tensor> {
    w.named_tensors()
        .into_iter()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect()
}

/// What to build: architecture, init strategy, inner width, residual form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplacementSpec {
    pub kind: ReplacementKind,
    pub strategy: InitStrategy,
    pub d_inner: usize,
    pub residual: bool,
}

/// Builds and initializes a replacement network.
///
/// `First` copies the first pruned layer, `Last` the last, `Avg` takes the
/// elementwise mean of all pruned layers; those three apply only to the
/// Layer kind. `Random` draws fresh weights, seeded.
pub fn init_replacement(
    spec: &ReplacementSpec,
    cfg: &ModelConfig,
    pruned_layers: &[TransformerLayerWeights],
    seed: u64,
) -> Result<ReplacementNet, ReplacementError> {
    let d = cfg.d_model;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mismatch = || ReplacementError::StrategyKindMismatch {
        kind: spec.kind,
        strategy: spec.strategy,
    };
    let (params, d_inner, strategy): (BTreeMap<String, Tensor>, usize, InitStrategy) = match spec
        .kind
    {
        ReplacementKind::None => {
            if !matches!(spec.strategy, InitStrategy::NotApplicable) {
                return Err(mismatch());
            }
            (BTreeMap::new(), 0, InitStrategy::NotApplicable)
        }
        ReplacementKind::Ffn | ReplacementKind::Swiglu => {
            if !matches!(spec.strategy, InitStrategy::Random) {
                return Err(mismatch());
            }
            if spec.d_inner == 0 {
                return Err(ReplacementError::ZeroInner);
            }
            let di = spec.d_inner;
            let in_sigma = 1.0 / (d as f32).sqrt();
            let out_sigma = 1.0 / (di as f32).sqrt();
            let mut params = BTreeMap::new();
            params.insert("norm_gain".to_string(), Tensor::full(vec![d], 1.0));
            let mut out_mat = |shape: Vec<usize>, rng: &mut ChaCha20Rng| {
                if spec.residual {
                    Tensor::zeros(shape)
                } else {
                    Tensor::randn(shape, out_sigma, rng)
                }
            };
            if spec.kind == ReplacementKind::Ffn {
                params.insert(
                    "w_in".to_string(),
                    Tensor::randn(vec![d, di], in_sigma, &mut rng),
                );
                params.insert("w_out".to_string(), out_mat(vec![di, d], &mut rng));
            } else {
                params.insert(
                    "w_gate".to_string(),
                    Tensor::randn(vec![d, di], in_sigma, &mut rng),
                );
                params.insert(
                    "w_up".to_string(),
                    Tensor::randn(vec![d, di], in_sigma, &mut rng),
                );
                params.insert("w_down".to_string(), out_mat(vec![di, d], &mut rng));
            }
            (params, di, InitStrategy::Random)
        }
        ReplacementKind::Layer => {
            let need_layers = !matches!(spec.strategy, InitStrategy::Random);
            if need_layers && pruned_layers.is_empty() {
                return Err(ReplacementError::NoPrunedLayers);
            }
            let weights = match spec.strategy {
                InitStrategy::Random => {
                    TransformerLayerWeights::random(cfg, TransformerLayerWeights::DEFAULT_OUT_SCALE, &mut rng)
                }
                InitStrategy::First => pruned_layers[0].clone(),
                InitStrategy::Last => pruned_layers[pruned_layers.len() - 1].clone(),
                InitStrategy::Avg => average_layers(pruned_layers)?,
                InitStrategy::NotApplicable => return Err(mismatch()),
            };
            (layer_params_map(&weights), cfg.d_ff, spec.strategy)
        }
    };
    Ok(ReplacementNet {
        kind: spec.kind,
        params,
        d_model: d,
        d_inner,
        residual: match spec.kind {
            // A transformer layer is residual by construction; None is the
            // identity. The flag only selects the FFN/SwiGLU form.
            ReplacementKind::Layer | ReplacementKind::None => true,
            _ => spec.residual,
        },
        init_strategy: strategy,
        n_heads: cfg.n_heads,
        norm_eps: cfg.norm_eps,
    })
}

/// Elementwise mean of every tensor across the given layers.
pub fn average_layers(
    layers: &[TransformerLayerWeights],
) -> Result<TransformerLayerWeights, ReplacementError> {
    if layers.is_empty() {
        return Err(ReplacementError::NoPrunedLayers);
    }
    let mean = |pick: fn(&TransformerLayerWeights) -> &Tensor| -> Result<Tensor, ReplacementError> {
        let refs: Vec<&Tensor> = layers.iter().map(pick).collect();
        Ok(Tensor::mean_of(&refs)?)
    };
    Ok(TransformerLayerWeights {
        wq: mean(|l| &l.wq)?,
        wk: mean(|l| &l.wk)?,
        wv: mean(|l| &l.wv)?,
        wo: mean(|l| &l.wo)?,
        w_gate: mean(|l| &l.w_gate)?,
        w_up: mean(|l| &l.w_up)?,
        w_down: mean(|l| &l.w_down)?,
        attn_gain: mean(|l| &l.attn_gain)?,
        mlp_gain: mean(|l| &l.mlp_gain)?,
    })
}

/// Trainer hyperparameters. Optimizer moments are fixed at beta1 = 0.9,
/// beta2 = 0.999, eps = 1e-8 with decoupled weight decay and a constant
/// learning rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl TrainConfig {
    /// Defaults per architecture: FFN/SwiGLU use lr 1e-3 / wd 1e-4, the
    /// transformer-layer net lr 1e-5 / wd 1e-3; batch 32, 20 epochs.
    pub fn default_for(kind: ReplacementKind) -> Self {
        let (lr, weight_decay) = match kind {
            ReplacementKind::Layer => (1e-5, 1e-3),
            _ => (1e-3, 1e-4),
        };
        TrainConfig {
            lr,
            weight_decay,
            batch_size: 32,
            epochs: 20,
            seed: 42,
            val_fraction: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), ReplacementError> {
        if !(self.lr > 0.0) {
            return Err(ReplacementError::Config("lr must be > 0".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ReplacementError::Config(
                "val_fraction must be in (0, 1)".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ReplacementError::Config(
                "batch_size and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss_curve: Vec<f64>,
    pub val_loss_curve: Vec<f64>,
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub final_params_ref: String,
}

/// Mean squared error of the net over every token and dimension in the
/// dataset, accumulated in f64. No gradients involved.
pub fn evaluate_replacement_mse(
    net: &ReplacementNet,
    dataset: &HiddenPairDataset,
) -> Result<f64, ReplacementError> {
    evaluate_mse_on(net, &dataset.pairs)
}

fn evaluate_mse_on(
    net: &ReplacementNet,
    pairs: &[(Tensor, Tensor)],
) -> Result<f64, ReplacementError> {
    if pairs.is_empty() {
        return Err(ReplacementError::EmptyDataset(
            "cannot evaluate on zero pairs".into(),
        ));
    }
    let mut sse = 0f64;
    let mut count = 0usize;
    for (input, target) in pairs {
        let out = net.apply(input)?;
        sse += out
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>();
        count += target.numel();
    }
    Ok(sse / count as f64)
}

/// Deterministic train/validation split: indices are shuffled by the seed,
/// the first `ceil(val_fraction * n)` become validation.
pub fn split_dataset(
    n: usize,
    val_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_val = ((val_fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains `net` in place by mini-batch MSE with AdamW; on return the
/// parameters are those of the best validation epoch.
pub fn train_replacement(
    net: &mut ReplacementNet,
    dataset: &HiddenPairDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, ReplacementError> {
    cfg.validate()?;
    if dataset.pairs.is_empty() {
        return Err(ReplacementError::EmptyDataset(
            "training requires a non-empty pair dataset".into(),
        ));
    }
    if dataset.d_model != net.d_model {
        return Err(ReplacementError::DModelMismatch {
            expected: net.d_model,
            got: dataset.d_model,
        });
    }
    let (train_idx, val_idx) = split_dataset(dataset.pairs.len(), cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(ReplacementError::EmptyDataset(
            "train split is empty; provide at least two pairs".into(),
        ));
    }
    let val_pairs: Vec<(Tensor, Tensor)> = val_idx
        .iter()
        .map(|&i| dataset.pairs[i].clone())
        .collect();

    let initial_val_loss = evaluate_mse_on(net, &val_pairs)?;
    let mut optimizer = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut epoch_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut train_loss_curve = Vec::new();
    let mut val_loss_curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, BTreeMap<String, Tensor>)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        let mut order = train_idx.clone();
        order.shuffle(&mut epoch_rng);
        for batch in order.chunks(cfg.batch_size) {
            let docs: Vec<&(Tensor, Tensor)> = batch.iter().map(|&i| &dataset.pairs[i]).collect();
            let loss = train_step(net, &docs, &mut optimizer)?;
            if !loss.is_finite() {
                return Err(ReplacementError::NanLoss { step, epoch });
            }
            train_loss_curve.push(loss as f64);
            step += 1;
        }
        let val = evaluate_mse_on(net, &val_pairs)?;
        val_loss_curve.push(val);
        let better = match &best {
            Some((_, best_val, _)) => val < *best_val,
            None => true,
        };
        if better {
            best = Some((epoch, val, net.params.clone()));
        }
    }

    let (best_epoch, _, best_params) = best.expect("epochs >= 1 guarantees a best epoch");
    net.params = best_params;
    Ok(TrainReport {
        train_loss_curve,
        val_loss_curve,
        initial_val_loss,
        best_epoch,
        final_params_ref: params_ref(&net.params),
    })
}

/// One optimization step over a batch of documents. Token-mixing nets
/// (Layer kind) run per document under a causal mask; pointwise nets are
/// applied to all rows at once. Either way the loss is the mean squared
/// error over every token and dimension in the batch.
fn train_step(
    net: &mut ReplacementNet,
    docs: &[&(Tensor, Tensor)],
    optimizer: &mut AdamW,
) -> Result<f32, ReplacementError> {
    let mut g = Graph::new();
    let vars = net.insert_vars(&mut g, true);
    let loss = match net.kind {
        ReplacementKind::Layer => {
            let total_elems: usize = docs.iter().map(|(_, t)| t.numel()).sum();
            let mut acc: Option<Value> = None;
            for (input, target) in docs {
                let vx = g.input(input.clone().detached());
                let vy = g.input(target.clone().detached());
                let out = net.forward_with_vars(&mut g, &vars, vx)?;
                let sse = g.sse(out, vy)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, sse)?,
                    None => sse,
                });
            }
            let acc = acc.expect("non-empty batch");
            g.scale(acc, 1.0 / total_elems as f32)
        }
        _ => {
            let d = net.d_model;
            let rows: usize = docs.iter().map(|(i, _)| i.rows()).sum();
            let mut xin = Vec::with_capacity(rows * d);
            let mut yin = Vec::with_capacity(rows * d);
            for (input, target) in docs {
                xin.extend_from_slice(input.data());
                yin.extend_from_slice(target.data());
            }
            let vx = g.input(Tensor::from_vec(vec![rows, d], xin)?);
            let vy = g.input(Tensor::from_vec(vec![rows, d], yin)?);
            let out = net.forward_with_vars(&mut g, &vars, vx)?;
            g.mse(out, vy)?
        }
    };
    let loss_value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    optimizer.step(&mut net.params, |name| {
        vars.named
            .get(name)
            .and_then(|&v| grads.get(v))
            .map(|t| t.data())
    });
    Ok(loss_value)
}

/// Content hash of the parameter set, used as the trained-weights id.
pub fn params_ref(params: &BTreeMap<String, Tensor>) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        for &v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(16);
    for b in digest.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests;
