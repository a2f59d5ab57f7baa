//! Operation recording and reverse-mode gradient computation.
//!
//! The op set is fixed: exactly what the transformer forward pass and the
//! replacement-network trainer need. Every forward result is computed
//! eagerly; a node is recorded only when some input is connected to a
//! gradient leaf, so inference pays no tape cost beyond value storage.

use std::collections::HashMap;

use super::{Tensor, TensorError};

/// Handle to a value held by a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug)]
enum Op {
    Add,
    Mul,
    Scale(f32),
    Silu,
    Gelu,
    RmsNorm { eps: f32 },
    MatMul,
    Transpose,
    Reshape { from: Vec<usize> },
    SliceCols { start: usize, in_cols: usize },
    ConcatCols { widths: Vec<usize> },
    Rope { base: f32 },
    SoftmaxRows,
    SoftmaxCe { targets: Vec<usize>, probs: Tensor },
    SumAll,
    Sse,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    out: usize,
}

/// Gradients keyed by graph value, one per reachable `requires_grad` leaf.
#[derive(Debug)]
pub struct GradMap {
    grads: HashMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, v: Value) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// A single-threaded op tape. Values are immutable once inserted; nodes are
/// appended in execution order, which is also a topological order, and
/// backward visits them exactly once in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    leaves: Vec<usize>,
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Inserts a tensor as a graph input. Tensors flagged `requires_grad`
    /// become gradient leaves.
    pub fn input(&mut self, t: Tensor) -> Value {
        let id = self.values.len();
        let rg = t.requires_grad();
        self.values.push(t);
        self.needs_grad.push(rg);
        if rg {
            self.leaves.push(id);
        }
        Value(id)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, out: Tensor) -> Value {
        debug_assert!(
            out.is_finite(),
            "non-finite output from {:?} on finite inputs",
            op
        );
        let id = self.values.len();
        let ng = inputs.iter().any(|&i| self.needs_grad[i]);
        self.values.push(out);
        self.needs_grad.push(ng);
        if ng {
            self.nodes.push(Node { op, inputs, out: id });
        }
        Value(id)
    }

    // ---- elementwise ----

    fn broadcast_pair(
        &self,
        op: &'static str,
        a: Value,
        b: Value,
    ) -> Result<Vec<usize>, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() == tb.shape() {
            Ok(ta.shape().to_vec())
        } else if tb.numel() == 1 {
            Ok(ta.shape().to_vec())
        } else if ta.numel() == 1 {
            Ok(tb.shape().to_vec())
        } else {
            Err(TensorError::DimMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    /// Elementwise sum; one side may be a scalar.
    pub fn add(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let shape = self.broadcast_pair("add", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                ta.data()[i % ta.numel()] + tb.data()[i % tb.numel()]
            })
            .collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(Op::Add, vec![a.0, b.0], out))
    }

    /// Elementwise product; one side may be a scalar.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let shape = self.broadcast_pair("mul", a, b)?;
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ta.data()[i % ta.numel()] * tb.data()[i % tb.numel()])
            .collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(Op::Mul, vec![a.0, b.0], out))
    }

    pub fn scale(&mut self, a: Value, c: f32) -> Value {
        let ta = &self.values[a.0];
        let out = Tensor::from_vec(
            ta.shape().to_vec(),
            ta.data().iter().map(|&v| v * c).collect(),
        )
        .expect("scale preserves shape");
        self.push(Op::Scale(c), vec![a.0], out)
    }

    pub fn silu(&mut self, a: Value) -> Value {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| silu_f32(x)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("silu preserves shape");
        self.push(Op::Silu, vec![a.0], out)
    }

    pub fn gelu(&mut self, a: Value) -> Value {
        let ta = &self.values[a.0];
        let data = ta.data().iter().map(|&x| gelu_f32(x)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data).expect("gelu preserves shape");
        self.push(Op::Gelu, vec![a.0], out)
    }

    /// Row-wise RMS normalization: `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rmsnorm(&mut self, x: Value, gain: Value, eps: f32) -> Result<Value, TensorError> {
        let (tx, tg) = (&self.values[x.0], &self.values[gain.0]);
        let d = tx.cols();
        if tg.shape() != [d] {
            return Err(TensorError::DimMismatch {
                op: "rmsnorm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.rows();
        let mut data = vec![0f32; tx.numel()];
        for r in 0..rows {
            let xr = tx.row(r);
            let ms = xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps as f64).sqrt();
            for j in 0..d {
                data[r * d + j] = ((xr[j] as f64) * inv * (tg.data()[j] as f64)) as f32;
            }
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::RmsNorm { eps }, vec![x.0, gain.0], out))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "matmul",
                shape: ta.shape().to_vec(),
            });
        }
        if tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = matmul_nn(ta, tb);
        Ok(self.push(Op::MatMul, vec![a.0, b.0], out))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value, TensorError> {
        let ta = &self.values[a.0];
        if ta.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "transpose",
                shape: ta.shape().to_vec(),
            });
        }
        let out = transpose2d(ta);
        Ok(self.push(Op::Transpose, vec![a.0], out))
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value, TensorError> {
        let ta = &self.values[a.0];
        let from = ta.shape().to_vec();
        let out = Tensor::from_vec(shape, ta.data().to_vec())?;
        Ok(self.push(Op::Reshape { from }, vec![a.0], out))
    }

    /// Takes columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: Value, start: usize, len: usize) -> Result<Value, TensorError> {
        let ta = &self.values[a.0];
        let cols = ta.cols();
        if ta.shape().len() != 2 || start + len > cols || len == 0 {
            return Err(TensorError::Contract {
                op: "slice_cols",
                reason: format!(
                    "slice [{start}, {}) invalid for shape {:?}",
                    start + len,
                    ta.shape()
                ),
            });
        }
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(vec![rows, len], data)?;
        Ok(self.push(Op::SliceCols { start, in_cols: cols }, vec![a.0], out))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_cols",
                reason: "no inputs".into(),
            });
        }
        let rows = self.values[parts[0].0].rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.values[p.0];
            if t.shape().len() != 2 || t.rows() != rows {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.values[parts[0].0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let out = Tensor::from_vec(vec![rows, total], data)?;
        Ok(self.push(
            Op::ConcatCols { widths },
            parts.iter().map(|p| p.0).collect(),
            out,
        ))
    }

    /// Rotary position encoding over a `[T x dh]` per-head matrix; row index
    /// is the absolute position. `dh` must be even.
    pub fn rope(&mut self, a: Value, base: f32) -> Result<Value, TensorError> {
        let ta = &self.values[a.0];
        let dh = ta.cols();
        if ta.shape().len() != 2 || dh % 2 != 0 {
            return Err(TensorError::Contract {
                op: "rope",
                reason: format!("needs an even last dimension, got {:?}", ta.shape()),
            });
        }
        let out = rope_apply(ta, base, false);
        Ok(self.push(Op::Rope { base }, vec![a.0], out))
    }

    pub fn softmax_rows(&mut self, a: Value) -> Result<Value, TensorError> {
        let ta = &self.values[a.0];
        if ta.shape().len() != 2 {
            return Err(TensorError::NotAMatrix {
                op: "softmax_rows",
                shape: ta.shape().to_vec(),
            });
        }
        let out = softmax_rows_raw(ta);
        Ok(self.push(Op::SoftmaxRows, vec![a.0], out))
    }

    /// Mean cross-entropy over positions: `mean_t(-log softmax(logits)[t, target_t])`,
    /// stabilized by per-row max subtraction. Returns a scalar.
    pub fn softmax_ce(&mut self, logits: Value, targets: &[usize]) -> Result<Value, TensorError> {
        let tl = &self.values[logits.0];
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(TensorError::Contract {
                op: "softmax_ce",
                reason: format!(
                    "logits {:?} incompatible with {} targets",
                    tl.shape(),
                    targets.len()
                ),
            });
        }
        let vocab = tl.cols();
        for (position, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::TargetOutOfRange {
                    target: t,
                    vocab,
                    position,
                });
            }
        }
        let rows = tl.rows();
        let mut probs = vec![0f32; tl.numel()];
        let mut total = 0f64;
        for r in 0..rows {
            let lr = tl.row(r);
            let max = lr.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let sum: f64 = lr.iter().map(|&v| ((v as f64) - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..vocab {
                probs[r * vocab + j] = ((lr[j] as f64 - lse).exp()) as f32;
            }
            total += lse - lr[targets[r]] as f64;
        }
        let loss = Tensor::scalar((total / rows as f64) as f32);
        let probs = Tensor::from_vec(tl.shape().to_vec(), probs)?;
        Ok(self.push(
            Op::SoftmaxCe {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits.0],
            loss,
        ))
    }

    pub fn sum_all(&mut self, a: Value) -> Value {
        let ta = &self.values[a.0];
        let s: f64 = ta.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::scalar(s as f32);
        self.push(Op::SumAll, vec![a.0], out)
    }

    /// Sum of squared errors between same-shape tensors. Returns a scalar.
    pub fn sse(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.shape() != tb.shape() {
            return Err(TensorError::DimMismatch {
                op: "sse",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar(s as f32);
        Ok(self.push(Op::Sse, vec![a.0, b.0], out))
    }

    /// Mean squared error: `sse / numel`.
    pub fn mse(&mut self, a: Value, b: Value) -> Result<Value, TensorError> {
        let n = self.values[a.0].numel();
        let s = self.sse(a, b)?;
        Ok(self.scale(s, 1.0 / n as f32))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Every `requires_grad` input receives
    /// a gradient (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Value) -> Result<GradMap, TensorError> {
        let lt = &self.values[loss.0];
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);

        for node in self.nodes.iter().rev() {
            let g = match grads[node.out].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_node(node, &g, &mut grads);
        }

        let mut out = HashMap::new();
        for &leaf in &self.leaves {
            let shape = self.values[leaf].shape().to_vec();
            let data = grads[leaf]
                .take()
                .unwrap_or_else(|| vec![0.0; self.values[leaf].numel()]);
            out.insert(leaf, Tensor::from_vec(shape, data)?);
        }
        Ok(GradMap { grads: out })
    }

    fn accumulate_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Add => {
                self.accum(grads, node.inputs[0], |ga| add_reduce(ga, g));
                self.accum(grads, node.inputs[1], |gb| add_reduce(gb, g));
            }
            Op::Mul => {
                let (a, b) = (&self.values[node.inputs[0]], &self.values[node.inputs[1]]);
                let prod_a: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * b.data()[i % b.numel()])
                    .collect();
                let prod_b: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * a.data()[i % a.numel()])
                    .collect();
                self.accum(grads, node.inputs[0], |ga| add_reduce(ga, &prod_a));
                self.accum(grads, node.inputs[1], |gb| add_reduce(gb, &prod_b));
            }
            Op::Scale(c) => {
                let c = *c;
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                });
            }
            Op::Silu => {
                let x = &self.values[node.inputs[0]];
                self.accum(grads, node.inputs[0], |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i] * silu_grad_f32(x.data()[i]);
                    }
                });
            }
            Op::Gelu => {
                let x = &self.values[node.inputs[0]];
                self.accum(grads, node.inputs[0], |ga| {
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i] * gelu_grad_f32(x.data()[i]);
                    }
                });
            }
            Op::RmsNorm { eps } => {
                let x = &self.values[node.inputs[0]];
                let gain = &self.values[node.inputs[1]];
                let d = x.cols();
                let rows = x.rows();
                let mut dx = vec![0f32; x.numel()];
                let mut dgain = vec![0f64; d];
                for r in 0..rows {
                    let xr = x.row(r);
                    let gr = &g[r * d..(r + 1) * d];
                    let ms = xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (ms + *eps as f64).sqrt();
                    let mut s = 0f64;
                    for j in 0..d {
                        s += gr[j] as f64 * gain.data()[j] as f64 * xr[j] as f64;
                    }
                    let k = inv * inv * inv * s / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            ((gr[j] as f64) * (gain.data()[j] as f64) * inv - k * xr[j] as f64)
                                as f32;
                        dgain[j] += gr[j] as f64 * xr[j] as f64 * inv;
                    }
                }
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &v) in ga.iter_mut().zip(&dx) {
                        *o += v;
                    }
                });
                self.accum(grads, node.inputs[1], |gg| {
                    for (o, &v) in gg.iter_mut().zip(&dgain) {
                        *o += v as f32;
                    }
                });
            }
            Op::MatMul => {
                let (a, b) = (&self.values[node.inputs[0]], &self.values[node.inputs[1]]);
                let gt = Tensor::from_vec(
                    vec![a.shape()[0], b.shape()[1]],
                    g.to_vec(),
                )
                .expect("gradient shape matches output");
                let da = matmul_nt(&gt, b);
                let db = matmul_tn(a, &gt);
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &v) in ga.iter_mut().zip(da.data()) {
                        *o += v;
                    }
                });
                self.accum(grads, node.inputs[1], |gb| {
                    for (o, &v) in gb.iter_mut().zip(db.data()) {
                        *o += v;
                    }
                });
            }
            Op::Transpose => {
                let out_shape = self.values[node.out].shape().to_vec();
                let gt = Tensor::from_vec(out_shape, g.to_vec()).expect("grad matches output");
                let da = transpose2d(&gt);
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &v) in ga.iter_mut().zip(da.data()) {
                        *o += v;
                    }
                });
            }
            Op::Reshape { .. } => {
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols { start, in_cols } => {
                let rows = self.values[node.out].rows();
                let len = self.values[node.out].cols();
                self.accum(grads, node.inputs[0], |ga| {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * in_cols + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { widths } => {
                let total: usize = widths.iter().sum();
                let rows = self.values[node.out].rows();
                let mut offset = 0;
                for (idx, &w) in widths.iter().enumerate() {
                    let off = offset;
                    self.accum(grads, node.inputs[idx], |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Rope { base } => {
                let out_shape = self.values[node.out].shape().to_vec();
                let gt = Tensor::from_vec(out_shape, g.to_vec()).expect("grad matches output");
                let da = rope_apply(&gt, *base, true);
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &v) in ga.iter_mut().zip(da.data()) {
                        *o += v;
                    }
                });
            }
            Op::SoftmaxRows => {
                let y = &self.values[node.out];
                let (rows, cols) = (y.rows(), y.cols());
                self.accum(grads, node.inputs[0], |ga| {
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr
                            .iter()
                            .zip(gr)
                            .map(|(&yv, &gv)| yv as f64 * gv as f64)
                            .sum();
                        for j in 0..cols {
                            ga[r * cols + j] +=
                                (yr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::SoftmaxCe { targets, probs } => {
                let scale = g[0] / targets.len() as f32;
                let vocab = probs.cols();
                self.accum(grads, node.inputs[0], |ga| {
                    for (t, &tgt) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let ind = if j == tgt { 1.0 } else { 0.0 };
                            ga[t * vocab + j] += (probs.data()[t * vocab + j] - ind) * scale;
                        }
                    }
                });
            }
            Op::SumAll => {
                self.accum(grads, node.inputs[0], |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::Sse => {
                let (a, b) = (&self.values[node.inputs[0]], &self.values[node.inputs[1]]);
                let diffs: Vec<f32> = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| 2.0 * (x - y) * g[0])
                    .collect();
                self.accum(grads, node.inputs[0], |ga| {
                    for (o, &v) in ga.iter_mut().zip(&diffs) {
                        *o += v;
                    }
                });
                self.accum(grads, node.inputs[1], |gb| {
                    for (o, &v) in gb.iter_mut().zip(&diffs) {
                        *o -= v;
                    }
                });
            }
        }
    }

    fn accum<F: FnOnce(&mut Vec<f32>)>(&self, grads: &mut [Option<Vec<f32>>], id: usize, f: F) {
        if !self.needs_grad[id] {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.values[id].numel()]);
        f(slot);
    }
}

/// Adds `g` into `acc`, reducing to a scalar accumulator when the input was
/// broadcast.
fn add_reduce(acc: &mut Vec<f32>, g: &[f32]) {
    if acc.len() == g.len() {
        for (o, &v) in acc.iter_mut().zip(g) {
            *o += v;
        }
    } else {
        debug_assert_eq!(acc.len(), 1);
        acc[0] += g.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
}

fn silu_f32(x: f32) -> f32 {
    let xd = x as f64;
    (xd / (1.0 + (-xd).exp())) as f32
}

fn silu_grad_f32(x: f32) -> f32 {
    let xd = x as f64;
    let s = 1.0 / (1.0 + (-xd).exp());
    (s * (1.0 + xd * (1.0 - s))) as f32
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_f32(x: f32) -> f32 {
    let xd = x as f64;
    let u = GELU_C * (xd + 0.044715 * xd * xd * xd);
    (0.5 * xd * (1.0 + u.tanh())) as f32
}

fn gelu_grad_f32(x: f32) -> f32 {
    let xd = x as f64;
    let u = GELU_C * (xd + 0.044715 * xd * xd * xd);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xd * xd);
    (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du) as f32
}

/// `A[m x k] * B[k x n]` with f64 accumulation.
pub(crate) fn matmul_nn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0f64; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik as f64;
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv as f64;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out.into_iter().map(|v| v as f32).collect())
        .expect("matmul output shape is valid")
}

/// `A[m x k] * B^T` where `B` is `[n x k]`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut acc = 0f64;
            for kk in 0..k {
                acc += arow[kk] as f64 * brow[kk] as f64;
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::from_vec(vec![m, n], out).expect("matmul output shape is valid")
}

/// `A^T * B` where `A` is `[m x k]` and `B` is `[m x n]`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0f64; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &av) in arow.iter().enumerate() {
            let av = av as f64;
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
    }
    Tensor::from_vec(vec![k, n], out.into_iter().map(|v| v as f32).collect())
        .expect("matmul output shape is valid")
}

fn transpose2d(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out).expect("transpose output shape is valid")
}

fn softmax_rows_raw(a: &Tensor) -> Tensor {
    let (rows, cols) = (a.rows(), a.cols());
    let mut out = vec![0f32; a.numel()];
    for r in 0..rows {
        let ar = a.row(r);
        let max = ar.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = ar.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..cols {
            out[r * cols + j] = (exps[j] / sum) as f32;
        }
    }
    Tensor::from_vec(a.shape().to_vec(), out).expect("softmax preserves shape")
}

/// Rotates pairs `(i, i + dh/2)` of each row by `pos * base^(-2i/dh)`;
/// `inverse` applies the transposed rotation (used by the backward pass).
fn rope_apply(x: &Tensor, base: f32, inverse: bool) -> Tensor {
    let (rows, dh) = (x.rows(), x.cols());
    let half = dh / 2;
    let mut out = vec![0f32; x.numel()];
    for t in 0..rows {
        let xr = x.row(t);
        for i in 0..half {
            let freq = (base as f64).powf(-2.0 * i as f64 / dh as f64);
            let ang = t as f64 * freq;
            let (sin, cos) = ang.sin_cos();
            let sin = if inverse { -sin } else { sin };
            let (x0, x1) = (xr[i] as f64, xr[i + half] as f64);
            out[t * dh + i] = (x0 * cos - x1 * sin) as f32;
            out[t * dh + i + half] = (x0 * sin + x1 * cos) as f32;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("rope preserves shape")
}

#[cfg(test)]
mod tests;
