//! Recording compute tape.
//!
//! Every forward operation appends a node holding the op, its input node ids,
//! and the evaluated output. Nodes are in topological order by construction
//! (inputs always precede consumers). The same tape drives reverse-mode
//! gradients for training and serves as the activation trace consumed by the
//! relevance engine.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{layer_norm_row, matmul_into, softmax_lane};
use super::{NumericsError, Tensor};

pub type NodeId = usize;

/// Operation recorded on the tape. Weight-bearing ops reference leaf nodes
/// for their parameters; constant context (ids, masks, coefficients) is saved
/// inline so the tape replays without external state.
#[derive(Debug, Clone)]
pub enum Op {
    /// Parameter or constant; output fixed at creation.
    Leaf,
    /// Row gather from an embedding table, times `scale`.
    Embed {
        table: NodeId,
        ids: Vec<usize>,
        scale: f32,
    },
    /// `x @ w + b`, bias broadcast over rows.
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// Plain matrix product of two data nodes.
    MatMul { a: NodeId, b: NodeId },
    /// `coeff * (a @ b)` or `coeff * (a @ bᵀ)`; both sides are data
    /// (attention scores and the attention-weighted sum).
    Bilinear {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
        coeff: f32,
    },
    /// Elementwise sum of two same-shape nodes.
    Residual { a: NodeId, b: NodeId },
    /// `c * x`.
    Scale { x: NodeId, c: f32 },
    Relu { x: NodeId },
    /// Row-wise softmax over the first `allowed[r]` columns of row `r`;
    /// columns at or past the limit are exactly zero.
    Softmax { x: NodeId, allowed: Vec<usize> },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f32,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols { parts: Vec<NodeId> },
    /// Inverted dropout; `keep` is the sampled mask, scale = 1/(1-rate).
    Dropout {
        x: NodeId,
        keep: Vec<bool>,
        inv_keep: f32,
    },
    /// Mean per-token cross-entropy against label-smoothed targets (scalar).
    CrossEntropyLs {
        logits: NodeId,
        targets: Vec<usize>,
        smoothing: f32,
    },
    /// Sum over rows of log softmax(row)[id] (scalar sequence log-prob).
    GatherLogProbSum { logits: NodeId, ids: Vec<usize> },
    /// Stack scalar nodes into a vector.
    Stack1 { xs: Vec<NodeId> },
    /// Dot product with a constant weight vector (scalar).
    DotConst { x: NodeId, w: Vec<f32> },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Embed { .. } => "embed",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Bilinear { .. } => "bilinear",
            Op::Residual { .. } => "residual",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropyLs { .. } => "cross_entropy_ls",
            Op::GatherLogProbSum { .. } => "gather_log_prob_sum",
            Op::Stack1 { .. } => "stack1",
            Op::DotConst { .. } => "dot_const",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Embed { table, .. } => vec![*table],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                if let Some(b) = b {
                    v.push(*b);
                }
                v
            }
            Op::MatMul { a, b } => vec![*a, *b],
            Op::Bilinear { a, b, .. } => vec![*a, *b],
            Op::Residual { a, b } => vec![*a, *b],
            Op::Scale { x, .. } => vec![*x],
            Op::Relu { x } => vec![*x],
            Op::Softmax { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatCols { parts } => parts.clone(),
            Op::Dropout { x, .. } => vec![*x],
            Op::CrossEntropyLs { logits, .. } => vec![*logits],
            Op::GatherLogProbSum { logits, .. } => vec![*logits],
            Op::Stack1 { xs } => xs.clone(),
            Op::DotConst { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub out: Arc<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ComputeTape {
    nodes: Vec<Node>,
}

impl ComputeTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].out
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Adds a parameter/constant leaf. Shared `Arc` keeps large tables cheap.
    pub fn leaf(&mut self, t: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            out: t,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(Arc::new(t))
    }

    /// Evaluates `op` against the current nodes and records the result.
    pub fn push(&mut self, op: Op) -> Result<NodeId, NumericsError> {
        let out = eval_op(&self.nodes, &op)?;
        out.check_finite(op.name())?;
        self.nodes.push(Node {
            op,
            out: Arc::new(out),
        });
        Ok(self.nodes.len() - 1)
    }

    /// Re-executes every non-leaf node and checks each stored output is
    /// reproduced bit-exactly.
    pub fn replay_is_bit_identical(&self) -> Result<bool, NumericsError> {
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let fresh = eval_op(&self.nodes, &node.op)?;
            if fresh.dims() != node.out.dims() {
                return Ok(false);
            }
            let same = fresh
                .data()
                .iter()
                .zip(node.out.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                let _ = id;
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn out_of(nodes: &[Node], id: NodeId) -> &Tensor {
    &nodes[id].out
}

fn shape_err(op: &'static str, l: &Tensor, r: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: l.dims().to_vec(),
        right: r.dims().to_vec(),
    }
}

/// Forward evaluation shared by `push` and replay.
pub(crate) fn eval_op(nodes: &[Node], op: &Op) -> Result<Tensor, NumericsError> {
    match op {
        Op::Leaf => Err(NumericsError::BadNode {
            node: nodes.len(),
            what: "leaf nodes are created via ComputeTape::leaf".into(),
        }),
        Op::Embed { table, ids, scale } => {
            let t = out_of(nodes, *table);
            let d = t.cols();
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= t.rows() {
                    return Err(NumericsError::BadNode {
                        node: *table,
                        what: format!("embedding id {id} out of range {}", t.rows()),
                    });
                }
                data.extend(t.row(id).iter().map(|v| v * scale));
            }
            Tensor::new(vec![ids.len(), d], data)
        }
        Op::Linear { x, w, b } => {
            let (x, w) = (out_of(nodes, *x), out_of(nodes, *w));
            if x.cols() != w.rows() {
                return Err(shape_err("linear", x, w));
            }
            let (m, k, n) = (x.rows(), x.cols(), w.cols());
            let mut data = vec![0.0f32; m * n];
            if let Some(b) = b {
                let b = out_of(nodes, *b);
                if b.numel() != n {
                    return Err(shape_err("linear", w, b));
                }
                for r in 0..m {
                    data[r * n..(r + 1) * n].copy_from_slice(b.data());
                }
            }
            matmul_into(x.data(), w.data(), &mut data, m, k, n);
            Tensor::new(vec![m, n], data)
        }
        Op::MatMul { a, b } => {
            let (a, b) = (out_of(nodes, *a), out_of(nodes, *b));
            if a.cols() != b.rows() {
                return Err(shape_err("matmul", a, b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut data = vec![0.0f32; m * n];
            matmul_into(a.data(), b.data(), &mut data, m, k, n);
            Tensor::new(vec![m, n], data)
        }
        Op::Bilinear {
            a,
            b,
            transpose_b,
            coeff,
        } => {
            let (a, b) = (out_of(nodes, *a), out_of(nodes, *b));
            let (m, k) = (a.rows(), a.cols());
            let n = if *transpose_b { b.rows() } else { b.cols() };
            let k_b = if *transpose_b { b.cols() } else { b.rows() };
            if k != k_b {
                return Err(shape_err("bilinear", a, b));
            }
            let mut data = vec![0.0f32; m * n];
            if *transpose_b {
                for i in 0..m {
                    let arow = a.row(i);
                    for j in 0..n {
                        let brow = b.row(j);
                        let mut acc = 0.0f32;
                        for d in 0..k {
                            acc += arow[d] * brow[d];
                        }
                        data[i * n + j] = acc * coeff;
                    }
                }
            } else {
                matmul_into(a.data(), b.data(), &mut data, m, k, n);
                for v in &mut data {
                    *v *= coeff;
                }
            }
            Tensor::new(vec![m, n], data)
        }
        Op::Residual { a, b } => {
            let (a, b) = (out_of(nodes, *a), out_of(nodes, *b));
            if a.dims() != b.dims() {
                return Err(shape_err("residual", a, b));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(a.dims().to_vec(), data)
        }
        Op::Scale { x, c } => {
            let x = out_of(nodes, *x);
            Tensor::new(x.dims().to_vec(), x.data().iter().map(|v| v * c).collect())
        }
        Op::Relu { x } => {
            let x = out_of(nodes, *x);
            Tensor::new(
                x.dims().to_vec(),
                x.data().iter().map(|v| v.max(0.0)).collect(),
            )
        }
        Op::Softmax { x, allowed } => {
            let x = out_of(nodes, *x);
            let (rows, cols) = (x.rows(), x.cols());
            if allowed.len() != rows || allowed.iter().any(|&m| m == 0 || m > cols) {
                return Err(NumericsError::BadNode {
                    node: 0,
                    what: format!("softmax allowed-lengths invalid for {rows}x{cols}"),
                });
            }
            let mut data = vec![0.0f32; x.numel()];
            for r in 0..rows {
                softmax_lane(x.data(), &mut data, r * cols, allowed[r], 1);
            }
            Tensor::new(x.dims().to_vec(), data)
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (x, gain, bias) = (out_of(nodes, *x), out_of(nodes, *gain), out_of(nodes, *bias));
            let width = x.cols();
            if gain.numel() != width || bias.numel() != width {
                return Err(shape_err("layer_norm", x, gain));
            }
            let rows = x.numel() / width;
            let mut data = vec![0.0f32; x.numel()];
            for r in 0..rows {
                layer_norm_row(
                    &x.data()[r * width..(r + 1) * width],
                    gain.data(),
                    bias.data(),
                    *eps,
                    &mut data[r * width..(r + 1) * width],
                );
            }
            Tensor::new(x.dims().to_vec(), data)
        }
        Op::SliceCols { x, start, len } => {
            let x_id = *x;
            let x = out_of(nodes, x_id);
            let (rows, cols) = (x.rows(), x.cols());
            if start + len > cols {
                return Err(NumericsError::BadNode {
                    node: x_id,
                    what: format!("slice [{start}, {}) exceeds {cols} cols", start + len),
                });
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&x.row(r)[*start..start + len]);
            }
            Tensor::new(vec![rows, *len], data)
        }
        Op::ConcatCols { parts } => {
            let tensors: Vec<&Tensor> = parts.iter().map(|&p| out_of(nodes, p)).collect();
            let rows = tensors[0].rows();
            if tensors.iter().any(|t| t.rows() != rows) {
                return Err(shape_err("concat_cols", tensors[0], tensors[1]));
            }
            let total: usize = tensors.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in &tensors {
                    data.extend_from_slice(t.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)
        }
        Op::Dropout { x, keep, inv_keep } => {
            let x_id = *x;
            let x = out_of(nodes, x_id);
            if keep.len() != x.numel() {
                return Err(NumericsError::BadNode {
                    node: x_id,
                    what: "dropout mask length mismatch".into(),
                });
            }
            let data = x
                .data()
                .iter()
                .zip(keep)
                .map(|(v, &k)| if k { v * inv_keep } else { 0.0 })
                .collect();
            Tensor::new(x.dims().to_vec(), data)
        }
        Op::CrossEntropyLs {
            logits,
            targets,
            smoothing,
        } => {
            let logits_id = *logits;
            let logits = out_of(nodes, logits_id);
            let (rows, vocab) = (logits.rows(), logits.cols());
            if targets.len() != rows {
                return Err(NumericsError::BadNode {
                    node: logits_id,
                    what: "target length != logit rows".into(),
                });
            }
            let eps = f64::from(*smoothing);
            let mut total = 0.0f64;
            for (r, &gold) in targets.iter().enumerate() {
                let row = logits.row(r);
                let (lse, _max) = log_sum_exp(row);
                let mut sum_logp = 0.0f64;
                for &v in row {
                    sum_logp += f64::from(v) - lse;
                }
                let logp_gold = f64::from(row[gold]) - lse;
                total += -((1.0 - eps) * logp_gold + eps / vocab as f64 * sum_logp);
            }
            Ok(Tensor::scalar((total / rows as f64) as f32))
        }
        Op::GatherLogProbSum { logits, ids } => {
            let logits_id = *logits;
            let logits = out_of(nodes, logits_id);
            if ids.len() != logits.rows() {
                return Err(NumericsError::BadNode {
                    node: logits_id,
                    what: "id length != logit rows".into(),
                });
            }
            let mut total = 0.0f64;
            for (r, &id) in ids.iter().enumerate() {
                let row = logits.row(r);
                let (lse, _max) = log_sum_exp(row);
                total += f64::from(row[id]) - lse;
            }
            Ok(Tensor::scalar(total as f32))
        }
        Op::Stack1 { xs } => {
            let mut data = Vec::with_capacity(xs.len());
            for &id in xs {
                let t = out_of(nodes, id);
                if t.numel() != 1 {
                    return Err(NumericsError::BadNode {
                        node: id,
                        what: "stack1 input is not scalar".into(),
                    });
                }
                data.push(t.data()[0]);
            }
            Tensor::new(vec![data.len()], data)
        }
        Op::DotConst { x, w } => {
            let x_id = *x;
            let x = out_of(nodes, x_id);
            if x.numel() != w.len() {
                return Err(NumericsError::BadNode {
                    node: x_id,
                    what: "dot_const length mismatch".into(),
                });
            }
            let mut acc = 0.0f64;
            for (a, b) in x.data().iter().zip(w) {
                acc += f64::from(*a) * f64::from(*b);
            }
            Ok(Tensor::scalar(acc as f32))
        }
    }
}

fn log_sum_exp(row: &[f32]) -> (f64, f32) {
    let mut max = f32::NEG_INFINITY;
    for &v in row {
        max = max.max(v);
    }
    let mut acc = 0.0f64;
    for &v in row {
        acc += f64::from(v - max).exp();
    }
    (f64::from(max) + acc.ln(), max)
}

/// Reverse-mode gradients of a scalar loss node with respect to every node
/// that influences it. Accumulation order is the fixed reverse tape order, so
/// results are deterministic.
pub fn backward(
    tape: &ComputeTape,
    loss: NodeId,
) -> Result<BTreeMap<NodeId, Tensor>, NumericsError> {
    let nodes = tape.nodes();
    let loss_out = out_of(nodes, loss);
    if loss_out.numel() != 1 {
        return Err(NumericsError::NonScalarLoss {
            numel: loss_out.numel(),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
    grads[loss] = Some(Tensor::scalar(1.0));

    for id in (0..=loss).rev() {
        let Some(g) = grads[id].take() else { continue };
        backprop_node(nodes, id, &g, &mut grads)?;
        grads[id] = Some(g);
    }

    let mut out = BTreeMap::new();
    for (id, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            out.insert(id, g);
        }
    }
    Ok(out)
}

fn acc_grad(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: NodeId,
    update: impl FnOnce(&mut [f32]),
) {
    let slot = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].out.dims().to_vec()));
    update(slot.data_mut());
}

fn backprop_node(
    nodes: &[Node],
    id: NodeId,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<(), NumericsError> {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Embed { table, ids, scale } => {
            let d = nodes[id].out.cols();
            acc_grad(nodes, grads, *table, |dt| {
                for (p, &tok) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[tok * d + c] += scale * g.data()[p * d + c];
                    }
                }
            });
        }
        Op::Linear { x, w, b } => {
            let (xt, wt) = (out_of(nodes, *x), out_of(nodes, *w));
            let (m, k, n) = (xt.rows(), xt.cols(), wt.cols());
            let (xd, wd) = (xt.data().to_vec(), wt.data().to_vec());
            acc_grad(nodes, grads, *x, |dx| {
                // dx = g @ wᵀ, as row dot products to stay contiguous.
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let wrow = &wd[kk * n..(kk + 1) * n];
                        let mut acc = 0.0f32;
                        for j in 0..n {
                            acc += grow[j] * wrow[j];
                        }
                        dx[i * k + kk] += acc;
                    }
                }
            });
            acc_grad(nodes, grads, *w, |dw| {
                // dw = xᵀ @ g
                for i in 0..m {
                    let grow = &g.data()[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let xik = xd[i * k + kk];
                        let drow = &mut dw[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            drow[j] += xik * grow[j];
                        }
                    }
                }
            });
            if let Some(b) = b {
                acc_grad(nodes, grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j];
                        }
                    }
                });
            }
        }
        Op::MatMul { a, b } => {
            backprop_product(nodes, grads, *a, *b, false, 1.0, g);
        }
        Op::Bilinear {
            a,
            b,
            transpose_b,
            coeff,
        } => {
            backprop_product(nodes, grads, *a, *b, *transpose_b, *coeff, g);
        }
        Op::Residual { a, b } => {
            acc_grad(nodes, grads, *a, |da| {
                for (d, gv) in da.iter_mut().zip(g.data()) {
                    *d += gv;
                }
            });
            acc_grad(nodes, grads, *b, |db| {
                for (d, gv) in db.iter_mut().zip(g.data()) {
                    *d += gv;
                }
            });
        }
        Op::Scale { x, c } => {
            acc_grad(nodes, grads, *x, |dx| {
                for (d, gv) in dx.iter_mut().zip(g.data()) {
                    *d += c * gv;
                }
            });
        }
        Op::Relu { x } => {
            let xt = out_of(nodes, *x).data().to_vec();
            acc_grad(nodes, grads, *x, |dx| {
                for i in 0..xt.len() {
                    if xt[i] > 0.0 {
                        dx[i] += g.data()[i];
                    }
                }
            });
        }
        Op::Softmax { x, allowed } => {
            let s = &nodes[id].out;
            let cols = s.cols();
            let sd = s.data().to_vec();
            acc_grad(nodes, grads, *x, |dx| {
                for (r, &m) in allowed.iter().enumerate() {
                    let mut dot = 0.0f64;
                    for c in 0..m {
                        dot += f64::from(g.data()[r * cols + c]) * f64::from(sd[r * cols + c]);
                    }
                    for c in 0..m {
                        let si = f64::from(sd[r * cols + c]);
                        dx[r * cols + c] +=
                            (si * (f64::from(g.data()[r * cols + c]) - dot)) as f32;
                    }
                }
            });
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xt = out_of(nodes, *x);
            let gaint = out_of(nodes, *gain).data().to_vec();
            let width = xt.cols();
            let rows = xt.numel() / width;
            let xd = xt.data().to_vec();
            // Precompute per-row normalized values and inverse stddev in f64.
            let mut ys = vec![0.0f64; xd.len()];
            let mut invs = vec![0.0f64; rows];
            for r in 0..rows {
                let row = &xd[r * width..(r + 1) * width];
                let n = width as f64;
                let mut mean = 0.0f64;
                for &v in row {
                    mean += f64::from(v);
                }
                mean /= n;
                let mut var = 0.0f64;
                for &v in row {
                    let d = f64::from(v) - mean;
                    var += d * d;
                }
                var /= n;
                let inv = 1.0 / (var + f64::from(*eps)).sqrt();
                invs[r] = inv;
                for i in 0..width {
                    ys[r * width + i] = (f64::from(row[i]) - mean) * inv;
                }
            }
            acc_grad(nodes, grads, *x, |dx| {
                for r in 0..rows {
                    let n = width as f64;
                    let mut m1 = 0.0f64;
                    let mut m2 = 0.0f64;
                    for i in 0..width {
                        let gy = f64::from(g.data()[r * width + i]) * f64::from(gaint[i]);
                        m1 += gy;
                        m2 += gy * ys[r * width + i];
                    }
                    m1 /= n;
                    m2 /= n;
                    for i in 0..width {
                        let gy = f64::from(g.data()[r * width + i]) * f64::from(gaint[i]);
                        dx[r * width + i] +=
                            (invs[r] * (gy - m1 - ys[r * width + i] * m2)) as f32;
                    }
                }
            });
            acc_grad(nodes, grads, *gain, |dg| {
                for r in 0..rows {
                    for i in 0..width {
                        dg[i] += g.data()[r * width + i] * ys[r * width + i] as f32;
                    }
                }
            });
            acc_grad(nodes, grads, *bias, |db| {
                for r in 0..rows {
                    for i in 0..width {
                        db[i] += g.data()[r * width + i];
                    }
                }
            });
        }
        Op::SliceCols { x, start, len } => {
            let cols = out_of(nodes, *x).cols();
            let rows = out_of(nodes, *x).rows();
            acc_grad(nodes, grads, *x, |dx| {
                for r in 0..rows {
                    for c in 0..*len {
                        dx[r * cols + start + c] += g.data()[r * len + c];
                    }
                }
            });
        }
        Op::ConcatCols { parts } => {
            let rows = nodes[id].out.rows();
            let total = nodes[id].out.cols();
            let mut offset = 0usize;
            for &p in parts {
                let w = out_of(nodes, p).cols();
                let off = offset;
                acc_grad(nodes, grads, p, |dp| {
                    for r in 0..rows {
                        for c in 0..w {
                            dp[r * w + c] += g.data()[r * total + off + c];
                        }
                    }
                });
                offset += w;
            }
        }
        Op::Dropout { x, keep, inv_keep } => {
            acc_grad(nodes, grads, *x, |dx| {
                for i in 0..keep.len() {
                    if keep[i] {
                        dx[i] += g.data()[i] * inv_keep;
                    }
                }
            });
        }
        Op::CrossEntropyLs {
            logits,
            targets,
            smoothing,
        } => {
            let lt = out_of(nodes, *logits);
            let (rows, vocab) = (lt.rows(), lt.cols());
            let gs = f64::from(g.data()[0]) / rows as f64;
            let eps = f64::from(*smoothing);
            let ld = lt.data().to_vec();
            acc_grad(nodes, grads, *logits, |dl| {
                for (r, &gold) in targets.iter().enumerate() {
                    let row = &ld[r * vocab..(r + 1) * vocab];
                    let (lse, _) = log_sum_exp(row);
                    for v in 0..vocab {
                        let p = (f64::from(row[v]) - lse).exp();
                        let q = if v == gold { 1.0 - eps } else { 0.0 } + eps / vocab as f64;
                        dl[r * vocab + v] += ((p - q) * gs) as f32;
                    }
                }
            });
        }
        Op::GatherLogProbSum { logits, ids } => {
            let lt = out_of(nodes, *logits);
            let (rows, vocab) = (lt.rows(), lt.cols());
            let gs = f64::from(g.data()[0]);
            let ld = lt.data().to_vec();
            acc_grad(nodes, grads, *logits, |dl| {
                for r in 0..rows {
                    let row = &ld[r * vocab..(r + 1) * vocab];
                    let (lse, _) = log_sum_exp(row);
                    for v in 0..vocab {
                        let p = (f64::from(row[v]) - lse).exp();
                        let ind = if v == ids[r] { 1.0 } else { 0.0 };
                        dl[r * vocab + v] += ((ind - p) * gs) as f32;
                    }
                }
            });
        }
        Op::Stack1 { xs } => {
            for (k, &xid) in xs.iter().enumerate() {
                acc_grad(nodes, grads, xid, |dx| {
                    dx[0] += g.data()[k];
                });
            }
        }
        Op::DotConst { x, w } => {
            let gs = g.data()[0];
            acc_grad(nodes, grads, *x, |dx| {
                for (d, wv) in dx.iter_mut().zip(w) {
                    *d += wv * gs;
                }
            });
        }
    }
    Ok(())
}

/// Shared product backward for MatMul / Bilinear.
fn backprop_product(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    a: NodeId,
    b: NodeId,
    transpose_b: bool,
    coeff: f32,
    g: &Tensor,
) {
    let at = out_of(nodes, a);
    let bt = out_of(nodes, b);
    let (m, k) = (at.rows(), at.cols());
    let n = if transpose_b { bt.rows() } else { bt.cols() };
    let ad = at.data().to_vec();
    let bd = bt.data().to_vec();
    if transpose_b {
        // out[i,j] = coeff * Σ_d a[i,d] b[j,d]
        acc_grad(nodes, grads, a, |da| {
            for i in 0..m {
                for j in 0..n {
                    let gij = coeff * g.data()[i * n + j];
                    for d in 0..k {
                        da[i * k + d] += gij * bd[j * k + d];
                    }
                }
            }
        });
        acc_grad(nodes, grads, b, |db| {
            for i in 0..m {
                for j in 0..n {
                    let gij = coeff * g.data()[i * n + j];
                    for d in 0..k {
                        db[j * k + d] += gij * ad[i * k + d];
                    }
                }
            }
        });
    } else {
        // out = coeff * a @ b
        acc_grad(nodes, grads, a, |da| {
            // da = coeff * g @ bᵀ, row dot products.
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                for kk in 0..k {
                    let brow = &bd[kk * n..(kk + 1) * n];
                    let mut acc = 0.0f32;
                    for j in 0..n {
                        acc += grow[j] * brow[j];
                    }
                    da[i * k + kk] += coeff * acc;
                }
            }
        });
        acc_grad(nodes, grads, b, |db| {
            for i in 0..m {
                let grow = &g.data()[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = coeff * ad[i * k + kk];
                    let drow = &mut db[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        drow[j] += aik * grow[j];
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    #[test]
    fn sum_loss_gives_ones() {
        let mut tape = ComputeTape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![2.0, -1.0, 5.0]).unwrap());
        let loss = tape
            .push(Op::DotConst {
                x,
                w: vec![1.0, 1.0, 1.0],
            })
            .unwrap();
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads[&x].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_product_gradient_matches_hand_value() {
        // loss = (w * x)^2 with w = 2, x = 3; d loss / d w = 2 * 6 * 3 = 36.
        let mut tape = ComputeTape::new();
        let w = tape.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let wx = tape.push(Op::MatMul { a: w, b: x }).unwrap();
        let loss = tape
            .push(Op::Bilinear {
                a: wx,
                b: wx,
                transpose_b: false,
                coeff: 1.0,
            })
            .unwrap();
        assert_eq!(tape.output(loss).data(), &[36.0]);
        let grads = backward(&tape, loss).unwrap();
        assert_eq!(grads[&w].data(), &[36.0]);
        assert_eq!(grads[&x].data(), &[24.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = ComputeTape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let err = backward(&tape, x).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss { numel: 2 }));
    }

    #[test]
    fn masked_softmax_has_exact_zeros() {
        let mut tape = ComputeTape::new();
        let x = tape.constant(Tensor::new(vec![3, 3], vec![1.0; 9]).unwrap());
        let s = tape
            .push(Op::Softmax {
                x,
                allowed: vec![1, 2, 3],
            })
            .unwrap();
        let out = tape.output(s);
        assert_eq!(out.at(0, 1), 0.0);
        assert_eq!(out.at(0, 2), 0.0);
        assert_eq!(out.at(1, 2), 0.0);
        assert!((out.at(0, 0) - 1.0).abs() < 1e-7);
        assert!((out.at(1, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn replay_reproduces_outputs_bit_exactly() {
        let mut rng = SeededRng::new(11);
        let mut tape = ComputeTape::new();
        let data: Vec<f32> = (0..12).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let wdata: Vec<f32> = (0..20).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        let w = tape.constant(Tensor::new(vec![4, 5], wdata).unwrap());
        let h = tape.push(Op::Linear { x, w, b: None }).unwrap();
        let r = tape.push(Op::Relu { x: h }).unwrap();
        let _s = tape
            .push(Op::Softmax {
                x: r,
                allowed: vec![5, 5, 5],
            })
            .unwrap();
        assert!(tape.replay_is_bit_identical().unwrap());
    }

    /// Coarse finite-difference check over the training-only ops that the
    /// model-level f64 oracle does not cover (scale, stack, dot, log-prob).
    #[test]
    fn mrt_style_graph_passes_finite_difference_check() {
        let mut rng = SeededRng::new(5);
        let build = |vals: &[f32]| -> (ComputeTape, NodeId, NodeId) {
            let mut tape = ComputeTape::new();
            let logits = tape.constant(Tensor::new(vec![3, 4], vals.to_vec()).unwrap());
            let lp1 = tape
                .push(Op::GatherLogProbSum {
                    logits,
                    ids: vec![0, 1, 2],
                })
                .unwrap();
            let lp2 = tape
                .push(Op::GatherLogProbSum {
                    logits,
                    ids: vec![3, 3, 3],
                })
                .unwrap();
            let stacked = tape.push(Op::Stack1 { xs: vec![lp1, lp2] }).unwrap();
            let scaled = tape.push(Op::Scale { x: stacked, c: 0.7 }).unwrap();
            let probs = tape
                .push(Op::Softmax {
                    x: scaled,
                    allowed: vec![2],
                })
                .unwrap();
            let loss = tape
                .push(Op::DotConst {
                    x: probs,
                    w: vec![-0.3, -0.9],
                })
                .unwrap();
            (tape, logits, loss)
        };
        let vals: Vec<f32> = (0..12).map(|_| rng.uniform_f32(-1.0, 1.0)).collect();
        let (tape, logits, loss) = build(&vals);
        let grads = backward(&tape, loss).unwrap();
        let analytic = grads[&logits].clone();
        let h = 1e-2f32;
        for i in 0..vals.len() {
            let mut plus = vals.clone();
            plus[i] += h;
            let mut minus = vals.clone();
            minus[i] -= h;
            let (tp, _, lp) = build(&plus);
            let (tm, _, lm) = build(&minus);
            let fd =
                (f64::from(tp.output(lp).data()[0]) - f64::from(tm.output(lm).data()[0]))
                    / (2.0 * f64::from(h));
            let got = f64::from(analytic.data()[i]);
            assert!(
                (got - fd).abs() < 2e-3,
                "component {i}: analytic {got}, fd {fd}"
            );
        }
    }
}
