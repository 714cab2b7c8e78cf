//! Relevance propagation from a chosen output logit back through decoder and
//! encoder onto every input token.
//!
//! Three message rules cover the whole trace:
//!
//! * linear layers: the alpha/beta rule, splitting each output's relevance
//!   over positive and negative pre-activation contributions, with the bias
//!   share absorbed;
//! * softmax, layer norm and residual connections: a first-order Taylor
//!   decomposition around the zero vector, whose terms then go through the
//!   same positive/negative split;
//! * the two bilinear attention products (scores = Q·Kᵀ and the weighted sum
//!   of values): per-term split, each term's message divided between its two
//!   factors.
//!
//! All message math runs in f64 over the recorded f32 activations. Positive
//! scaling factors (1/sqrt(d_k), the embedding scale) cancel inside the
//! ratios, so they never appear in message computations.
//!
//! Total relevance is conserved: per node, messages plus absorbed mass equal
//! the incoming relevance. Token relevance is the sum over that token's
//! embedding-row neurons (positional-encoding addends included); the final
//! record is renormalized to sum to one with the absorbed fraction reported.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ActivationTrace;
use crate::numerics::{ComputeTape, NodeId, Op};

#[derive(Debug, Error)]
pub enum LrpError {
    #[error("invalid lrp config: {0}")]
    Config(String),
    #[error("node {node} ({op}) is not supported in relevance propagation")]
    UnsupportedNode { node: NodeId, op: &'static str },
    #[error("trace incomplete: {role} points at node {node}, tape has {len}")]
    Incomplete {
        role: &'static str,
        node: NodeId,
        len: usize,
    },
    #[error("step {step} outside 1..={steps}")]
    BadStep { step: usize, steps: usize },
    #[error("degenerate record: token relevance mass {mass:e} below guard")]
    DegenerateMass { mass: f64 },
}

/// Which logit the relevance is computed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogitChoice {
    /// The model's top-1 logit at the step (ties to the lowest id).
    Top1,
    /// A fixed vocabulary index, for counterfactual probing.
    Index(usize),
}

/// How the bilinear attention products split each term's message between the
/// two factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BilinearRule {
    /// Symmetric 50/50 split; lets relevance reach queries and keys through
    /// the softmax node. The default.
    HalfSplit,
    /// Attention weights treated as constants: the full message goes to the
    /// value-side factor. Config experiment, not the default.
    ValuesOnly,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrpConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Guard for vanishing denominators; a guarded term contributes zero.
    pub denom_eps: f64,
    pub logit_choice: LogitChoice,
    pub bilinear_rule: BilinearRule,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            alpha: 1.0,
            beta: 0.0,
            denom_eps: 1e-12,
            logit_choice: LogitChoice::Top1,
            bilinear_rule: BilinearRule::HalfSplit,
        }
    }
}

impl LrpConfig {
    pub fn with_alpha_beta(alpha: f64, beta: f64) -> Result<Self, LrpError> {
        let cfg = LrpConfig {
            alpha,
            beta,
            ..LrpConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LrpError> {
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(LrpError::Config(format!(
                "alpha + beta must equal 1, got {} + {}",
                self.alpha, self.beta
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(LrpError::Config(
                "alpha and beta must be non-negative".into(),
            ));
        }
        if self.denom_eps <= 0.0 {
            return Err(LrpError::Config("denom_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Positive/negative split of one output neuron's term list. Emits each
/// term's message and returns the absorbed mass (bias share plus guarded
/// branches).
fn alpha_beta_split(
    terms: &[f64],
    bias: f64,
    rel: f64,
    cfg: &LrpConfig,
    mut emit: impl FnMut(usize, f64),
) -> f64 {
    if rel == 0.0 {
        return 0.0;
    }
    let mut zp = bias.max(0.0);
    let mut zn = bias.min(0.0);
    for &z in terms {
        if z > 0.0 {
            zp += z;
        } else {
            zn += z;
        }
    }
    let mut absorbed = 0.0;
    if cfg.alpha != 0.0 {
        if zp > cfg.denom_eps {
            for (i, &z) in terms.iter().enumerate() {
                if z > 0.0 {
                    emit(i, rel * cfg.alpha * z / zp);
                }
            }
            absorbed += rel * cfg.alpha * bias.max(0.0) / zp;
        } else {
            absorbed += rel * cfg.alpha;
        }
    }
    if cfg.beta != 0.0 {
        if zn < -cfg.denom_eps {
            for (i, &z) in terms.iter().enumerate() {
                if z < 0.0 {
                    emit(i, rel * cfg.beta * z / zn);
                }
            }
            absorbed += rel * cfg.beta * bias.min(0.0) / zn;
        } else {
            absorbed += rel * cfg.beta;
        }
    }
    absorbed
}

#[derive(Debug, Clone)]
pub struct LinearMessages {
    pub input: Vec<f64>,
    pub absorbed: f64,
}

/// Alpha/beta messages through `out = x @ w + bias` for one input vector.
/// `w` is row-major `[x.len(), out_rel.len()]`.
pub fn lrp_linear_message(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out_rel: &[f64],
    cfg: &LrpConfig,
) -> LinearMessages {
    let (n_in, n_out) = (x.len(), out_rel.len());
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut input = vec![0.0f64; n_in];
    let mut absorbed = 0.0f64;
    let mut terms = vec![0.0f64; n_in];
    for j in 0..n_out {
        let rel = out_rel[j];
        if rel == 0.0 {
            continue;
        }
        for i in 0..n_in {
            terms[i] = x[i] * w[i * n_out + j];
        }
        let b = bias.map_or(0.0, |b| b[j]);
        absorbed += alpha_beta_split(&terms, b, rel, cfg, |i, m| input[i] += m);
    }
    LinearMessages { input, absorbed }
}

/// Inputs for the Taylor-decomposition rule.
#[derive(Debug)]
pub enum TaylorInputs<'a> {
    /// `out = a + b`, elementwise.
    Residual { a: &'a [f64], b: &'a [f64] },
    /// One softmax row: raw inputs and the recorded probabilities.
    Softmax { inputs: &'a [f64], probs: &'a [f64] },
    /// One layer-norm row.
    LayerNorm {
        x: &'a [f64],
        gain: &'a [f64],
        bias: &'a [f64],
        eps: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TaylorMessages {
    /// One relevance vector per input operand (two for residual, one
    /// otherwise).
    pub parts: Vec<Vec<f64>>,
    pub absorbed: f64,
}

/// First-order Taylor decomposition at the zero anchor:
/// `z_ij = f_j(0)/n + (∂f_j/∂x_i)(x) · x_i`, fed through the alpha/beta split.
/// Jacobians are analytic.
pub fn lrp_taylor_message(node: TaylorInputs<'_>, out_rel: &[f64], cfg: &LrpConfig) -> TaylorMessages {
    match node {
        TaylorInputs::Residual { a, b } => {
            // f_j(0) = 0 and unit derivatives: terms are the addends.
            let n = a.len();
            let mut ra = vec![0.0f64; n];
            let mut rb = vec![0.0f64; n];
            let mut absorbed = 0.0f64;
            for j in 0..n {
                let terms = [a[j], b[j]];
                absorbed += alpha_beta_split(&terms, 0.0, out_rel[j], cfg, |i, m| {
                    if i == 0 {
                        ra[j] += m;
                    } else {
                        rb[j] += m;
                    }
                });
            }
            TaylorMessages {
                parts: vec![ra, rb],
                absorbed,
            }
        }
        TaylorInputs::Softmax { inputs, probs } => {
            let n = inputs.len();
            let nf = n as f64;
            let zero_order = 1.0 / (nf * nf); // f_j(0)/n with f_j(0) = 1/n
            let mut rin = vec![0.0f64; n];
            let mut absorbed = 0.0f64;
            let mut terms = vec![0.0f64; n];
            for j in 0..n {
                let rel = out_rel[j];
                if rel == 0.0 {
                    continue;
                }
                for i in 0..n {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    let jac = probs[j] * (delta - probs[i]);
                    terms[i] = zero_order + jac * inputs[i];
                }
                absorbed += alpha_beta_split(&terms, 0.0, rel, cfg, |i, m| rin[i] += m);
            }
            TaylorMessages {
                parts: vec![rin],
                absorbed,
            }
        }
        TaylorInputs::LayerNorm { x, gain, bias, eps } => {
            let n = x.len();
            let nf = n as f64;
            let mut mean = 0.0f64;
            for &v in x {
                mean += v;
            }
            mean /= nf;
            let mut var = 0.0f64;
            for &v in x {
                let d = v - mean;
                var += d * d;
            }
            var /= nf;
            let inv = 1.0 / (var + eps).sqrt();
            let ys: Vec<f64> = x.iter().map(|&v| (v - mean) * inv).collect();
            let mut rin = vec![0.0f64; n];
            let mut absorbed = 0.0f64;
            let mut terms = vec![0.0f64; n];
            for j in 0..n {
                let rel = out_rel[j];
                if rel == 0.0 {
                    continue;
                }
                // f_j(0) = bias_j; J_ji = gain_j/s * (delta_ij - 1/n - y_i y_j / n).
                for i in 0..n {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    let jac = gain[j] * inv * (delta - 1.0 / nf - ys[i] * ys[j] / nf);
                    terms[i] = bias[j] / nf + jac * x[i];
                }
                absorbed += alpha_beta_split(&terms, 0.0, rel, cfg, |i, m| rin[i] += m);
            }
            TaylorMessages {
                parts: vec![rin],
                absorbed,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BilinearMessages {
    /// Relevance onto the weight-side factor (one entry per key).
    pub weights: Vec<f64>,
    /// Relevance onto the value-side factor, row-major `[k, d]`.
    pub values: Vec<f64>,
    pub absorbed: f64,
}

/// Messages through one output row of the bilinear product
/// `out_j = Σ_k a_k · v_kj` (attention-weighted sum, and with `v = Kᵀ` the
/// attention scores). Each term's message is split between the two factors
/// according to the configured rule.
pub fn lrp_bilinear_message(
    a: &[f64],
    values: &[f64],
    out_rel: &[f64],
    cfg: &LrpConfig,
) -> BilinearMessages {
    let k = a.len();
    let n_out = out_rel.len();
    debug_assert_eq!(values.len(), k * n_out);
    let (wa, wv) = match cfg.bilinear_rule {
        BilinearRule::HalfSplit => (0.5, 0.5),
        BilinearRule::ValuesOnly => (0.0, 1.0),
    };
    let mut weights = vec![0.0f64; k];
    let mut vals = vec![0.0f64; k * n_out];
    let mut absorbed = 0.0f64;
    let mut terms = vec![0.0f64; k];
    for j in 0..n_out {
        let rel = out_rel[j];
        if rel == 0.0 {
            continue;
        }
        for i in 0..k {
            terms[i] = a[i] * values[i * n_out + j];
        }
        absorbed += alpha_beta_split(&terms, 0.0, rel, cfg, |i, m| {
            weights[i] += wa * m;
            vals[i * n_out + j] += wv * m;
        });
    }
    BilinearMessages {
        weights,
        values: vals,
        absorbed,
    }
}

/// Per-node conservation record: incoming relevance, outgoing messages,
/// absorbed mass, and (when an encoder boundary is given) the share sent to
/// encoder-side nodes.
#[derive(Debug, Clone, Copy)]
pub struct NodeAudit {
    pub node: NodeId,
    pub incoming: f64,
    pub outgoing: f64,
    pub absorbed: f64,
    pub to_encoder: f64,
}

/// Result of a raw tape walk.
#[derive(Debug)]
pub struct Propagation {
    /// Final relevance buffer per node (seeded, accumulated, and retained
    /// after processing).
    pub relevance: Vec<Option<Vec<f64>>>,
    pub audits: Vec<NodeAudit>,
}

impl Propagation {
    pub fn node_total(&self, id: NodeId) -> f64 {
        self.relevance[id]
            .as_ref()
            .map_or(0.0, |r| r.iter().sum())
    }
}

/// Where to seed relevance 1.0.
#[derive(Debug, Clone, Copy)]
pub struct RelevanceSeed {
    pub node: NodeId,
    pub row: usize,
    pub col: usize,
}

/// Walks the tape in reverse from the seed, applying the per-op message
/// rules. `encoder_boundary` marks the last encoder-side node id for leak
/// accounting.
pub fn propagate_tape(
    tape: &ComputeTape,
    seed: RelevanceSeed,
    cfg: &LrpConfig,
    encoder_boundary: Option<NodeId>,
) -> Result<Propagation, LrpError> {
    cfg.validate()?;
    if seed.node >= tape.len() {
        return Err(LrpError::Incomplete {
            role: "seed",
            node: seed.node,
            len: tape.len(),
        });
    }
    let mut rel: Vec<Option<Vec<f64>>> = vec![None; tape.len()];
    {
        let out = tape.output(seed.node);
        let mut buf = vec![0.0f64; out.numel()];
        buf[seed.row * out.cols() + seed.col] = 1.0;
        rel[seed.node] = Some(buf);
    }
    let mut audits = Vec::new();

    for id in (0..=seed.node).rev() {
        if rel[id].is_none() {
            continue;
        }
        let node = tape.node(id);
        if matches!(node.op, Op::Leaf | Op::Embed { .. }) {
            continue; // terminal: token/bias mass stays here
        }
        let r = rel[id].take().expect("checked above");
        let incoming: f64 = r.iter().sum();
        let mut absorbed = 0.0f64;
        let mut outgoing = 0.0f64;
        let mut to_encoder = 0.0f64;

        // Message sink tracking flow totals and the encoder leak.
        macro_rules! add {
            ($target:expr, $idx:expr, $m:expr) => {{
                let t: NodeId = $target;
                let m: f64 = $m;
                let buf = rel[t].get_or_insert_with(|| vec![0.0f64; tape.output(t).numel()]);
                buf[$idx] += m;
                outgoing += m;
                if let Some(b) = encoder_boundary {
                    if t <= b && id > b {
                        to_encoder += m;
                    }
                }
            }};
        }

        match &node.op {
            Op::Leaf | Op::Embed { .. } => unreachable!(),
            Op::Linear { x, w, b } => {
                let xt = tape.output(*x);
                let (rows, n_in) = (xt.rows(), xt.cols());
                let n_out = node.out.cols();
                let wt: Vec<f64> = tape.output(*w).data().iter().map(|&v| f64::from(v)).collect();
                let bt: Option<Vec<f64>> =
                    b.map(|b| tape.output(b).data().iter().map(|&v| f64::from(v)).collect());
                for p in 0..rows {
                    let out_rel = &r[p * n_out..(p + 1) * n_out];
                    if out_rel.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let x_row: Vec<f64> =
                        xt.row(p).iter().map(|&v| f64::from(v)).collect();
                    let msg = lrp_linear_message(&x_row, &wt, bt.as_deref(), out_rel, cfg);
                    absorbed += msg.absorbed;
                    for (i, &m) in msg.input.iter().enumerate() {
                        if m != 0.0 {
                            add!(*x, p * n_in + i, m);
                        }
                    }
                }
            }
            Op::Bilinear {
                a, b, transpose_b, ..
            } => {
                // Positive coefficients cancel in the ratios, so the raw
                // factors are used directly.
                let at = tape.output(*a);
                let bt = tape.output(*b);
                let (rows, k) = (at.rows(), at.cols());
                let n_out = node.out.cols();
                // Value matrix as [k, n_out]: V itself, or Kᵀ for scores.
                let vmat: Vec<f64> = if *transpose_b {
                    let mut m = vec![0.0f64; k * n_out];
                    for q in 0..n_out {
                        for d in 0..k {
                            m[d * n_out + q] = f64::from(bt.at(q, d));
                        }
                    }
                    m
                } else {
                    bt.data().iter().map(|&v| f64::from(v)).collect()
                };
                for p in 0..rows {
                    let out_rel = &r[p * n_out..(p + 1) * n_out];
                    if out_rel.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let a_row: Vec<f64> = at.row(p).iter().map(|&v| f64::from(v)).collect();
                    let msg = lrp_bilinear_message(&a_row, &vmat, out_rel, cfg);
                    absorbed += msg.absorbed;
                    for (i, &m) in msg.weights.iter().enumerate() {
                        if m != 0.0 {
                            add!(*a, p * k + i, m);
                        }
                    }
                    for d in 0..k {
                        for j in 0..n_out {
                            let m = msg.values[d * n_out + j];
                            if m != 0.0 {
                                if *transpose_b {
                                    add!(*b, j * k + d, m);
                                } else {
                                    add!(*b, d * n_out + j, m);
                                }
                            }
                        }
                    }
                }
            }
            Op::Residual { a, b } => {
                let at = tape.output(*a);
                let bt = tape.output(*b);
                let av: Vec<f64> = at.data().iter().map(|&v| f64::from(v)).collect();
                let bv: Vec<f64> = bt.data().iter().map(|&v| f64::from(v)).collect();
                let msg = lrp_taylor_message(
                    TaylorInputs::Residual { a: &av, b: &bv },
                    &r,
                    cfg,
                );
                absorbed += msg.absorbed;
                for (i, &m) in msg.parts[0].iter().enumerate() {
                    if m != 0.0 {
                        add!(*a, i, m);
                    }
                }
                for (i, &m) in msg.parts[1].iter().enumerate() {
                    if m != 0.0 {
                        add!(*b, i, m);
                    }
                }
            }
            Op::Softmax { x, allowed } => {
                let xt = tape.output(*x);
                let cols = xt.cols();
                for (p, &m_allowed) in allowed.iter().enumerate() {
                    let out_rel = &r[p * cols..p * cols + m_allowed];
                    if out_rel.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let inputs: Vec<f64> = xt.row(p)[..m_allowed]
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect();
                    let probs: Vec<f64> = node.out.row(p)[..m_allowed]
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect();
                    let msg = lrp_taylor_message(
                        TaylorInputs::Softmax {
                            inputs: &inputs,
                            probs: &probs,
                        },
                        out_rel,
                        cfg,
                    );
                    absorbed += msg.absorbed;
                    for (i, &m) in msg.parts[0].iter().enumerate() {
                        if m != 0.0 {
                            add!(*x, p * cols + i, m);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xt = tape.output(*x);
                let width = xt.cols();
                let rows = xt.numel() / width;
                let gv: Vec<f64> = tape
                    .output(*gain)
                    .data()
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                let bv: Vec<f64> = tape
                    .output(*bias)
                    .data()
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                for p in 0..rows {
                    let out_rel = &r[p * width..(p + 1) * width];
                    if out_rel.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let x_row: Vec<f64> = xt.row(p).iter().map(|&v| f64::from(v)).collect();
                    let msg = lrp_taylor_message(
                        TaylorInputs::LayerNorm {
                            x: &x_row,
                            gain: &gv,
                            bias: &bv,
                            eps: f64::from(*eps),
                        },
                        out_rel,
                        cfg,
                    );
                    absorbed += msg.absorbed;
                    for (i, &m) in msg.parts[0].iter().enumerate() {
                        if m != 0.0 {
                            add!(*x, p * width + i, m);
                        }
                    }
                }
            }
            Op::Relu { x } => {
                // Pointwise monotonic activation: relevance passes through.
                for (i, &m) in r.iter().enumerate() {
                    if m != 0.0 {
                        add!(*x, i, m);
                    }
                }
            }
            Op::Scale { x, c } => {
                let xt = tape.output(*x);
                let c = f64::from(*c);
                for (i, &m) in r.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let z = c * f64::from(xt.data()[i]);
                    let pass = if z > cfg.denom_eps {
                        cfg.alpha
                    } else if z < -cfg.denom_eps {
                        cfg.beta
                    } else {
                        0.0
                    };
                    if pass != 0.0 {
                        add!(*x, i, m * pass);
                    }
                    absorbed += m * (1.0 - pass);
                }
            }
            Op::SliceCols { x, start, len } => {
                let cols = tape.output(*x).cols();
                let rows = tape.output(*x).rows();
                for p in 0..rows {
                    for c in 0..*len {
                        let m = r[p * len + c];
                        if m != 0.0 {
                            add!(*x, p * cols + start + c, m);
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.out.cols();
                let rows = node.out.rows();
                let mut offset = 0usize;
                for &part in parts {
                    let w = tape.output(part).cols();
                    for p in 0..rows {
                        for c in 0..w {
                            let m = r[p * total + offset + c];
                            if m != 0.0 {
                                add!(part, p * w + c, m);
                            }
                        }
                    }
                    offset += w;
                }
            }
            op @ (Op::MatMul { .. }
            | Op::Dropout { .. }
            | Op::CrossEntropyLs { .. }
            | Op::GatherLogProbSum { .. }
            | Op::Stack1 { .. }
            | Op::DotConst { .. }) => {
                return Err(LrpError::UnsupportedNode {
                    node: id,
                    op: op.name(),
                });
            }
        }

        audits.push(NodeAudit {
            node: id,
            incoming,
            outgoing,
            absorbed,
            to_encoder,
        });
        rel[id] = Some(r);
    }

    Ok(Propagation {
        relevance: rel,
        audits,
    })
}

/// Per-generation-step relevance of every source and prefix token, normalized
/// to sum to one.
#[derive(Debug, Clone)]
pub struct ContributionRecord {
    /// Generation step, 1-based.
    pub step: usize,
    /// Relevance per source token, length S.
    pub source: Vec<f64>,
    /// Relevance per prefix token y_1.. (full prefix length of the trace);
    /// entries at positions >= step are exactly zero.
    pub target: Vec<f64>,
    /// Mass lost to biases, guards, and the bos position before
    /// renormalization.
    pub bias_absorbed: f64,
    /// Vocabulary index of the logit the relevance explains.
    pub logit_index: usize,
}

impl ContributionRecord {
    pub fn source_total(&self) -> f64 {
        self.source.iter().sum()
    }

    pub fn target_total(&self) -> f64 {
        self.target.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.source_total() + self.target_total()
    }
}

fn role_check(role: &'static str, node: NodeId, len: usize) -> Result<(), LrpError> {
    if node >= len {
        return Err(LrpError::Incomplete { role, node, len });
    }
    Ok(())
}

/// Propagates relevance for the prediction at `step` (1-based) and gathers
/// per-token contributions.
pub fn propagate_prediction(
    trace: &ActivationTrace,
    step: usize,
    cfg: &LrpConfig,
) -> Result<ContributionRecord, LrpError> {
    propagate_prediction_audited(trace, step, cfg).map(|(record, _)| record)
}

/// Audit of one propagation: per-node balances plus layer-level flows.
#[derive(Debug)]
pub struct PropagationAudit {
    pub per_node: Vec<NodeAudit>,
    /// Relevance arriving at each decoder layer's output node, top to bottom.
    pub dec_layer_in: Vec<f64>,
    /// Relevance at each decoder layer's input stream node.
    pub dec_layer_out: Vec<f64>,
    /// Mass each decoder layer sent to encoder-side nodes.
    pub dec_layer_leak: Vec<f64>,
    /// Mass each decoder layer absorbed.
    pub dec_layer_absorbed: Vec<f64>,
}

pub fn propagate_prediction_audited(
    trace: &ActivationTrace,
    step: usize,
    cfg: &LrpConfig,
) -> Result<(ContributionRecord, PropagationAudit), LrpError> {
    cfg.validate()?;
    let tape = &trace.tape;
    let len = tape.len();
    role_check("logits", trace.logits_node, len)?;
    role_check("src_embed", trace.src_embed_node, len)?;
    role_check("src_pos", trace.src_pos_node, len)?;
    role_check("tgt_embed", trace.tgt_embed_node, len)?;
    role_check("tgt_pos", trace.tgt_pos_node, len)?;
    role_check("encoder_out", trace.encoder_out_node, len)?;
    if step < 1 || step > trace.steps {
        return Err(LrpError::BadStep {
            step,
            steps: trace.steps,
        });
    }

    let logits = tape.output(trace.logits_node);
    let col = match cfg.logit_choice {
        LogitChoice::Top1 => crate::model::argmax(logits.row(step - 1)),
        LogitChoice::Index(i) => {
            if i >= logits.cols() {
                return Err(LrpError::Config(format!(
                    "logit index {i} outside vocab {}",
                    logits.cols()
                )));
            }
            i
        }
    };

    let prop = propagate_tape(
        tape,
        RelevanceSeed {
            node: trace.logits_node,
            row: step - 1,
            col,
        },
        cfg,
        Some(trace.encoder_out_node),
    )?;

    // Token relevance: sum over each token's embedding-row neurons, with the
    // positional addend attributed to the same position.
    let row_sums = |node: NodeId| -> Vec<f64> {
        let out = tape.output(node);
        let (rows, cols) = (out.rows(), out.cols());
        match &prop.relevance[node] {
            Some(r) => (0..rows)
                .map(|p| r[p * cols..(p + 1) * cols].iter().sum())
                .collect(),
            None => vec![0.0; rows],
        }
    };
    let src_emb = row_sums(trace.src_embed_node);
    let src_pos = row_sums(trace.src_pos_node);
    let tgt_emb = row_sums(trace.tgt_embed_node);
    let tgt_pos = row_sums(trace.tgt_pos_node);

    let source: Vec<f64> = src_emb
        .iter()
        .zip(&src_pos)
        .map(|(a, b)| a + b)
        .collect();
    // Decoder row 0 is bos: not a prefix token, its mass joins the absorbed
    // pool so that r_1(source) = 1 holds exactly.
    let target: Vec<f64> = tgt_emb
        .iter()
        .zip(&tgt_pos)
        .map(|(a, b)| a + b)
        .skip(1)
        .collect();

    let token_mass: f64 = source.iter().sum::<f64>() + target.iter().sum::<f64>();
    if token_mass < 1e-9 {
        return Err(LrpError::DegenerateMass { mass: token_mass });
    }
    let source: Vec<f64> = source.iter().map(|v| v / token_mass).collect();
    let target: Vec<f64> = target.iter().map(|v| v / token_mass).collect();

    let mut audit = PropagationAudit {
        per_node: prop.audits,
        dec_layer_in: Vec::new(),
        dec_layer_out: Vec::new(),
        dec_layer_leak: Vec::new(),
        dec_layer_absorbed: Vec::new(),
    };
    for span in trace.dec_layers.iter().rev() {
        let incoming = audit
            .per_node
            .iter()
            .find(|a| a.node == span.output)
            .map_or(0.0, |a| a.incoming);
        let out = prop.relevance[span.input]
            .as_ref()
            .map_or(0.0, |r| r.iter().sum());
        let leak: f64 = audit
            .per_node
            .iter()
            .filter(|a| a.node >= span.first && a.node <= span.last)
            .map(|a| a.to_encoder)
            .sum();
        let absorbed: f64 = audit
            .per_node
            .iter()
            .filter(|a| a.node >= span.first && a.node <= span.last)
            .map(|a| a.absorbed)
            .sum();
        audit.dec_layer_in.push(incoming);
        audit.dec_layer_out.push(out);
        audit.dec_layer_leak.push(leak);
        audit.dec_layer_absorbed.push(absorbed);
    }

    Ok((
        ContributionRecord {
            step,
            source,
            target,
            bias_absorbed: 1.0 - token_mass,
            logit_index: col,
        },
        audit,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BOS;
    use crate::model::{forward, ModelConfig, Parameters};
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn default_cfg() -> LrpConfig {
        LrpConfig::default()
    }

    #[test]
    fn config_enforces_alpha_beta_sum() {
        assert!(LrpConfig::with_alpha_beta(0.5, 0.5).is_ok());
        assert!(LrpConfig::with_alpha_beta(0.7, 0.7).is_err());
        assert!(LrpConfig::with_alpha_beta(1.5, -0.5).is_err());
    }

    #[test]
    fn linear_message_keeps_only_positive_contribution() {
        // x = [2, 1], single output with weights [1, -1], no bias.
        let msg = lrp_linear_message(&[2.0, 1.0], &[1.0, -1.0], None, &[1.0], &default_cfg());
        assert!((msg.input[0] - 1.0).abs() < 1e-12);
        assert_eq!(msg.input[1], 0.0);
        assert!(msg.absorbed.abs() < 1e-12);
    }

    #[test]
    fn linear_message_symmetric_split() {
        let msg = lrp_linear_message(&[1.0, 1.0], &[1.0, 1.0], None, &[1.0], &default_cfg());
        assert!((msg.input[0] - 0.5).abs() < 1e-12);
        assert!((msg.input[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_message_zero_input_is_guarded() {
        let msg = lrp_linear_message(&[0.0, 0.0], &[1.0, 1.0], None, &[1.0], &default_cfg());
        assert!(msg.input.iter().all(|&m| m == 0.0));
        assert!((msg.absorbed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn residual_taylor_matches_hand_values() {
        let msg = lrp_taylor_message(
            TaylorInputs::Residual {
                a: &[3.0],
                b: &[1.0],
            },
            &[1.0],
            &default_cfg(),
        );
        assert!((msg.parts[0][0] - 0.75).abs() < 1e-12);
        assert!((msg.parts[1][0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_taylor_at_zero_splits_equally() {
        let n = 4usize;
        let inputs = vec![0.0f64; n];
        let probs = vec![1.0 / n as f64; n];
        let out_rel = vec![1.0, 0.0, 0.0, 0.0];
        let msg = lrp_taylor_message(
            TaylorInputs::Softmax {
                inputs: &inputs,
                probs: &probs,
            },
            &out_rel,
            &default_cfg(),
        );
        for &m in &msg.parts[0] {
            assert!((m - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_taylor_matches_finite_difference_oracle() {
        // Independent scalar reference: numeric Jacobian of layer norm.
        let x = [0.8f64, -0.8];
        let gain = [1.3f64, 0.9];
        let bias = [0.1f64, -0.2];
        let eps = 1e-6f64;
        let out_rel = [0.6f64, 0.4];
        let f = |x: &[f64], j: usize| -> f64 {
            let n = x.len() as f64;
            let mean: f64 = x.iter().sum::<f64>() / n;
            let var: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            gain[j] * (x[j] - mean) / (var + eps).sqrt() + bias[j]
        };
        let h = 1e-7;
        let n = x.len();
        let mut want = vec![0.0f64; n];
        let mut absorbed_want = 0.0f64;
        for j in 0..n {
            let mut terms = vec![0.0f64; n];
            for i in 0..n {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                let jac = (f(&xp, j) - f(&xm, j)) / (2.0 * h);
                let zero = {
                    let zeros = vec![0.0f64; n];
                    f(&zeros, j) / n as f64
                };
                terms[i] = zero + jac * x[i];
            }
            // Eq. 5 split with alpha = 1.
            let zp: f64 = terms.iter().filter(|&&z| z > 0.0).sum();
            if zp > 1e-12 {
                for i in 0..n {
                    if terms[i] > 0.0 {
                        want[i] += out_rel[j] * terms[i] / zp;
                    }
                }
            } else {
                absorbed_want += out_rel[j];
            }
        }
        let msg = lrp_taylor_message(
            TaylorInputs::LayerNorm {
                x: &x,
                gain: &gain,
                bias: &bias,
                eps,
            },
            &out_rel,
            &default_cfg(),
        );
        for i in 0..n {
            assert!(
                (msg.parts[0][i] - want[i]).abs() < 1e-6,
                "i={i}: got {}, want {}",
                msg.parts[0][i],
                want[i]
            );
        }
        assert!((msg.absorbed - absorbed_want).abs() < 1e-6);
    }

    #[test]
    fn bilinear_half_split_matches_hand_values() {
        // a = [0.9, 0.1], values [[1], [1]], R = 1.
        let msg = lrp_bilinear_message(&[0.9, 0.1], &[1.0, 1.0], &[1.0], &default_cfg());
        assert!((msg.weights[0] - 0.45).abs() < 1e-12);
        assert!((msg.weights[1] - 0.05).abs() < 1e-12);
        assert!((msg.values[0] - 0.45).abs() < 1e-12);
        assert!((msg.values[1] - 0.05).abs() < 1e-12);
    }

    #[test]
    fn bilinear_degenerate_attention_sends_everything_to_single_value() {
        let cfg = LrpConfig {
            bilinear_rule: BilinearRule::ValuesOnly,
            ..default_cfg()
        };
        let msg = lrp_bilinear_message(&[1.0], &[2.0, 3.0], &[0.5, 0.5], &cfg);
        assert!(msg.weights.iter().all(|&m| m == 0.0));
        assert!((msg.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_symmetric_keys_share_equally() {
        let msg = lrp_bilinear_message(
            &[0.5, 0.5],
            &[1.0, 2.0, 1.0, 2.0], // identical value rows
            &[0.4, 0.6],
            &default_cfg(),
        );
        assert!((msg.weights[0] - msg.weights[1]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn linear_messages_conserve_relevance(
            xs in proptest::collection::vec(-2.0f64..2.0, 3..6),
            seed in 0u64..1000,
            alpha_idx in 0usize..3,
        ) {
            let n_in = xs.len();
            let n_out = 4usize;
            let mut rng = SeededRng::new(seed);
            let w: Vec<f64> = (0..n_in * n_out).map(|_| f64::from(rng.uniform_f32(-1.0, 1.0))).collect();
            let b: Vec<f64> = (0..n_out).map(|_| f64::from(rng.uniform_f32(-0.5, 0.5))).collect();
            let out_rel: Vec<f64> = (0..n_out).map(|_| f64::from(rng.uniform_f32(0.0, 1.0))).collect();
            let (alpha, beta) = [(1.0, 0.0), (0.5, 0.5), (0.75, 0.25)][alpha_idx];
            let cfg = LrpConfig::with_alpha_beta(alpha, beta).unwrap();
            let msg = lrp_linear_message(&xs, &w, Some(&b), &out_rel, &cfg);
            let total_in: f64 = out_rel.iter().sum();
            let total_out: f64 = msg.input.iter().sum::<f64>() + msg.absorbed;
            prop_assert!((total_in - total_out).abs() < 1e-9,
                "in {total_in} != out {total_out}");
        }

        #[test]
        fn taylor_messages_conserve_relevance(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let n = 5usize;
            let x: Vec<f64> = (0..n).map(|_| f64::from(rng.uniform_f32(-2.0, 2.0))).collect();
            let out_rel: Vec<f64> = (0..n).map(|_| f64::from(rng.uniform_f32(0.0, 1.0))).collect();
            let cfg = default_cfg();
            // Residual.
            let other: Vec<f64> = (0..n).map(|_| f64::from(rng.uniform_f32(-2.0, 2.0))).collect();
            let m = lrp_taylor_message(TaylorInputs::Residual { a: &x, b: &other }, &out_rel, &cfg);
            let total = m.parts.iter().flatten().sum::<f64>() + m.absorbed;
            prop_assert!((total - out_rel.iter().sum::<f64>()).abs() < 1e-9);
            // Softmax.
            let mut probs: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            let m = lrp_taylor_message(TaylorInputs::Softmax { inputs: &x, probs: &probs }, &out_rel, &cfg);
            let total = m.parts[0].iter().sum::<f64>() + m.absorbed;
            prop_assert!((total - out_rel.iter().sum::<f64>()).abs() < 1e-9);
            // Layer norm.
            let gain = vec![1.0f64; n];
            let bias = vec![0.0f64; n];
            let m = lrp_taylor_message(TaylorInputs::LayerNorm { x: &x, gain: &gain, bias: &bias, eps: 1e-6 }, &out_rel, &cfg);
            let total = m.parts[0].iter().sum::<f64>() + m.absorbed;
            prop_assert!((total - out_rel.iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    fn tiny_trace(seed: u64, src: &[u32], tgt_in: &[u32]) -> ActivationTrace {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            src_vocab: 12,
            tgt_vocab: 12,
            max_len: 16,
            dropout_rate: 0.0,
        };
        let params = Parameters::init(&cfg, seed).unwrap();
        forward(&params, src, tgt_in, true).unwrap().1.unwrap()
    }

    #[test]
    fn step_one_attributes_everything_to_source() {
        for seed in 0..5u64 {
            let trace = tiny_trace(seed, &[4, 5, 6], &[BOS, 7, 8]);
            let rec = propagate_prediction(&trace, 1, &default_cfg()).unwrap();
            assert!((rec.source_total() - 1.0).abs() < 1e-12, "seed {seed}");
            assert_eq!(rec.target_total(), 0.0);
            assert!(rec.target.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn future_prefix_positions_have_exactly_zero_relevance() {
        let trace = tiny_trace(3, &[4, 5, 6, 7], &[BOS, 8, 9, 10, 11]);
        for t in 1..=trace.steps {
            let rec = propagate_prediction(&trace, t, &default_cfg()).unwrap();
            for (j0, &v) in rec.target.iter().enumerate() {
                let j = j0 + 1; // prefix positions are 1-based
                if j >= t {
                    assert_eq!(v, 0.0, "t={t} j={j}");
                }
            }
        }
    }

    #[test]
    fn records_normalize_and_stay_nonnegative() {
        for seed in 0..10u64 {
            let trace = tiny_trace(seed, &[4, 5, 6], &[BOS, 7, 8, 9]);
            for t in 1..=trace.steps {
                let rec = propagate_prediction(&trace, t, &default_cfg()).unwrap();
                assert!(
                    (rec.total() - 1.0).abs() < 1e-6,
                    "seed {seed} t {t}: total {}",
                    rec.total()
                );
                assert!(rec.source.iter().all(|&v| v >= 0.0));
                assert!(rec.target.iter().all(|&v| v >= 0.0));
                assert!(rec.bias_absorbed >= -1e-12 && rec.bias_absorbed <= 1.0);
            }
        }
    }

    #[test]
    fn per_node_message_sums_balance() {
        let trace = tiny_trace(7, &[4, 5, 6], &[BOS, 7, 8]);
        let (_, audit) = propagate_prediction_audited(&trace, 3, &default_cfg()).unwrap();
        for a in &audit.per_node {
            assert!(
                (a.incoming - a.outgoing - a.absorbed).abs() < 1e-9,
                "node {}: in {} out {} absorbed {}",
                a.node,
                a.incoming,
                a.outgoing,
                a.absorbed
            );
        }
    }

    #[test]
    fn decoder_layer_flow_balances_with_encoder_leak() {
        let trace = tiny_trace(11, &[4, 5, 6, 7], &[BOS, 8, 9]);
        let (_, audit) = propagate_prediction_audited(&trace, 3, &default_cfg()).unwrap();
        for l in 0..audit.dec_layer_in.len() {
            let lhs = audit.dec_layer_in[l];
            let rhs =
                audit.dec_layer_out[l] + audit.dec_layer_leak[l] + audit.dec_layer_absorbed[l];
            assert!(
                (lhs - rhs).abs() < 1e-6,
                "layer {l}: in {lhs} vs out+leak+absorbed {rhs}"
            );
            assert!(audit.dec_layer_leak[l] > 0.0, "no relevance leaked at {l}");
        }
    }

    #[test]
    fn bad_step_is_rejected() {
        let trace = tiny_trace(1, &[4, 5], &[BOS, 6]);
        assert!(matches!(
            propagate_prediction(&trace, 0, &default_cfg()),
            Err(LrpError::BadStep { .. })
        ));
        assert!(matches!(
            propagate_prediction(&trace, 5, &default_cfg()),
            Err(LrpError::BadStep { .. })
        ));
    }

    #[test]
    fn training_only_nodes_are_rejected() {
        use crate::numerics::{Op, Tensor};
        let mut tape = ComputeTape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let s = tape
            .push(Op::Scale { x, c: 2.0 })
            .and_then(|s| {
                tape.push(Op::CrossEntropyLs {
                    logits: s,
                    targets: vec![0],
                    smoothing: 0.0,
                })
            })
            .unwrap();
        let err = propagate_tape(
            &tape,
            RelevanceSeed {
                node: s,
                row: 0,
                col: 0,
            },
            &default_cfg(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, LrpError::UnsupportedNode { .. }));
    }
}
