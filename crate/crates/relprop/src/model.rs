//! Post-norm Transformer encoder-decoder with a recording forward pass.
//!
//! The traced forward builds a `ComputeTape` whose nodes double as the
//! activation trace: the relevance engine walks it backwards, and the trainer
//! appends a loss node and runs gradient backprop over the same structure.
//! Attention is recorded as explicit score / softmax / weighted-sum nodes so
//! each gets its own propagation rule.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BOS, EOS};
use crate::numerics::{ComputeTape, NodeId, NumericsError, Op, SeededRng, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of vocabulary (size {vocab})")]
    InputId { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty input sequence")]
    Empty,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    /// Residual/embedding dropout during training only; traced forwards run
    /// with dropout off.
    pub dropout_rate: f32,
}

impl ModelConfig {
    /// Desk-scale defaults; large enough to solve the synthetic tasks.
    pub fn desk(vocab: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            src_vocab: vocab,
            tgt_vocab: vocab,
            max_len: 32,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be even for sinusoidal positions",
                self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Fixed sin/cos position table, `[max_len, d_model]`, values in [-1, 1].
pub fn sinusoidal_positions(max_len: usize, d_model: usize) -> Result<Tensor, ModelError> {
    if d_model % 2 != 0 {
        return Err(ModelError::Config(format!(
            "sinusoidal positions need an even d_model, got {d_model}"
        )));
    }
    let mut data = vec![0.0f32; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = rate.sin() as f32;
            data[pos * d_model + 2 * i + 1] = rate.cos() as f32;
        }
    }
    Ok(Tensor::new(vec![max_len, d_model], data).expect("bounded table"))
}

/// Named parameter tensors plus the config they were shaped for.
#[derive(Debug, Clone)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Arc<Tensor>>,
}

fn glorot(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    // Scaled uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    let a = (6.0 / (rows + cols) as f32).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_f32(-a, a)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

impl Parameters {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = SeededRng::new(seed).substream(0x9a7a);
        let d = config.d_model;
        let mut tensors: BTreeMap<String, Arc<Tensor>> = BTreeMap::new();

        fn mat(
            tensors: &mut BTreeMap<String, Arc<Tensor>>,
            rng: &mut SeededRng,
            name: String,
            rows: usize,
            cols: usize,
        ) {
            tensors.insert(name, Arc::new(glorot(rng, rows, cols)));
        }
        fn attn(
            tensors: &mut BTreeMap<String, Arc<Tensor>>,
            rng: &mut SeededRng,
            prefix: &str,
            d: usize,
        ) {
            for p in ["wq", "wk", "wv", "wo"] {
                mat(tensors, rng, format!("{prefix}.{p}"), d, d);
            }
            for p in ["bq", "bk", "bv", "bo"] {
                tensors.insert(format!("{prefix}.{p}"), Arc::new(Tensor::zeros(vec![d])));
            }
        }
        fn norm(tensors: &mut BTreeMap<String, Arc<Tensor>>, prefix: &str, d: usize) {
            tensors.insert(
                format!("{prefix}.gain"),
                Arc::new(Tensor::filled(vec![d], 1.0)),
            );
            tensors.insert(format!("{prefix}.bias"), Arc::new(Tensor::zeros(vec![d])));
        }
        fn ffn(
            tensors: &mut BTreeMap<String, Arc<Tensor>>,
            rng: &mut SeededRng,
            prefix: &str,
            d: usize,
            d_ff: usize,
        ) {
            mat(tensors, rng, format!("{prefix}.w1"), d, d_ff);
            tensors.insert(format!("{prefix}.b1"), Arc::new(Tensor::zeros(vec![d_ff])));
            mat(tensors, rng, format!("{prefix}.w2"), d_ff, d);
            tensors.insert(format!("{prefix}.b2"), Arc::new(Tensor::zeros(vec![d])));
        }

        mat(&mut tensors, &mut rng, "src_embed".into(), config.src_vocab, d);
        mat(&mut tensors, &mut rng, "tgt_embed".into(), config.tgt_vocab, d);
        for l in 0..config.n_layers {
            attn(&mut tensors, &mut rng, &format!("enc.{l}.self"), d);
            norm(&mut tensors, &format!("enc.{l}.norm1"), d);
            ffn(&mut tensors, &mut rng, &format!("enc.{l}.ffn"), d, config.d_ff);
            norm(&mut tensors, &format!("enc.{l}.norm2"), d);
        }
        for l in 0..config.n_layers {
            attn(&mut tensors, &mut rng, &format!("dec.{l}.self"), d);
            norm(&mut tensors, &format!("dec.{l}.norm1"), d);
            attn(&mut tensors, &mut rng, &format!("dec.{l}.cross"), d);
            norm(&mut tensors, &format!("dec.{l}.norm2"), d);
            ffn(&mut tensors, &mut rng, &format!("dec.{l}.ffn"), d, config.d_ff);
            norm(&mut tensors, &format!("dec.{l}.norm3"), d);
        }
        mat(&mut tensors, &mut rng, "out.w".into(), d, config.tgt_vocab);
        tensors.insert(
            "out.b".into(),
            Arc::new(Tensor::zeros(vec![config.tgt_vocab])),
        );

        Ok(Parameters {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Arc<Tensor> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

/// Node ids bounding one encoder/decoder layer; `input` is the stream the
/// layer consumed, `output` the stream it produced.
#[derive(Debug, Clone)]
pub struct LayerSpan {
    pub input: NodeId,
    pub output: NodeId,
    pub first: NodeId,
    pub last: NodeId,
}

/// A complete forward recording: the tape plus the node roles the relevance
/// engine needs.
#[derive(Debug)]
pub struct ActivationTrace {
    pub tape: ComputeTape,
    pub src_ids: Vec<u32>,
    pub tgt_in_ids: Vec<u32>,
    /// Number of logit rows (= decoder input length).
    pub steps: usize,
    pub src_embed_node: NodeId,
    pub src_pos_node: NodeId,
    pub tgt_embed_node: NodeId,
    pub tgt_pos_node: NodeId,
    pub encoder_out_node: NodeId,
    pub logits_node: NodeId,
    pub enc_layers: Vec<LayerSpan>,
    pub dec_layers: Vec<LayerSpan>,
}

impl ActivationTrace {
    pub fn src_len(&self) -> usize {
        self.src_ids.len()
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.output(self.logits_node)
    }
}

/// Tape under construction plus the roles filled in so far.
pub struct ForwardBuild {
    pub tape: ComputeTape,
    pub logits: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub trace: TraceRoles,
}

#[derive(Debug, Default)]
pub struct TraceRoles {
    pub src_embed: NodeId,
    pub src_pos: NodeId,
    pub tgt_embed: NodeId,
    pub tgt_pos: NodeId,
    pub encoder_out: NodeId,
    pub enc_layers: Vec<LayerSpan>,
    pub dec_layers: Vec<LayerSpan>,
}

struct Builder<'p> {
    params: &'p Parameters,
    tape: ComputeTape,
    param_nodes: BTreeMap<String, NodeId>,
    dropout: Option<(SeededRng, f32)>,
}

impl Builder<'_> {
    fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.param_nodes.get(name) {
            return id;
        }
        let id = self.tape.leaf(Arc::clone(self.params.get(name)));
        self.param_nodes.insert(name.to_string(), id);
        id
    }

    fn push(&mut self, op: Op) -> Result<NodeId, NumericsError> {
        self.tape.push(op)
    }

    /// Inverted dropout node when training with a nonzero rate.
    fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.tape.output(x).numel();
        let Some((rng, rate)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let rate = *rate;
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep: Vec<bool> = (0..n).map(|_| rng.unit_f64() >= f64::from(rate)).collect();
        self.push(Op::Dropout {
            x,
            keep,
            inv_keep: 1.0 / (1.0 - rate),
        })
    }

    fn embed_side(
        &mut self,
        table: &str,
        ids: &[u32],
        pos_table: &Tensor,
    ) -> Result<(NodeId, NodeId, NodeId), NumericsError> {
        let d = self.params.config.d_model;
        let table = self.param(table);
        let embed = self.push(Op::Embed {
            table,
            ids: ids.iter().map(|&i| i as usize).collect(),
            scale: (d as f32).sqrt(),
        })?;
        let rows: Vec<f32> = (0..ids.len())
            .flat_map(|p| pos_table.row(p).to_vec())
            .collect();
        let pos = self
            .tape
            .constant(Tensor::new(vec![ids.len(), d], rows).expect("pos rows"));
        let sum = self.push(Op::Residual { a: embed, b: pos })?;
        let stream = self.maybe_dropout(sum)?;
        Ok((embed, pos, stream))
    }

    /// Multi-head attention block: q from `q_stream`, k/v from `kv_stream`.
    fn attention(
        &mut self,
        prefix: &str,
        q_stream: NodeId,
        kv_stream: NodeId,
        allowed: Vec<usize>,
    ) -> Result<NodeId, NumericsError> {
        let cfg = &self.params.config;
        let (heads, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let wq = self.param(&format!("{prefix}.wq"));
        let bq = self.param(&format!("{prefix}.bq"));
        let wk = self.param(&format!("{prefix}.wk"));
        let bk = self.param(&format!("{prefix}.bk"));
        let wv = self.param(&format!("{prefix}.wv"));
        let bv = self.param(&format!("{prefix}.bv"));
        let q = self.push(Op::Linear {
            x: q_stream,
            w: wq,
            b: Some(bq),
        })?;
        let k = self.push(Op::Linear {
            x: kv_stream,
            w: wk,
            b: Some(bk),
        })?;
        let v = self.push(Op::Linear {
            x: kv_stream,
            w: wv,
            b: Some(bv),
        })?;
        let mut ctxs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.push(Op::SliceCols {
                x: q,
                start: h * dh,
                len: dh,
            })?;
            let kh = self.push(Op::SliceCols {
                x: k,
                start: h * dh,
                len: dh,
            })?;
            let vh = self.push(Op::SliceCols {
                x: v,
                start: h * dh,
                len: dh,
            })?;
            let scores = self.push(Op::Bilinear {
                a: qh,
                b: kh,
                transpose_b: true,
                coeff: 1.0 / (dh as f32).sqrt(),
            })?;
            let probs = self.push(Op::Softmax {
                x: scores,
                allowed: allowed.clone(),
            })?;
            let ctx = self.push(Op::Bilinear {
                a: probs,
                b: vh,
                transpose_b: false,
                coeff: 1.0,
            })?;
            ctxs.push(ctx);
        }
        let merged = self.push(Op::ConcatCols { parts: ctxs })?;
        let wo = self.param(&format!("{prefix}.wo"));
        let bo = self.param(&format!("{prefix}.bo"));
        self.push(Op::Linear {
            x: merged,
            w: wo,
            b: Some(bo),
        })
    }

    fn add_norm(
        &mut self,
        stream: NodeId,
        sub: NodeId,
        prefix: &str,
    ) -> Result<NodeId, NumericsError> {
        let sub = self.maybe_dropout(sub)?;
        let res = self.push(Op::Residual { a: stream, b: sub })?;
        let gain = self.param(&format!("{prefix}.gain"));
        let bias = self.param(&format!("{prefix}.bias"));
        self.push(Op::LayerNorm {
            x: res,
            gain,
            bias,
            eps: 1e-6,
        })
    }

    fn ffn(&mut self, stream: NodeId, prefix: &str) -> Result<NodeId, NumericsError> {
        let w1 = self.param(&format!("{prefix}.w1"));
        let b1 = self.param(&format!("{prefix}.b1"));
        let w2 = self.param(&format!("{prefix}.w2"));
        let b2 = self.param(&format!("{prefix}.b2"));
        let f1 = self.push(Op::Linear {
            x: stream,
            w: w1,
            b: Some(b1),
        })?;
        let r = self.push(Op::Relu { x: f1 })?;
        self.push(Op::Linear {
            x: r,
            w: w2,
            b: Some(b2),
        })
    }
}

fn check_ids(ids: &[u32], vocab: usize, max_len: usize) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::Empty);
    }
    if ids.len() > max_len {
        return Err(ModelError::TooLong {
            len: ids.len(),
            max: max_len,
        });
    }
    for &id in ids {
        if id as usize >= vocab {
            return Err(ModelError::InputId { id, vocab });
        }
    }
    Ok(())
}

/// Builds the full forward tape. `dropout_rng` enables dropout (training only).
pub fn build_forward(
    params: &Parameters,
    src: &[u32],
    tgt_in: &[u32],
    dropout_rng: Option<SeededRng>,
) -> Result<ForwardBuild, ModelError> {
    let cfg = &params.config;
    cfg.validate()?;
    check_ids(src, cfg.src_vocab, cfg.max_len)?;
    check_ids(tgt_in, cfg.tgt_vocab, cfg.max_len)?;

    let pos_table = sinusoidal_positions(cfg.max_len, cfg.d_model)?;
    let mut b = Builder {
        params,
        tape: ComputeTape::new(),
        param_nodes: BTreeMap::new(),
        dropout: dropout_rng.map(|rng| (rng, cfg.dropout_rate)),
    };

    // Encoder.
    let (src_embed, src_pos, mut enc_stream) = b.embed_side("src_embed", src, &pos_table)?;
    let s_len = src.len();
    let mut enc_layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let input = enc_stream;
        let first = b.tape.len();
        let attn = b.attention(
            &format!("enc.{l}.self"),
            enc_stream,
            enc_stream,
            vec![s_len; s_len],
        )?;
        let n1 = b.add_norm(enc_stream, attn, &format!("enc.{l}.norm1"))?;
        let f = b.ffn(n1, &format!("enc.{l}.ffn"))?;
        let n2 = b.add_norm(n1, f, &format!("enc.{l}.norm2"))?;
        enc_stream = n2;
        enc_layers.push(LayerSpan {
            input,
            output: n2,
            first,
            last: b.tape.len() - 1,
        });
    }
    let encoder_out = enc_stream;

    // Decoder.
    let (tgt_embed, tgt_pos, mut dec_stream) = b.embed_side("tgt_embed", tgt_in, &pos_table)?;
    let t_len = tgt_in.len();
    let causal: Vec<usize> = (1..=t_len).collect();
    let mut dec_layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let input = dec_stream;
        let first = b.tape.len();
        let self_attn = b.attention(
            &format!("dec.{l}.self"),
            dec_stream,
            dec_stream,
            causal.clone(),
        )?;
        let n1 = b.add_norm(dec_stream, self_attn, &format!("dec.{l}.norm1"))?;
        let cross = b.attention(
            &format!("dec.{l}.cross"),
            n1,
            encoder_out,
            vec![s_len; t_len],
        )?;
        let n2 = b.add_norm(n1, cross, &format!("dec.{l}.norm2"))?;
        let f = b.ffn(n2, &format!("dec.{l}.ffn"))?;
        let n3 = b.add_norm(n2, f, &format!("dec.{l}.norm3"))?;
        dec_stream = n3;
        dec_layers.push(LayerSpan {
            input,
            output: n3,
            first,
            last: b.tape.len() - 1,
        });
    }

    let w_out = b.param("out.w");
    let b_out = b.param("out.b");
    let logits = b.push(Op::Linear {
        x: dec_stream,
        w: w_out,
        b: Some(b_out),
    })?;

    Ok(ForwardBuild {
        tape: b.tape,
        logits,
        param_nodes: b.param_nodes,
        trace: TraceRoles {
            src_embed,
            src_pos,
            tgt_embed,
            tgt_pos,
            encoder_out,
            enc_layers,
            dec_layers,
        },
    })
}

/// Forward pass over a source and a decoder-input prefix (bos first). Returns
/// logits for every prefix position, plus the activation trace when asked.
/// Dropout is always off here; training applies it through `build_forward`.
pub fn forward(
    params: &Parameters,
    src: &[u32],
    tgt_prefix: &[u32],
    trace: bool,
) -> Result<(Tensor, Option<ActivationTrace>), ModelError> {
    let build = build_forward(params, src, tgt_prefix, None)?;
    let logits = build.tape.output(build.logits).clone();
    if !trace {
        return Ok((logits, None));
    }
    let roles = build.trace;
    Ok((
        logits,
        Some(ActivationTrace {
            tape: build.tape,
            src_ids: src.to_vec(),
            tgt_in_ids: tgt_prefix.to_vec(),
            steps: tgt_prefix.len(),
            src_embed_node: roles.src_embed,
            src_pos_node: roles.src_pos,
            tgt_embed_node: roles.tgt_embed,
            tgt_pos_node: roles.tgt_pos,
            encoder_out_node: roles.encoder_out,
            logits_node: build.logits,
            enc_layers: roles.enc_layers,
            dec_layers: roles.dec_layers,
        }),
    ))
}

/// Stable log-softmax of one logit row in f64.
pub fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0f64;
    for &v in row {
        denom += f64::from(v - max).exp();
    }
    let lse = f64::from(max) + denom.ln();
    row.iter().map(|&v| f64::from(v) - lse).collect()
}

/// Argmax with ties broken by the lowest token id.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `<bos>`; stops at `<eos>` or `max_steps`. The result
/// excludes `<bos>` and includes `<eos>` when reached.
pub fn greedy_decode(
    params: &Parameters,
    src: &[u32],
    max_steps: usize,
) -> Result<Vec<u32>, ModelError> {
    assert!(max_steps >= 1, "max_steps must be at least 1");
    let mut ys = vec![BOS];
    for _ in 0..max_steps {
        let (logits, _) = forward(params, src, &ys, false)?;
        let next = argmax(logits.row(logits.rows() - 1)) as u32;
        ys.push(next);
        if next == EOS || ys.len() >= params.config.max_len {
            break;
        }
    }
    Ok(ys[1..].to_vec())
}

#[derive(Debug, Clone)]
struct Hypothesis {
    ids: Vec<u32>,
    sum_logp: f64,
    finished: bool,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        if self.ids.len() <= 1 {
            return f64::NEG_INFINITY;
        }
        self.sum_logp / (self.ids.len() - 1) as f64
    }
}

/// Length-normalized beam search (score = sum log-prob / length). `beam = 1`
/// reduces to greedy decoding.
pub fn beam_decode(
    params: &Parameters,
    src: &[u32],
    beam: usize,
    max_steps: usize,
) -> Result<Vec<u32>, ModelError> {
    assert!(beam >= 1, "beam must be at least 1");
    let mut live = vec![Hypothesis {
        ids: vec![BOS],
        sum_logp: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_steps {
        if live.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let (logits, _) = forward(params, src, &hyp.ids, false)?;
            let logps = log_softmax_row(logits.row(logits.rows() - 1));
            for (tok, &lp) in logps.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(tok as u32);
                candidates.push(Hypothesis {
                    ids,
                    sum_logp: hyp.sum_logp + lp,
                    finished: tok as u32 == EOS,
                });
            }
        }
        // Deterministic order: best total log-prob first, then lowest ids.
        candidates.sort_by(|a, b| {
            b.sum_logp
                .partial_cmp(&a.sum_logp)
                .unwrap()
                .then_with(|| a.ids.cmp(&b.ids))
        });
        candidates.truncate(beam);
        live = Vec::new();
        for c in candidates {
            if c.finished || c.ids.len() >= params.config.max_len {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
    }
    finished.extend(live);
    finished.sort_by(|a, b| {
        b.normalized()
            .partial_cmp(&a.normalized())
            .unwrap()
            .then_with(|| a.ids.len().cmp(&b.ids.len()))
            .then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(finished
        .first()
        .map(|h| h.ids[1..].to_vec())
        .unwrap_or_default())
}

/// Length-normalized score of a fixed hypothesis (for comparing search
/// results against greedy output).
pub fn hypothesis_score(params: &Parameters, src: &[u32], hyp: &[u32]) -> Result<f64, ModelError> {
    assert!(!hyp.is_empty());
    let mut ids = vec![BOS];
    ids.extend_from_slice(hyp);
    let (logits, _) = forward(params, src, &ids[..ids.len() - 1], false)?;
    let mut sum = 0.0f64;
    for (r, &tok) in hyp.iter().enumerate() {
        sum += log_softmax_row(logits.row(r))[tok as usize];
    }
    Ok(sum / hyp.len() as f64)
}
