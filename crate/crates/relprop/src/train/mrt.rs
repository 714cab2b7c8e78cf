//! Minimum risk fine-tuning over sampled candidate subsets.
//!
//! Per sentence, candidates are sampled from the current model (temperature
//! 1, capped at max_len), optionally joined by the reference, and
//! deduplicated. The subset distribution is
//! `P~(y) = P(y)^alpha / sum P(y')^alpha`, and the risk is `sum P~ * delta`
//! with `delta = -smoothed_sentence_bleu`. Gradients flow through the subset
//! probabilities only; the candidate sequences themselves are fixed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{adam_step, bleu::smoothed_sentence_bleu, OptimizerState, TrainError};
use crate::data::{Corpus, BOS, EOS};
use crate::model::{build_forward, forward, log_softmax_row, Parameters};
use crate::numerics::{backward, Op, SeededRng, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MrtConfig {
    pub n_candidates: usize,
    pub include_reference: bool,
    /// Sharpness of the renormalized subset distribution.
    pub sharpness: f64,
    /// Fixed fine-tuning learning rate (no schedule).
    pub lr: f64,
    pub steps: usize,
    pub sentences_per_step: usize,
    pub seed: u64,
}

impl Default for MrtConfig {
    fn default() -> Self {
        MrtConfig {
            n_candidates: 8,
            include_reference: true,
            sharpness: 0.005,
            lr: 1e-5,
            steps: 200,
            sentences_per_step: 8,
            seed: 1,
        }
    }
}

impl MrtConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_candidates < 1 {
            return Err(TrainError::Format("n_candidates must be >= 1".into()));
        }
        if self.sharpness <= 0.0 {
            return Err(TrainError::Format("sharpness must be > 0".into()));
        }
        Ok(())
    }
}

/// Ancestral sampling at temperature 1, starting from `<bos>`, stopping at
/// `<eos>` or the model's max_len.
pub fn sample_translation(
    params: &Parameters,
    src: &[u32],
    rng: &mut SeededRng,
    max_steps: usize,
) -> Result<Vec<u32>, TrainError> {
    let mut ys = vec![BOS];
    for _ in 0..max_steps {
        let (logits, _) = forward(params, src, &ys, false)?;
        let logps = log_softmax_row(logits.row(logits.rows() - 1));
        let u = rng.unit_f64();
        let mut cum = 0.0f64;
        let mut pick = logps.len() - 1;
        for (tok, &lp) in logps.iter().enumerate() {
            cum += lp.exp();
            if u < cum {
                pick = tok;
                break;
            }
        }
        ys.push(pick as u32);
        if pick as u32 == EOS || ys.len() >= params.config.max_len {
            break;
        }
    }
    Ok(ys[1..].to_vec())
}

/// Subset probabilities `P~` (sharpness-renormalized) from sequence
/// log-probs.
pub fn subset_probabilities(logps: &[f64], sharpness: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logps.iter().map(|l| l * sharpness).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

struct CandidateGraph {
    tape: crate::numerics::ComputeTape,
    logp_node: crate::numerics::NodeId,
    param_nodes: BTreeMap<String, crate::numerics::NodeId>,
    logp: f64,
}

/// Sequence log-prob of `candidate` (teacher-forced) plus the tape and logp
/// node for backprop.
fn candidate_logp(
    params: &Parameters,
    src: &[u32],
    candidate: &[u32],
) -> Result<CandidateGraph, TrainError> {
    let mut dec_in = Vec::with_capacity(candidate.len());
    dec_in.push(BOS);
    dec_in.extend_from_slice(&candidate[..candidate.len() - 1]);
    let mut build = build_forward(params, src, &dec_in, None)?;
    let node = build.tape.push(Op::GatherLogProbSum {
        logits: build.logits,
        ids: candidate.iter().map(|&t| t as usize).collect(),
    })?;
    let value = f64::from(build.tape.output(node).data()[0]);
    Ok(CandidateGraph {
        tape: build.tape,
        logp_node: node,
        param_nodes: build.param_nodes,
        logp: value,
    })
}

/// Builds the candidate subset for one sentence: samples, optional
/// reference, deduplicated in draw order.
fn build_subset(
    params: &Parameters,
    src: &[u32],
    reference: &[u32],
    cfg: &MrtConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<u32>>, TrainError> {
    let mut subset: Vec<Vec<u32>> = Vec::with_capacity(cfg.n_candidates + 1);
    for _ in 0..cfg.n_candidates {
        let cand = sample_translation(params, src, rng, params.config.max_len)?;
        if !cand.is_empty() && !subset.contains(&cand) {
            subset.push(cand);
        }
    }
    if cfg.include_reference && !subset.iter().any(|c| c == reference) {
        subset.push(reference.to_vec());
    }
    Ok(subset)
}

pub struct MrtRun {
    pub params: Parameters,
    /// (step, mean subset risk over the step's sentences).
    pub risk_log: Vec<(usize, f64)>,
    /// Sentences skipped because the whole subset collapsed to one candidate.
    pub skipped_sentences: usize,
}

/// Risk gradient with respect to a candidate's sequence log-prob:
/// `d risk / d logp_k = alpha * P~_k * (delta_k - risk)`.
pub fn risk_logp_gradient(probs: &[f64], deltas: &[f64], sharpness: f64, k: usize) -> f64 {
    let risk: f64 = probs.iter().zip(deltas).map(|(p, d)| p * d).sum();
    sharpness * probs[k] * (deltas[k] - risk)
}

/// MRT fine-tuning from an MLE-trained starting point.
pub fn mrt_finetune(
    cfg: &MrtConfig,
    start: Parameters,
    corpus: &Corpus,
) -> Result<MrtRun, TrainError> {
    cfg.validate()?;
    let mut params = start;
    let mut opt = OptimizerState::new(&params, 1, 1.0);
    let mut skipped = 0usize;
    let mut risk_log = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    let mut shuffle_rng = SeededRng::new(cfg.seed).substream(0x0a11);
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;

    for step in 1..=cfg.steps {
        let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut risk_acc = 0.0f64;
        let mut used = 0usize;
        for slot in 0..cfg.sentences_per_step {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            let (src, reference) = corpus.pairs[order[cursor]].clone();
            cursor += 1;

            let mut rng = SeededRng::new(cfg.seed)
                .substream(0x3a3a_0000u64 ^ ((step as u64) << 8) ^ slot as u64);
            let subset = build_subset(&params, &src, &reference, cfg, &mut rng)?;
            if subset.len() < 2 {
                // A single (or empty) subset has a constant distribution:
                // zero gradient, so the sentence is logged and skipped.
                skipped += 1;
                continue;
            }
            let mut graphs = Vec::with_capacity(subset.len());
            for cand in &subset {
                graphs.push(candidate_logp(&params, &src, cand)?);
            }
            let logps: Vec<f64> = graphs.iter().map(|g| g.logp).collect();
            let probs = subset_probabilities(&logps, cfg.sharpness);
            let deltas: Vec<f64> = subset
                .iter()
                .map(|cand| -smoothed_sentence_bleu(cand, &reference))
                .collect();
            let risk: f64 = probs.iter().zip(&deltas).map(|(p, d)| p * d).sum();
            risk_acc += risk;
            used += 1;

            // d risk / d theta = sum_k (d risk / d logp_k) * (d logp_k / d theta);
            // the candidate sequences themselves stay fixed.
            for (k, graph) in graphs.iter().enumerate() {
                let seed_grad = risk_logp_gradient(&probs, &deltas, cfg.sharpness, k);
                if seed_grad == 0.0 {
                    continue;
                }
                let grads = backward(&graph.tape, graph.logp_node)?;
                for (name, node) in &graph.param_nodes {
                    if let Some(g) = grads.get(node) {
                        let acc = grad_acc
                            .entry(name.clone())
                            .or_insert_with(|| Tensor::zeros(g.dims().to_vec()));
                        let w = seed_grad as f32;
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v * w;
                        }
                    }
                }
            }
        }
        if used > 0 {
            super::clip_by_global_norm(&mut grad_acc, 5.0);
            adam_step(&mut params, &grad_acc, &mut opt, Some(cfg.lr))?;
            risk_log.push((step, risk_acc / used as f64));
        } else {
            risk_log.push((step, 0.0));
        }
    }
    Ok(MrtRun {
        params,
        risk_log,
        skipped_sentences: skipped,
    })
}

/// Mean subset risk over `pairs` with fixed-seed sampling; the evaluation
/// analogue of the training objective.
pub fn expected_risk(
    params: &Parameters,
    cfg: &MrtConfig,
    pairs: &[(Vec<u32>, Vec<u32>)],
    seed: u64,
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, (src, reference)) in pairs.iter().enumerate() {
        let mut rng = SeededRng::new(seed).substream(0xe7a1_0000u64 ^ i as u64);
        let subset = build_subset(params, src, reference, cfg, &mut rng)?;
        if subset.is_empty() {
            continue;
        }
        let mut logps = Vec::with_capacity(subset.len());
        for cand in &subset {
            logps.push(candidate_logp(params, src, cand)?.logp);
        }
        let probs = subset_probabilities(&logps, cfg.sharpness);
        let risk: f64 = probs
            .iter()
            .zip(subset.iter().map(|c| -smoothed_sentence_bleu(c, reference)))
            .map(|(p, d)| p * d)
            .sum();
        total += risk;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::ComputeTape;

    #[test]
    fn subset_probabilities_sum_to_one() {
        let probs = subset_probabilities(&[-30.0, -35.0, -28.5], 0.005);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn single_candidate_distribution_is_constant_with_zero_gradient() {
        let probs = subset_probabilities(&[-12.0], 0.005);
        assert_eq!(probs, vec![1.0]);
        let deltas = [-0.4f64];
        let g = risk_logp_gradient(&probs, &deltas, 0.005, 0);
        assert!(g.abs() < 1e-15);
    }

    #[test]
    fn reference_in_subset_bounds_risk_below_worst_candidate() {
        // Two candidates, one equal to the reference (delta = -1):
        // risk is a convex combination, strictly below the worse delta.
        let probs = subset_probabilities(&[-10.0, -12.0], 0.5);
        let deltas = [-1.0f64, -0.2];
        let risk: f64 = probs.iter().zip(&deltas).map(|(p, d)| p * d).sum();
        assert!(risk < -0.2 && risk > -1.0);
    }

    /// The closed-form risk gradient must match tape autodiff through the
    /// stack -> scale -> softmax -> dot graph.
    #[test]
    fn risk_gradient_matches_tape_autodiff() {
        let logps = [-8.0f64, -11.0, -9.5];
        let deltas = [-0.9f64, -0.1, -0.5];
        let sharpness = 0.4f64;

        let mut tape = ComputeTape::new();
        let leaves: Vec<_> = logps
            .iter()
            .map(|&l| tape.constant(Tensor::scalar(l as f32)))
            .collect();
        let stacked = tape.push(Op::Stack1 { xs: leaves.clone() }).unwrap();
        let scaled = tape
            .push(Op::Scale {
                x: stacked,
                c: sharpness as f32,
            })
            .unwrap();
        let probs_node = tape
            .push(Op::Softmax {
                x: scaled,
                allowed: vec![3],
            })
            .unwrap();
        let risk_node = tape
            .push(Op::DotConst {
                x: probs_node,
                w: deltas.iter().map(|&d| d as f32).collect(),
            })
            .unwrap();
        let grads = backward(&tape, risk_node).unwrap();

        let probs = subset_probabilities(&logps, sharpness);
        for (k, leaf) in leaves.iter().enumerate() {
            let want = risk_logp_gradient(&probs, &deltas, sharpness, k);
            let got = f64::from(grads[leaf].data()[0]);
            assert!(
                (got - want).abs() < 1e-6,
                "candidate {k}: tape {got}, closed form {want}"
            );
        }
    }

    #[test]
    fn sampling_respects_max_len_and_determinism() {
        let cfg = ModelConfig {
            d_model: 16,
            d_ff: 32,
            max_len: 10,
            ..ModelConfig::desk(12)
        };
        let params = Parameters::init(&cfg, 3).unwrap();
        let mut rng1 = SeededRng::new(9);
        let mut rng2 = SeededRng::new(9);
        let a = sample_translation(&params, &[4, 5, 6], &mut rng1, 20).unwrap();
        let b = sample_translation(&params, &[4, 5, 6], &mut rng2, 20).unwrap();
        assert_eq!(a, b);
        assert!(a.len() < cfg.max_len);
    }
}
