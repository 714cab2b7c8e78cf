//! Smoothed sentence-level BLEU, the discrepancy measure for risk training.

use std::collections::HashMap;

const MAX_ORDER: usize = 4;

fn ngram_counts(ids: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 with add-1 smoothing on the n-gram precisions for n >= 2 and a
/// brevity penalty. The unigram precision is floored at 1/(2·len) when there
/// are no matches, so disjoint sequences score near zero but not exactly
/// zero. Returns a value in [0, 1].
pub fn smoothed_sentence_bleu(hyp: &[u32], reference: &[u32]) -> f64 {
    assert!(!hyp.is_empty() && !reference.is_empty(), "empty sequence");
    let mut log_sum = 0.0f64;
    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(hyp, n);
        let ref_counts = ngram_counts(reference, n);
        let total: usize = hyp_counts.values().sum();
        let matched: usize = hyp_counts
            .iter()
            .map(|(gram, &c)| c.min(ref_counts.get(gram).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            if matched == 0 {
                1.0 / (2.0 * total as f64)
            } else {
                matched as f64 / total as f64
            }
        } else {
            (matched + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln() / MAX_ORDER as f64;
    }
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    bp * log_sum.exp()
}
