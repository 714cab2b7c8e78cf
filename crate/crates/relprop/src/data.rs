//! Synthetic translation corpora, vocabulary, batching, and fixed-length
//! evaluation sets.
//!
//! Tasks are deterministic functions of the source so a toy model can reach
//! near-perfect accuracy, which keeps contribution analyses interpretable.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::SeededRng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// First content token id.
pub const FIRST_CONTENT: u32 = RESERVED as u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("eval set needs {requested} pairs of (S={s}, T={t}), found {found}")]
    InsufficientPairs {
        requested: usize,
        found: usize,
        s: usize,
        t: usize,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {what}")]
    Parse {
        path: String,
        line: usize,
        what: String,
    },
}

/// Token inventory with fixed reserved ids pad=0, bos=1, eos=2, unk=3.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Synthetic vocabulary of `size` tokens (reserved + `w4`, `w5`, ...).
    pub fn synthetic(size: usize) -> Result<Self, DataError> {
        if size <= RESERVED + 1 {
            return Err(DataError::Config(format!(
                "vocab size {size} leaves no content tokens (need > {})",
                RESERVED + 1
            )));
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for i in RESERVED..size {
            tokens.push(format!("w{i}"));
        }
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.len() < RESERVED
            || tokens[..RESERVED]
                .iter()
                .zip(RESERVED_TOKENS)
                .any(|(t, r)| t != r)
        {
            return Err(DataError::Config(
                "vocab must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(DataError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn content_size(&self) -> usize {
        self.tokens.len() - RESERVED
    }

    pub fn encode(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let body = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Self::from_tokens(tokens)
    }
}

/// Translation task generating the target from the source content tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// target = source
    Copy,
    /// target = reversed source
    Reverse,
    /// Fixed token permutation, then each consecutive window of 3 reversed.
    /// Window size 3 is the smallest producing non-monotonic alignment.
    CipherReorder,
}

impl Task {
    pub const ALL: [&'static str; 3] = ["copy", "reverse", "cipher_reorder"];
}

impl std::str::FromStr for Task {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "cipher_reorder" => Ok(Task::CipherReorder),
            _ => Err(DataError::Config(format!(
                "unknown task {s:?}; valid tasks: {}",
                Task::ALL.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::CipherReorder => "cipher_reorder",
        };
        write!(f, "{s}")
    }
}

/// The fixed content-token permutation used by `cipher_reorder`. Depends only
/// on the vocab size, so corpora over the same vocabulary share one cipher.
pub fn cipher_permutation(vocab_size: usize) -> Vec<u32> {
    let n = vocab_size - RESERVED;
    let mut perm: Vec<u32> = (0..n as u32).map(|i| i + FIRST_CONTENT).collect();
    let mut rng = SeededRng::new(0x1c3a_5f77_9b1d_e001);
    rng.shuffle(&mut perm);
    perm
}

fn apply_task(task: Task, content: &[u32], perm: &[u32]) -> Vec<u32> {
    match task {
        Task::Copy => content.to_vec(),
        Task::Reverse => content.iter().rev().copied().collect(),
        Task::CipherReorder => {
            let mapped: Vec<u32> = content
                .iter()
                .map(|&t| perm[(t - FIRST_CONTENT) as usize])
                .collect();
            let mut out = Vec::with_capacity(mapped.len());
            for chunk in mapped.chunks(3) {
                out.extend(chunk.iter().rev());
            }
            out
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: Task,
    pub n: usize,
    pub len_range: (usize, usize),
    pub vocab_size: usize,
    pub seed: u64,
    /// Append `<eos>` to sources. Defaults on: end-of-sequence influence is
    /// part of the position analyses.
    pub source_eos: bool,
}

impl GenConfig {
    pub fn new(
        task: Task,
        n: usize,
        len_range: (usize, usize),
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        GenConfig {
            task,
            n,
            len_range,
            vocab_size,
            seed,
            source_eos: true,
        }
    }
}

/// Sentence pairs as token-id sequences; every target ends with `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write(&self, vocab: &Vocab, path: &Path) -> Result<(), DataError> {
        let mut body = String::new();
        for (src, tgt) in &self.pairs {
            let s: Vec<&str> = src.iter().map(|&id| vocab.lookup(id)).collect();
            let t: Vec<&str> = tgt.iter().map(|&id| vocab.lookup(id)).collect();
            body.push_str(&s.join(" "));
            body.push('\t');
            body.push_str(&t.join(" "));
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(vocab: &Vocab, path: &Path) -> Result<Self, DataError> {
        let body = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut pairs = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut halves = line.split('\t');
            let (src, tgt) = match (halves.next(), halves.next()) {
                (Some(s), Some(t)) => (s, t),
                _ => {
                    return Err(DataError::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        what: "expected `source<TAB>target`".into(),
                    })
                }
            };
            let encode =
                |text: &str| -> Vec<u32> { text.split_whitespace().map(|t| vocab.encode(t)).collect() };
            let (src, tgt) = (encode(src), encode(tgt));
            if src.is_empty() || tgt.is_empty() {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    what: "empty side".into(),
                });
            }
            pairs.push((src, tgt));
        }
        Ok(Corpus { pairs })
    }
}

/// Deterministic synthetic corpus for the given task.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus, DataError> {
    let (min, max) = cfg.len_range;
    if min < 1 || max < min {
        return Err(DataError::Config(format!(
            "invalid length range ({min}, {max})"
        )));
    }
    if cfg.vocab_size <= RESERVED + 1 {
        return Err(DataError::Config(format!(
            "vocab size {} too small for content tokens",
            cfg.vocab_size
        )));
    }
    let n_content = cfg.vocab_size - RESERVED;
    let perm = cipher_permutation(cfg.vocab_size);
    let mut rng = SeededRng::new(cfg.seed);
    let mut pairs = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let len = rng.int_range(min, max);
        let content: Vec<u32> = (0..len)
            .map(|_| FIRST_CONTENT + rng.below(n_content) as u32)
            .collect();
        let mut tgt = apply_task(cfg.task, &content, &perm);
        tgt.push(EOS);
        let mut src = content;
        if cfg.source_eos {
            src.push(EOS);
        }
        pairs.push((src, tgt));
    }
    Ok(Corpus { pairs })
}

/// Corpus slice in which every source has exactly `s` tokens and every
/// target exactly `t` tokens (eos included).
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub s: usize,
    pub t: usize,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn check_lengths(&self) -> bool {
        self.pairs
            .iter()
            .all(|(src, tgt)| src.len() == self.s && tgt.len() == self.t)
    }
}

/// First `n` pairs with exactly (S, T) tokens, in corpus order.
pub fn make_eval_set(corpus: &Corpus, s: usize, t: usize, n: usize) -> Result<EvalSet, DataError> {
    let mut pairs = Vec::with_capacity(n);
    for (src, tgt) in &corpus.pairs {
        if pairs.len() == n {
            break;
        }
        if src.len() == s && tgt.len() == t {
            pairs.push((src.clone(), tgt.clone()));
        }
    }
    if pairs.len() < n {
        // Count the full corpus so the error reports total availability.
        let found = corpus
            .pairs
            .iter()
            .filter(|(src, tgt)| src.len() == s && tgt.len() == t)
            .count();
        return Err(DataError::InsufficientPairs {
            requested: n,
            found,
            s,
            t,
        });
    }
    Ok(EvalSet { pairs, s, t })
}

/// Sources kept in order; targets permuted by a seeded derangement attempt
/// (no target stays with its own source unless forced).
pub fn shuffle_targets(eval: &EvalSet, seed: u64) -> EvalSet {
    let n = eval.pairs.len();
    assert!(n >= 2, "shuffle_targets needs at least two pairs");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut perm);
    // Resolve fixed points by swapping with the next index cyclically.
    for i in 0..n {
        if perm[i] == i {
            let j = (i + 1) % n;
            perm.swap(i, j);
        }
    }
    let pairs = eval
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (src, _))| (src.clone(), eval.pairs[perm[i]].1.clone()))
        .collect();
    EvalSet {
        pairs,
        s: eval.s,
        t: eval.t,
    }
}

/// Padded batch with masks; mask is 1 over real tokens, 0 over padding.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<u8>>,
    pub tgt: Vec<Vec<u32>>,
    pub tgt_mask: Vec<Vec<u8>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Recovers the unpadded pair at `i` from the masks.
    pub fn pair(&self, i: usize) -> (Vec<u32>, Vec<u32>) {
        let src: Vec<u32> = self.src[i]
            .iter()
            .zip(&self.src_mask[i])
            .filter(|(_, &m)| m == 1)
            .map(|(&t, _)| t)
            .collect();
        let tgt: Vec<u32> = self.tgt[i]
            .iter()
            .zip(&self.tgt_mask[i])
            .filter(|(_, &m)| m == 1)
            .map(|(&t, _)| t)
            .collect();
        (src, tgt)
    }
}

fn pad_to(ids: &[u32], width: usize) -> (Vec<u32>, Vec<u8>) {
    let mut padded = ids.to_vec();
    let mut mask = vec![1u8; ids.len()];
    padded.resize(width, PAD);
    mask.resize(width, 0);
    (padded, mask)
}

/// Length-sorted chunking under a source-token budget, chunk order shuffled
/// by the epoch seed.
pub fn make_batches(
    corpus: &Corpus,
    tokens_per_batch: usize,
    seed: u64,
) -> Result<Vec<Batch>, DataError> {
    if let Some((src, _)) = corpus
        .pairs
        .iter()
        .find(|(s, _)| s.len() > tokens_per_batch)
    {
        return Err(DataError::Config(format!(
            "pair with {} source tokens exceeds batch budget {tokens_per_batch}",
            src.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    order.sort_by_key(|&i| {
        let (src, tgt) = &corpus.pairs[i];
        (src.len(), tgt.len(), i)
    });

    let mut chunks: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_tokens = 0usize;
    for i in order {
        let src_len = corpus.pairs[i].0.len();
        if !current.is_empty() && current_tokens + src_len > tokens_per_batch {
            chunks.push(std::mem::take(&mut current));
            current_tokens = 0;
        }
        current.push(i);
        current_tokens += src_len;
    }
    if !current.is_empty() {
        chunks.push(current);
    }

    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut chunks);

    let batches = chunks
        .into_iter()
        .map(|chunk| {
            let max_s = chunk
                .iter()
                .map(|&i| corpus.pairs[i].0.len())
                .max()
                .unwrap();
            let max_t = chunk
                .iter()
                .map(|&i| corpus.pairs[i].1.len())
                .max()
                .unwrap();
            let mut batch = Batch {
                src: Vec::with_capacity(chunk.len()),
                src_mask: Vec::with_capacity(chunk.len()),
                tgt: Vec::with_capacity(chunk.len()),
                tgt_mask: Vec::with_capacity(chunk.len()),
            };
            for i in chunk {
                let (src, tgt) = &corpus.pairs[i];
                let (ps, ms) = pad_to(src, max_s);
                let (pt, mt) = pad_to(tgt, max_t);
                batch.src.push(ps);
                batch.src_mask.push(ms);
                batch.tgt.push(pt);
                batch.tgt_mask.push(mt);
            }
            batch
        })
        .collect();
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_task_appends_eos() {
        let cfg = GenConfig {
            source_eos: false,
            ..GenConfig::new(Task::Copy, 5, (3, 3), 10, 1)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for (src, tgt) in &corpus.pairs {
            let mut want = src.clone();
            want.push(EOS);
            assert_eq!(tgt, &want);
        }
    }

    #[test]
    fn reverse_task_reverses_content() {
        let cfg = GenConfig {
            source_eos: false,
            ..GenConfig::new(Task::Reverse, 5, (4, 4), 12, 2)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for (src, tgt) in &corpus.pairs {
            let mut want: Vec<u32> = src.iter().rev().copied().collect();
            want.push(EOS);
            assert_eq!(tgt, &want);
        }
    }

    #[test]
    fn cipher_reorder_matches_hand_applied_rule() {
        let vocab_size = 12;
        let perm = cipher_permutation(vocab_size);
        let cfg = GenConfig {
            source_eos: false,
            ..GenConfig::new(Task::CipherReorder, 20, (4, 4), vocab_size, 3)
        };
        let corpus = generate_corpus(&cfg).unwrap();
        for (src, tgt) in &corpus.pairs {
            let p = |t: u32| perm[(t - FIRST_CONTENT) as usize];
            // [a b c d] -> [pi(c) pi(b) pi(a) pi(d) eos]
            let want = vec![p(src[2]), p(src[1]), p(src[0]), p(src[3]), EOS];
            assert_eq!(tgt, &want);
        }
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let cfg = GenConfig::new(Task::CipherReorder, 50, (2, 6), 16, 99);
        assert_eq!(
            generate_corpus(&cfg).unwrap(),
            generate_corpus(&cfg).unwrap()
        );
    }

    #[test]
    fn source_eos_switch_default_on() {
        let cfg = GenConfig::new(Task::Copy, 3, (2, 2), 10, 4);
        assert!(cfg.source_eos);
        let corpus = generate_corpus(&cfg).unwrap();
        for (src, _) in &corpus.pairs {
            assert_eq!(*src.last().unwrap(), EOS);
            assert_eq!(src.len(), 3);
        }
    }

    #[test]
    fn eval_set_filters_by_exact_lengths() {
        // Hand-built 10-pair corpus of mixed lengths.
        let mut pairs = Vec::new();
        for i in 0..10usize {
            let s_len = if i % 2 == 0 { 8 } else { 5 };
            let src = vec![FIRST_CONTENT; s_len];
            let mut tgt = vec![FIRST_CONTENT + 1; if i % 2 == 0 { 8 } else { 5 }];
            tgt.push(EOS);
            pairs.push((src, tgt));
        }
        let corpus = Corpus { pairs };
        let eval = make_eval_set(&corpus, 8, 9, 5).unwrap();
        assert_eq!(eval.len(), 5);
        assert!(eval.check_lengths());
    }

    #[test]
    fn eval_set_zero_request_is_empty() {
        let corpus = Corpus { pairs: vec![] };
        let eval = make_eval_set(&corpus, 4, 5, 0).unwrap();
        assert!(eval.is_empty());
    }

    #[test]
    fn eval_set_error_reports_found_count() {
        let corpus = Corpus {
            pairs: vec![(vec![4, 5], vec![4, 5, EOS]), (vec![4, 5], vec![4, 5, EOS])],
        };
        let err = make_eval_set(&corpus, 2, 3, 5).unwrap_err();
        match err {
            DataError::InsufficientPairs {
                found, requested, ..
            } => {
                assert_eq!(found, 2);
                assert_eq!(requested, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    fn toy_eval(n: usize) -> EvalSet {
        let pairs = (0..n)
            .map(|i| {
                let tok = FIRST_CONTENT + i as u32;
                (vec![tok, tok], vec![tok, EOS])
            })
            .collect();
        EvalSet { pairs, s: 2, t: 2 }
    }

    #[test]
    fn shuffle_two_pairs_swaps_targets() {
        let eval = toy_eval(2);
        let shuffled = shuffle_targets(&eval, 7);
        assert_eq!(shuffled.pairs[0].1, eval.pairs[1].1);
        assert_eq!(shuffled.pairs[1].1, eval.pairs[0].1);
        // Sources untouched and in order.
        assert_eq!(shuffled.pairs[0].0, eval.pairs[0].0);
        assert_eq!(shuffled.pairs[1].0, eval.pairs[1].0);
    }

    #[test]
    fn shuffle_preserves_target_multiset_and_avoids_fixed_points() {
        let eval = toy_eval(11);
        let shuffled = shuffle_targets(&eval, 123);
        let mut before: Vec<Vec<u32>> = eval.pairs.iter().map(|p| p.1.clone()).collect();
        let mut after: Vec<Vec<u32>> = shuffled.pairs.iter().map(|p| p.1.clone()).collect();
        before.sort();
        after.sort();
        assert_eq!(before, after);
        for (i, (_, tgt)) in shuffled.pairs.iter().enumerate() {
            assert_ne!(tgt, &eval.pairs[i].1, "fixed point at {i}");
        }
        // Determinism.
        let again = shuffle_targets(&eval, 123);
        assert_eq!(
            shuffled.pairs.iter().map(|p| &p.1).collect::<Vec<_>>(),
            again.pairs.iter().map(|p| &p.1).collect::<Vec<_>>()
        );
    }

    #[test]
    fn single_batch_when_budget_covers_everything() {
        let cfg = GenConfig::new(Task::Copy, 6, (2, 4), 10, 5);
        let corpus = generate_corpus(&cfg).unwrap();
        let total: usize = corpus.pairs.iter().map(|(s, _)| s.len()).sum();
        let batches = make_batches(&corpus, total, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 6);
    }

    #[test]
    fn batching_chunks_by_source_budget() {
        // Pair totals 2,2,9,9 (src lens 1,1,4,4): budget 4 keeps the two
        // short pairs together and isolates each long pair.
        let pairs = vec![
            (vec![4], vec![4, EOS]),
            (vec![5], vec![5, EOS]),
            (vec![4, 5, 6, 7], vec![4, 5, 6, 7, EOS]),
            (vec![7, 6, 5, 4], vec![7, 6, 5, 4, EOS]),
        ];
        let corpus = Corpus { pairs };
        let batches = make_batches(&corpus, 4, 1).unwrap();
        let mut sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 1, 2]);
        for b in &batches {
            let src_tokens: usize = (0..b.len()).map(|i| b.pair(i).0.len()).sum();
            assert!(src_tokens <= 4);
        }
    }

    #[test]
    fn oversized_pair_is_a_config_error() {
        let corpus = Corpus {
            pairs: vec![(vec![4, 5, 6], vec![4, EOS])],
        };
        assert!(matches!(
            make_batches(&corpus, 2, 0),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn padding_positions_carry_zero_mask() {
        let pairs = vec![(vec![4, 5], vec![4, EOS]), (vec![6], vec![6, 7, 8, EOS])];
        let corpus = Corpus { pairs };
        let batches = make_batches(&corpus, 100, 0).unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        for i in 0..b.len() {
            for (tok, mask) in b.src[i].iter().zip(&b.src_mask[i]) {
                assert_eq!(*mask == 0, *tok == PAD);
            }
            let (src, tgt) = b.pair(i);
            assert!(!src.contains(&PAD) && !tgt.contains(&PAD));
        }
    }

    #[test]
    fn vocab_roundtrip_through_file() {
        let dir = std::env::temp_dir().join(format!("relprop-vocab-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        let vocab = Vocab::synthetic(12).unwrap();
        vocab.write(&path).unwrap();
        let back = Vocab::read(&path).unwrap();
        assert_eq!(back.size(), 12);
        for id in 0..12u32 {
            assert_eq!(back.encode(vocab.lookup(id)), id);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn corpus_roundtrip_through_file() {
        let dir = std::env::temp_dir().join(format!("relprop-corpus-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.tsv");
        let vocab = Vocab::synthetic(16).unwrap();
        let cfg = GenConfig::new(Task::CipherReorder, 25, (2, 5), 16, 8);
        let corpus = generate_corpus(&cfg).unwrap();
        corpus.write(&vocab, &path).unwrap();
        let back = Corpus::read(&vocab, &path).unwrap();
        assert_eq!(corpus, back);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
