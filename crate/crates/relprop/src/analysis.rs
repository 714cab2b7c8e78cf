//! Contribution statistics over fixed-length evaluation sets.
//!
//! Every statistic consumes per-sentence `ContributionRecord`s produced by
//! the relevance engine, re-checking their invariants at ingestion. Degenerate
//! sentence-steps are skipped and counted, never silently dropped. All
//! aggregation is an ordered reduction, so outputs are deterministic given
//! (eval set, checkpoints, seeds, config).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{shuffle_targets, EvalSet, BOS};
use crate::lrp::{propagate_prediction, ContributionRecord, LrpConfig, LrpError};
use crate::model::{argmax, beam_decode, forward, greedy_decode, ModelError, Parameters};
use crate::train::Checkpoint;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("eval set violates its length invariant (S={s}, T={t})")]
    MixedLengths { s: usize, t: usize },
    #[error("checkpoint config mismatch on field {field}")]
    ConfigMismatch { field: String },
    #[error("record invariant violated: {0}")]
    BadRecord(String),
    #[error("empty evaluation set")]
    EmptyEval,
    #[error(transparent)]
    Lrp(#[from] LrpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which prefixes the decoder is fed during analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefixMode {
    /// Gold reference targets.
    Reference,
    /// The model's own translations (beam = 1 means greedy).
    Model { beam: usize },
    /// Shuffled in-set targets (fluent but unrelated to the source).
    Random { seed: u64 },
}

impl PrefixMode {
    pub fn tag(&self) -> &'static str {
        match self {
            PrefixMode::Reference => "reference",
            PrefixMode::Model { .. } => "model",
            PrefixMode::Random { .. } => "random",
        }
    }
}

/// One aggregate row: `index` is the generation step t, the source position
/// k, or the checkpoint step, depending on the statistic.
#[derive(Debug, Clone)]
pub struct AnalysisRow {
    pub index: usize,
    pub value: f64,
    pub count: usize,
    /// Marks rows the plots conventionally exclude (the t = 1 boundary).
    pub boundary: bool,
}

#[derive(Debug, Clone)]
pub struct StatReport {
    pub kind: &'static str,
    pub rows: Vec<AnalysisRow>,
    pub skipped_steps: usize,
    pub skipped_sentences: usize,
}

/// Contribution records for every sentence and step of an eval set under one
/// prefix mode.
pub struct RecordSet {
    pub s: usize,
    pub t: usize,
    /// `records[sentence][step-1]`.
    pub records: Vec<Vec<ContributionRecord>>,
    /// Sentences dropped before tracing (model decodes of the wrong length).
    pub skipped_sentences: usize,
}

/// Work-queue parallel map preserving input order. `threads <= 1` runs
/// inline.
pub fn parallel_map<T, R, F>(threads: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Mutex<Vec<(usize, T)>> = Mutex::new(items.into_iter().enumerate().rev().collect());
    let results: Mutex<Vec<Option<R>>> = {
        let n = queue.lock().unwrap().len();
        Mutex::new((0..n).map(|_| None).collect())
    };
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let item = queue.lock().unwrap().pop();
                match item {
                    Some((i, t)) => {
                        let r = f(t);
                        results.lock().unwrap()[i] = Some(r);
                    }
                    None => break,
                }
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

fn check_record(rec: &ContributionRecord, alpha_one: bool) -> Result<(), AnalysisError> {
    if (rec.total() - 1.0).abs() > 1e-6 {
        return Err(AnalysisError::BadRecord(format!(
            "step {}: total {} != 1",
            rec.step,
            rec.total()
        )));
    }
    if alpha_one
        && (rec.source.iter().any(|&v| v < 0.0) || rec.target.iter().any(|&v| v < 0.0))
    {
        return Err(AnalysisError::BadRecord(format!(
            "step {}: negative relevance under alpha=1",
            rec.step
        )));
    }
    for (j0, &v) in rec.target.iter().enumerate() {
        if j0 + 1 >= rec.step && v != 0.0 {
            return Err(AnalysisError::BadRecord(format!(
                "step {}: future prefix position {} carries {v}",
                rec.step,
                j0 + 1
            )));
        }
    }
    Ok(())
}

/// Builds the decoder prefix for one sentence under the given mode; `None`
/// skips the sentence (model decode of the wrong length).
fn resolve_prefix(
    params: &Parameters,
    mode: PrefixMode,
    src: &[u32],
    reference: &[u32],
    shuffled: Option<&[u32]>,
    t: usize,
) -> Result<Option<Vec<u32>>, AnalysisError> {
    match mode {
        PrefixMode::Reference => Ok(Some(reference.to_vec())),
        PrefixMode::Random { .. } => Ok(Some(shuffled.expect("shuffled targets").to_vec())),
        PrefixMode::Model { beam } => {
            let decoded = if beam <= 1 {
                greedy_decode(params, src, t + 4)?
            } else {
                beam_decode(params, src, beam, t + 4)?
            };
            if decoded.len() == t {
                Ok(Some(decoded))
            } else {
                Ok(None)
            }
        }
    }
}

/// Traces every sentence under `mode` and propagates relevance for all steps.
pub fn sentence_records(
    params: &Parameters,
    eval: &EvalSet,
    mode: PrefixMode,
    cfg: &LrpConfig,
    threads: usize,
) -> Result<RecordSet, AnalysisError> {
    if eval.is_empty() {
        return Err(AnalysisError::EmptyEval);
    }
    if !eval.check_lengths() {
        return Err(AnalysisError::MixedLengths {
            s: eval.s,
            t: eval.t,
        });
    }
    let shuffled = match mode {
        PrefixMode::Random { seed } => Some(shuffle_targets(eval, seed)),
        _ => None,
    };
    let alpha_one = cfg.beta == 0.0;
    let jobs: Vec<usize> = (0..eval.pairs.len()).collect();
    let outcomes = parallel_map(threads, jobs, |i| -> Result<Option<Vec<ContributionRecord>>, AnalysisError> {
        let (src, reference) = &eval.pairs[i];
        let shuffled_tgt = shuffled.as_ref().map(|s| s.pairs[i].1.as_slice());
        let Some(prefix) = resolve_prefix(params, mode, src, reference, shuffled_tgt, eval.t)?
        else {
            return Ok(None);
        };
        let mut dec_in = Vec::with_capacity(prefix.len());
        dec_in.push(BOS);
        dec_in.extend_from_slice(&prefix[..prefix.len() - 1]);
        let (_, trace) = forward(params, src, &dec_in, true)?;
        let trace = trace.expect("trace requested");
        let mut records = Vec::with_capacity(eval.t);
        for t in 1..=trace.steps {
            let rec = propagate_prediction(&trace, t, cfg)?;
            check_record(&rec, alpha_one)?;
            records.push(rec);
        }
        Ok(Some(records))
    });

    let mut records = Vec::with_capacity(eval.pairs.len());
    let mut skipped_sentences = 0usize;
    for outcome in outcomes {
        match outcome? {
            Some(r) => records.push(r),
            None => skipped_sentences += 1,
        }
    }
    if records.is_empty() {
        return Err(AnalysisError::EmptyEval);
    }
    Ok(RecordSet {
        s: eval.s,
        t: eval.t,
        records,
        skipped_sentences,
    })
}

/// Mean total source contribution per generation step (the t = 1 row always
/// equals 1 and is flagged as a boundary).
pub fn source_contribution_curve(set: &RecordSet) -> StatReport {
    let mut rows = Vec::with_capacity(set.t);
    for t in 1..=set.t {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for sentence in &set.records {
            sum += sentence[t - 1].source_total();
            count += 1;
        }
        rows.push(AnalysisRow {
            index: t,
            value: sum / count as f64,
            count,
            boundary: t == 1,
        });
    }
    StatReport {
        kind: "source_contribution",
        rows,
        skipped_steps: 0,
        skipped_sentences: set.skipped_sentences,
    }
}

const SOURCE_NORM_GUARD: f64 = 1e-9;

/// Per-sentence position influence: `(S/T) * sum_t r_t(x_k) / r_t(source)`
/// for each source position k, plus the number of guarded steps skipped.
pub fn position_influence_sentence(
    records: &[ContributionRecord],
    s: usize,
    t_len: usize,
) -> (Vec<f64>, usize) {
    let mut influence = vec![0.0f64; s];
    let mut skipped = 0usize;
    for rec in records {
        let denom = rec.source_total();
        if denom <= SOURCE_NORM_GUARD {
            skipped += 1;
            continue;
        }
        for (k, &r) in rec.source.iter().enumerate() {
            influence[k] += r / denom;
        }
    }
    let scale = s as f64 / t_len as f64;
    for v in &mut influence {
        *v *= scale;
    }
    (influence, skipped)
}

/// Mean per-position source influence over the set (Fig. 1b-style rows).
pub fn source_position_influence(set: &RecordSet) -> StatReport {
    let mut totals = vec![0.0f64; set.s];
    let mut skipped_steps = 0usize;
    for sentence in &set.records {
        let (influence, skipped) = position_influence_sentence(sentence, set.s, set.t);
        skipped_steps += skipped;
        for (k, v) in influence.iter().enumerate() {
            totals[k] += v;
        }
    }
    let n = set.records.len();
    let rows = totals
        .iter()
        .enumerate()
        .map(|(k, &v)| AnalysisRow {
            index: k + 1,
            value: v / n as f64,
            count: n,
            boundary: false,
        })
        .collect();
    StatReport {
        kind: "position_influence",
        rows,
        skipped_steps,
        skipped_sentences: set.skipped_sentences,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

fn entropy(normalized: impl Iterator<Item = f64>) -> f64 {
    let mut h = 0.0f64;
    for p in normalized {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Mean entropy of normalized source or target contributions per step,
/// natural log. Target-side rows start at t = 2 (empty prefix at t = 1).
pub fn contribution_entropy_curve(set: &RecordSet, side: Side) -> StatReport {
    let t_start = match side {
        Side::Source => 1,
        Side::Target => 2,
    };
    let mut rows = Vec::new();
    let mut skipped_steps = 0usize;
    for t in t_start..=set.t {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for sentence in &set.records {
            let rec = &sentence[t - 1];
            let (values, denom): (&[f64], f64) = match side {
                Side::Source => (&rec.source, rec.source_total()),
                Side::Target => (&rec.target[..t - 1], rec.target_total()),
            };
            if denom <= SOURCE_NORM_GUARD {
                skipped_steps += 1;
                continue;
            }
            sum += entropy(values.iter().map(|&v| v / denom));
            count += 1;
        }
        if count > 0 {
            rows.push(AnalysisRow {
                index: t,
                value: sum / count as f64,
                count,
                boundary: t == 1,
            });
        }
    }
    StatReport {
        kind: match side {
            Side::Source => "entropy_source",
            Side::Target => "entropy_target",
        },
        rows,
        skipped_steps,
        skipped_sentences: set.skipped_sentences,
    }
}

/// Joint (source + prefix) contribution distribution at one step, smoothed
/// and renormalized.
fn joint_distribution(rec: &ContributionRecord, eps: f64) -> Vec<f64> {
    let support = rec.source.len() + (rec.step - 1);
    let mut p = Vec::with_capacity(support);
    p.extend(rec.source.iter().copied());
    p.extend(rec.target[..rec.step - 1].iter().copied());
    let total: f64 = p.iter().sum::<f64>() + eps * support as f64;
    for v in &mut p {
        *v = (*v + eps) / total;
    }
    p
}

const KL_EPS: f64 = 1e-12;

/// KL divergence from the final model's token influence distributions to
/// each in-training checkpoint, averaged over steps and sentences. Rows are
/// indexed by checkpoint training step.
pub fn kl_convergence(
    eval: &EvalSet,
    series: &[Checkpoint],
    final_ckpt: &Checkpoint,
    cfg: &LrpConfig,
    threads: usize,
) -> Result<StatReport, AnalysisError> {
    for c in series {
        if c.config != final_ckpt.config {
            let field = serde_json::to_value(&c.config)
                .ok()
                .and_then(|a| {
                    serde_json::to_value(&final_ckpt.config).ok().map(|b| (a, b))
                })
                .and_then(|(a, b)| {
                    a.as_object().and_then(|ma| {
                        b.as_object().and_then(|mb| {
                            ma.iter()
                                .find(|(k, v)| mb.get(*k) != Some(v))
                                .map(|(k, _)| k.clone())
                        })
                    })
                })
                .unwrap_or_else(|| "config".into());
            return Err(AnalysisError::ConfigMismatch { field });
        }
    }
    let final_params = final_ckpt.to_params();
    let final_set = sentence_records(&final_params, eval, PrefixMode::Reference, cfg, threads)?;
    let mut rows = Vec::with_capacity(series.len());
    let mut skipped_steps = 0usize;
    for ckpt in series {
        let params = ckpt.to_params();
        let set = sentence_records(&params, eval, PrefixMode::Reference, cfg, threads)?;
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for (fin_sentence, cur_sentence) in final_set.records.iter().zip(&set.records) {
            for (fin, cur) in fin_sentence.iter().zip(cur_sentence) {
                let p = joint_distribution(fin, KL_EPS);
                let q = joint_distribution(cur, KL_EPS);
                let kl: f64 = p
                    .iter()
                    .zip(&q)
                    .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
                    .sum();
                sum += kl;
                count += 1;
            }
        }
        skipped_steps += set.skipped_sentences;
        rows.push(AnalysisRow {
            index: ckpt.step as usize,
            value: sum / count.max(1) as f64,
            count,
            boundary: false,
        });
    }
    Ok(StatReport {
        kind: "kl_convergence",
        rows,
        skipped_steps,
        skipped_sentences: final_set.skipped_sentences,
    })
}

/// Fraction of sentences whose argmax logit at step t equals the reference
/// token, under the given prefix mode.
pub fn accuracy_per_position(
    params: &Parameters,
    eval: &EvalSet,
    mode: PrefixMode,
    threads: usize,
) -> Result<StatReport, AnalysisError> {
    if !eval.check_lengths() {
        return Err(AnalysisError::MixedLengths {
            s: eval.s,
            t: eval.t,
        });
    }
    let shuffled = match mode {
        PrefixMode::Random { seed } => Some(shuffle_targets(eval, seed)),
        _ => None,
    };
    let jobs: Vec<usize> = (0..eval.pairs.len()).collect();
    let outcomes = parallel_map(threads, jobs, |i| -> Result<Option<Vec<bool>>, AnalysisError> {
        let (src, reference) = &eval.pairs[i];
        let shuffled_tgt = shuffled.as_ref().map(|s| s.pairs[i].1.as_slice());
        let Some(prefix) = resolve_prefix(params, mode, src, reference, shuffled_tgt, eval.t)?
        else {
            return Ok(None);
        };
        let mut dec_in = Vec::with_capacity(prefix.len());
        dec_in.push(BOS);
        dec_in.extend_from_slice(&prefix[..prefix.len() - 1]);
        let (logits, _) = forward(params, src, &dec_in, false)?;
        Ok(Some(
            (0..eval.t)
                .map(|r| argmax(logits.row(r)) == reference[r] as usize)
                .collect(),
        ))
    });
    let mut hits = vec![0usize; eval.t];
    let mut count = 0usize;
    let mut skipped_sentences = 0usize;
    for outcome in outcomes {
        match outcome? {
            Some(row) => {
                for (t, &hit) in row.iter().enumerate() {
                    if hit {
                        hits[t] += 1;
                    }
                }
                count += 1;
            }
            None => skipped_sentences += 1,
        }
    }
    let rows = hits
        .iter()
        .enumerate()
        .map(|(t, &h)| AnalysisRow {
            index: t + 1,
            value: h as f64 / count.max(1) as f64,
            count,
            boundary: false,
        })
        .collect();
    Ok(StatReport {
        kind: "accuracy",
        rows,
        skipped_steps: 0,
        skipped_sentences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    SourceContribution,
    PositionInfluence,
    EntropySource,
    EntropyTarget,
    Accuracy,
}

impl Statistic {
    pub const ALL: [&'static str; 5] = [
        "source-contribution",
        "position-influence",
        "entropy-source",
        "entropy-target",
        "accuracy",
    ];
}

impl std::str::FromStr for Statistic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source-contribution" => Ok(Statistic::SourceContribution),
            "position-influence" => Ok(Statistic::PositionInfluence),
            "entropy-source" => Ok(Statistic::EntropySource),
            "entropy-target" => Ok(Statistic::EntropyTarget),
            "accuracy" => Ok(Statistic::Accuracy),
            _ => Err(format!(
                "unknown statistic {s:?}; valid: {}",
                Statistic::ALL.join(", ")
            )),
        }
    }
}

/// Runs the selected statistics for each prefix mode and writes one CSV per
/// (statistic, mode) into `out_dir`. Returns the written paths and reports.
pub fn run_prefix_experiment(
    params: &Parameters,
    eval: &EvalSet,
    modes: &[PrefixMode],
    statistics: &[Statistic],
    cfg: &LrpConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<(PathBuf, StatReport)>, AnalysisError> {
    let mut outputs = Vec::new();
    for &mode in modes {
        let needs_records = statistics.iter().any(|s| *s != Statistic::Accuracy);
        let set = if needs_records {
            Some(sentence_records(params, eval, mode, cfg, threads)?)
        } else {
            None
        };
        for &stat in statistics {
            let report = match stat {
                Statistic::SourceContribution => {
                    source_contribution_curve(set.as_ref().expect("records"))
                }
                Statistic::PositionInfluence => {
                    source_position_influence(set.as_ref().expect("records"))
                }
                Statistic::EntropySource => {
                    contribution_entropy_curve(set.as_ref().expect("records"), Side::Source)
                }
                Statistic::EntropyTarget => {
                    contribution_entropy_curve(set.as_ref().expect("records"), Side::Target)
                }
                Statistic::Accuracy => accuracy_per_position(params, eval, mode, threads)?,
            };
            let path = out_dir.join(format!("{}_{}.csv", report.kind, mode.tag()));
            write_csv(&path, &report, Some(mode.tag()), None)?;
            outputs.push((path, report));
        }
    }
    Ok(outputs)
}

/// Positional formatting with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.00000000".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (8 - exp).clamp(0, 17) as usize;
    format!("{v:.decimals$}")
}

/// CSV layout: `index,value,count[,mode,checkpoint_step]`, UTF-8, LF.
pub fn write_csv(
    path: &Path,
    report: &StatReport,
    mode: Option<&str>,
    checkpoint_step: Option<u64>,
) -> Result<(), AnalysisError> {
    let io_err = |source: std::io::Error| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut header = String::from("index,value,count");
    if mode.is_some() {
        header.push_str(",mode");
    }
    if checkpoint_step.is_some() {
        header.push_str(",checkpoint_step");
    }
    let mut body = header;
    body.push('\n');
    for row in &report.rows {
        body.push_str(&format!(
            "{},{},{}",
            row.index,
            format_sig9(row.value),
            row.count
        ));
        if let Some(m) = mode {
            body.push(',');
            body.push_str(m);
        }
        if let Some(s) = checkpoint_step {
            body.push(',');
            body.push_str(&s.to_string());
        }
        body.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(body.as_bytes()).map_err(io_err)?;
    Ok(())
}
