//! Metrics and measurement: corpus BLEU at sentence and document granularity,
//! repetition ratios, exact-match scoring against the corpus cipher, the
//! wall-clock speed benchmark, and the context-removal probes.
//!
//! Metric computation is pure and fans out over documents through the batch
//! map; the speed benchmark owns its thread pool and must not run next to
//! other work.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

use crate::data::{segment_documents, Document, Lexicon, Segment, Vocab};
use crate::decode::{
    at_greedy_batch, teacher_max_len, translate_segment, translate_sentence_solo, DagRule,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::par::{par_map, with_threads};

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// Corpus-level BLEU with its working parts. `precisions` are the effective
/// per-n values entering the geometric mean, i.e. after zero-count smoothing.
#[derive(Debug, Clone)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    /// Modified n-gram precisions for n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    /// Score truncated to the first `n` precision orders (1 to 4);
    /// `cumulative(4)` equals `score`.
    pub fn cumulative(&self, n: usize) -> Result<f64> {
        if n == 0 || n > 4 {
            return Err(Error::contract("BleuReport::cumulative", "order must be 1 to 4"));
        }
        let ps = &self.precisions[..n];
        if ps.iter().any(|&p| p <= 0.0) {
            return Ok(0.0);
        }
        let mean = ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64;
        Ok(100.0 * self.brevity_penalty * mean.exp())
    }
}

fn ngram_counts<T: Hash + Eq>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over aligned hypothesis/reference pairs: clipped n-gram
/// precision on corpus totals, exponential brevity penalty. When a precision
/// for n >= 2 has a zero numerator it is smoothed add-one (numerator and
/// denominator); unigram precision is never smoothed, so disjoint outputs
/// still score 0.
pub fn bleu<T: Hash + Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(
            "bleu",
            format!("{} hypotheses vs {} references", hyps.len(), refs.len()),
        ));
    }
    if refs.is_empty() {
        return Err(Error::contract("bleu", "empty reference set"));
    }
    let mut clipped = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (h, r) in hyps.iter().zip(refs.iter()) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4usize {
            totals[n - 1] += h.len().saturating_sub(n - 1);
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                clipped[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if n >= 1 && clipped[n] == 0 {
            (clipped[n] + 1) as f64 / (totals[n] + 1) as f64
        } else if totals[n] == 0 {
            0.0
        } else {
            clipped[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.iter().any(|&p| p <= 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport { score, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Whole documents as translation units: each document's sentences are
/// concatenated before scoring.
pub fn d_bleu<T: Hash + Eq + Clone>(
    hyp_docs: &[Vec<Vec<T>>],
    ref_docs: &[Vec<Vec<T>>],
) -> Result<BleuReport> {
    let flat = |docs: &[Vec<Vec<T>>]| -> Vec<Vec<T>> {
        docs.iter().map(|d| d.iter().flatten().cloned().collect()).collect()
    };
    bleu(&flat(hyp_docs), &flat(ref_docs))
}

/// Sentence pairs as translation units: sentence k of each hypothesis
/// document scores against sentence k of its reference, so the output must
/// be sentence-aligned.
pub fn s_bleu<T: Hash + Eq + Clone>(
    hyp_docs: &[Vec<Vec<T>>],
    ref_docs: &[Vec<Vec<T>>],
) -> Result<BleuReport> {
    if hyp_docs.len() != ref_docs.len() {
        return Err(Error::contract(
            "s_bleu",
            format!("{} hypothesis vs {} reference documents", hyp_docs.len(), ref_docs.len()),
        ));
    }
    let bad: Vec<String> = hyp_docs
        .iter()
        .zip(ref_docs.iter())
        .enumerate()
        .filter(|(_, (h, r))| h.len() != r.len())
        .map(|(i, (h, r))| format!("{i} ({} vs {})", h.len(), r.len()))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Metric(format!(
            "sentence counts differ in documents: {}",
            bad.join(", ")
        )));
    }
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for (h, r) in hyp_docs.iter().zip(ref_docs.iter()) {
        for (hs, rs) in h.iter().zip(r.iter()) {
            hyps.push(hs.clone());
            refs.push(rs.clone());
        }
    }
    bleu(&hyps, &refs)
}

// ---------------------------------------------------------------------------
// Repetition
// ---------------------------------------------------------------------------

/// Average over segments of (n-gram occurrences beyond each n-gram's first) /
/// (total n-grams in the segment). Segments too short to hold an n-gram do
/// not enter the average.
pub fn repetition_ratio<T: Hash + Eq>(segments: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("repetition_ratio", "n must be at least 1"));
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for seg in segments {
        if seg.len() < n {
            continue;
        }
        let total = seg.len() - n + 1;
        let distinct = ngram_counts(seg, n).len();
        sum += (total - distinct) as f64 / total as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { sum / counted as f64 })
}

// ---------------------------------------------------------------------------
// Exact match against the corpus cipher
// ---------------------------------------------------------------------------

/// Position-wise exact-match counts against the unique correct target that
/// the cipher assigns to each document, split by whether the source type is
/// selector-dependent.
#[derive(Debug, Clone, Default)]
pub struct OracleScore {
    pub ambiguous_total: usize,
    pub ambiguous_correct: usize,
    pub unambiguous_total: usize,
    pub unambiguous_correct: usize,
}

impl OracleScore {
    /// Fraction of selector-dependent positions translated with the form the
    /// document's selector demands. Vacuously 1 when no such position exists.
    pub fn ambiguous_accuracy(&self) -> f64 {
        if self.ambiguous_total == 0 {
            1.0
        } else {
            self.ambiguous_correct as f64 / self.ambiguous_total as f64
        }
    }

    pub fn unambiguous_accuracy(&self) -> f64 {
        if self.unambiguous_total == 0 {
            1.0
        } else {
            self.unambiguous_correct as f64 / self.unambiguous_total as f64
        }
    }
}

/// Scores hypothesis documents against the cipher: every source token has
/// exactly one correct target form once the document's selector is known, and
/// the mapping is position-preserving, so position-wise comparison is exact.
pub fn oracle_accuracy(
    lexicon: &Lexicon,
    src_docs: &[Document],
    hyp_docs: &[Vec<Vec<String>>],
) -> Result<OracleScore> {
    if src_docs.len() != hyp_docs.len() {
        return Err(Error::contract(
            "oracle_accuracy",
            format!("{} source vs {} hypothesis documents", src_docs.len(), hyp_docs.len()),
        ));
    }
    let mut score = OracleScore::default();
    for (doc, hyp) in src_docs.iter().zip(hyp_docs.iter()) {
        let first = doc
            .src
            .first()
            .and_then(|s| s.first())
            .ok_or_else(|| Error::data(Some(doc.id.clone()), "empty document".to_string()))?;
        let mode = lexicon.selectors.iter().position(|s| s == first).ok_or_else(|| {
            Error::data(Some(doc.id.clone()), format!("'{first}' is not a selector token"))
        })?;
        for (s, sent) in doc.src.iter().enumerate() {
            for (p, tok) in sent.iter().enumerate() {
                if s == 0 && p == 0 {
                    continue;
                }
                let want = lexicon.translate(tok, mode)?;
                let got =
                    hyp.get(s).and_then(|hs| hs.get(p)).map(|t| t.as_str() == want).unwrap_or(false);
                if lexicon.is_ambiguous(tok) {
                    score.ambiguous_total += 1;
                    score.ambiguous_correct += got as usize;
                } else {
                    score.unambiguous_total += 1;
                    score.unambiguous_correct += got as usize;
                }
            }
        }
    }
    Ok(score)
}

// ---------------------------------------------------------------------------
// Document-level translation
// ---------------------------------------------------------------------------

/// One translated document, decoded back to token strings. Sentence-framed
/// variants fill one entry per source sentence; flat variants emit one chunk
/// per segment.
#[derive(Debug, Clone)]
pub struct TranslatedDoc {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    pub passes: usize,
    pub secs: f64,
    pub truncated: bool,
    pub failed_sentences: usize,
}

/// Segments the documents, translates every segment (fanned out over the
/// batch map), and reassembles per-document output in input order.
pub fn translate_documents(
    params: &ModelParams,
    cfg: &ModelConfig,
    docs: &[Document],
    vocab: &Vocab,
    rule: DagRule,
) -> Result<Vec<TranslatedDoc>> {
    let segments = segment_documents(docs, vocab, cfg.max_segment_len)?;
    let outs = par_map(&segments, |seg| translate_segment(params, cfg, seg, rule));

    let framed = cfg.variant.is_gtrans();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    let mut result: Vec<TranslatedDoc> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            by_id.insert(d.id.as_str(), i);
            TranslatedDoc {
                id: d.id.clone(),
                sentences: if framed { vec![Vec::new(); d.src.len()] } else { Vec::new() },
                passes: 0,
                secs: 0.0,
                truncated: false,
                failed_sentences: 0,
            }
        })
        .collect();

    for (seg, out) in segments.iter().zip(outs.into_iter()) {
        let t = out?;
        let di = *by_id
            .get(seg.doc_id.as_str())
            .ok_or_else(|| Error::contract("translate_documents", "segment from unknown document"))?;
        let doc = &mut result[di];
        doc.passes += t.passes;
        doc.secs += t.secs;
        doc.truncated |= t.truncated;
        doc.failed_sentences += t.failed_sentences;
        if framed {
            for (j, sent) in t.sentences.iter().enumerate() {
                doc.sentences[seg.first_sentence + j] = vocab.decode(sent)?;
            }
        } else {
            for sent in &t.sentences {
                doc.sentences.push(vocab.decode(sent)?);
            }
        }
    }
    Ok(result)
}

fn ref_docs_of(docs: &[Document]) -> Result<Vec<Vec<Vec<String>>>> {
    let missing: Vec<&str> = docs
        .iter()
        .filter(|d| d.tgt.is_empty())
        .map(|d| d.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::contract(
            "evaluation",
            format!("documents without references: {}", missing.join(", ")),
        ));
    }
    Ok(docs.iter().map(|d| d.tgt.clone()).collect())
}

fn hyp_sentences(docs: &[TranslatedDoc]) -> Vec<Vec<Vec<String>>> {
    docs.iter().map(|d| d.sentences.clone()).collect()
}

// ---------------------------------------------------------------------------
// Context-removal probes
// ---------------------------------------------------------------------------

/// One evaluation condition of the context probe.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub condition: String,
    pub s_bleu: f64,
    /// s-BLEU difference to the full condition; drops are negative.
    pub delta: f64,
    pub oracle: Option<OracleScore>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    /// full, target context removed, source context removed - in that order.
    pub rows: Vec<AblationRow>,
}

/// Measures how much surrounding text the model actually uses. Three decodes
/// of the same test set: the regular one; one where each sentence is decoded
/// in its own single-sentence frame while the encoder still sees the whole
/// segment (target-side context removed); and one where each sentence is
/// paired with nothing but its own source sentence (source-side context
/// removed).
pub fn context_ablation(
    params: &ModelParams,
    cfg: &ModelConfig,
    docs: &[Document],
    vocab: &Vocab,
    lexicon: Option<&Lexicon>,
    rule: DagRule,
) -> Result<AblationReport> {
    if !cfg.variant.is_gtrans() || cfg.variant.is_autoregressive() {
        return Err(Error::contract(
            "context_ablation",
            "sentence-framed parallel variant required",
        ));
    }
    let refs = ref_docs_of(docs)?;

    // Full context.
    let full = hyp_sentences(&translate_documents(params, cfg, docs, vocab, rule)?);

    // Target context removed: full source segment, isolated decoder frame.
    let segments = segment_documents(docs, vocab, cfg.max_segment_len)?;
    let solo: Vec<Result<Vec<Vec<usize>>>> = par_map(&segments, |seg| {
        (0..seg.k())
            .map(|j| translate_sentence_solo(params, cfg, seg, j, rule))
            .collect()
    });
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, d) in docs.iter().enumerate() {
        by_id.insert(d.id.as_str(), i);
    }
    let mut tgt_removed: Vec<Vec<Vec<String>>> =
        docs.iter().map(|d| vec![Vec::new(); d.src.len()]).collect();
    for (seg, out) in segments.iter().zip(solo.into_iter()) {
        let sents = out?;
        let di = by_id[seg.doc_id.as_str()];
        for (j, sent) in sents.iter().enumerate() {
            tgt_removed[di][seg.first_sentence + j] = vocab.decode(sent)?;
        }
    }

    // Source context removed: each sentence is its own one-sentence segment.
    let mut singles: Vec<Segment> = Vec::new();
    for doc in docs {
        for (s, sent) in doc.src.iter().enumerate() {
            let ids = vocab.encode(sent)?;
            let n = ids.len();
            singles.push(Segment {
                doc_id: doc.id.clone(),
                first_sentence: s,
                src: ids,
                src_tags: vec![0; n],
                src_spans: vec![(0, n)],
                tgt_sents: Vec::new(),
            });
        }
    }
    let single_out = par_map(&singles, |seg| translate_segment(params, cfg, seg, rule));
    let mut src_removed: Vec<Vec<Vec<String>>> =
        docs.iter().map(|d| vec![Vec::new(); d.src.len()]).collect();
    for (seg, out) in singles.iter().zip(single_out.into_iter()) {
        let t = out?;
        let di = by_id[seg.doc_id.as_str()];
        let sent = t.sentences.first().cloned().unwrap_or_default();
        src_removed[di][seg.first_sentence] = vocab.decode(&sent)?;
    }

    let conditions = [
        ("full", full),
        ("target context removed", tgt_removed),
        ("source context removed", src_removed),
    ];
    let mut rows = Vec::new();
    let mut base = 0.0;
    for (i, (name, hyps)) in conditions.iter().enumerate() {
        let sb = s_bleu(hyps, &refs)?.score;
        if i == 0 {
            base = sb;
        }
        let oracle = match lexicon {
            Some(lex) => Some(oracle_accuracy(lex, docs, hyps)?),
            None => None,
        };
        rows.push(AblationRow {
            condition: name.to_string(),
            s_bleu: sb,
            delta: sb - base,
            oracle,
        });
    }
    Ok(AblationReport { rows })
}

// ---------------------------------------------------------------------------
// Speed benchmark
// ---------------------------------------------------------------------------

/// One segment-length bucket of the benchmark. `budget` of `None` puts every
/// sentence in its own segment; otherwise documents are re-segmented under
/// that token budget.
#[derive(Debug, Clone)]
pub struct BucketSpec {
    pub label: String,
    pub budget: Option<usize>,
}

pub fn default_buckets() -> Vec<BucketSpec> {
    let mut v = vec![BucketSpec { label: "sent".into(), budget: None }];
    for b in [64usize, 128, 256, 512] {
        v.push(BucketSpec { label: b.to_string(), budget: Some(b) });
    }
    v
}

#[derive(Debug, Clone)]
pub struct SpeedRow {
    pub model: String,
    pub bucket: String,
    pub batch: usize,
    /// Median over repetitions of per-segment wall seconds.
    pub secs_per_segment: f64,
    /// Teacher seconds over this model's seconds, one-time setup included
    /// (amortized over the batch).
    pub speedup: f64,
    /// Same ratio on steady-state time alone.
    pub speedup_ex_init: f64,
}

#[derive(Debug, Clone)]
pub struct SpeedReport {
    pub rows: Vec<SpeedRow>,
    pub notices: Vec<String>,
    pub threads: usize,
}

/// Fixed column order for serialized reports.
pub const SPEED_CSV_HEADER: &str = "model,bucket,batch,secs_per_segment,speedup,speedup_ex_init";

pub fn speed_csv(report: &SpeedReport) -> String {
    let mut out = String::from(SPEED_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.4},{:.4}\n",
            r.model, r.bucket, r.batch, r.secs_per_segment, r.speedup, r.speedup_ex_init
        ));
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times one model on one workload: 1 warmup repetition, then `reps` timed
/// ones, each translating the whole batch; returns median per-segment secs.
fn time_workload(
    params: &ModelParams,
    cfg: &ModelConfig,
    work: &[&Segment],
    reps: usize,
    rule: DagRule,
) -> Result<f64> {
    let run = |params: &ModelParams| -> Result<f64> {
        let t0 = Instant::now();
        if cfg.variant.is_autoregressive() {
            let caps: Vec<usize> = work.iter().map(|s| teacher_max_len(s.src.len())).collect();
            at_greedy_batch(params, cfg, work, &caps)?;
        } else {
            let outs = par_map(work, |seg| translate_segment(params, cfg, seg, rule));
            for o in outs {
                o?;
            }
        }
        Ok(t0.elapsed().as_secs_f64() / work.len() as f64)
    };
    run(params)?; // warmup
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        times.push(run(params)?);
    }
    Ok(median(times))
}

/// Wall-clock comparison across models, segment-length buckets, and batch
/// sizes, pinned to `threads` workers. Per (bucket, batch): median of `reps`
/// repetitions after one warmup; speedups are teacher time over model time,
/// with and without the one-time setup cost (measured as materializing the
/// model's weights). Buckets or batches without enough segments are skipped
/// with a notice. The teacher's own timed row doubles as the baseline, so the
/// teacher's speedup is exactly 1.0 by self-comparison.
pub fn bench_speed(
    models: &[(String, &ModelParams, &ModelConfig)],
    docs: &[Document],
    vocab: &Vocab,
    buckets: &[BucketSpec],
    batches: &[usize],
    reps: usize,
    threads: usize,
    rule: DagRule,
) -> Result<SpeedReport> {
    if reps < 5 {
        return Err(Error::contract("bench_speed", "at least 5 timed repetitions"));
    }
    if models.is_empty() || batches.is_empty() || buckets.is_empty() {
        return Err(Error::contract("bench_speed", "models, buckets, and batches all required"));
    }
    let size_of = |c: &ModelConfig| (c.layers, c.d_model, c.heads, c.d_ff);
    let base_size = size_of(models[0].2);
    for (name, _, c) in models {
        if size_of(c) != base_size {
            return Err(Error::contract(
                "bench_speed",
                format!("model '{name}' differs in size; comparison would be unfair"),
            ));
        }
    }
    let teacher = models
        .iter()
        .find(|(_, _, c)| c.variant.is_autoregressive())
        .ok_or_else(|| Error::contract("bench_speed", "a teacher model is required as baseline"))?;

    with_threads(threads, || {
        let mut rows = Vec::new();
        let mut notices = Vec::new();

        // One-time setup per model: weights materialized into a fresh copy.
        let mut init_secs: HashMap<&str, f64> = HashMap::new();
        for (name, params, _) in models {
            let t0 = Instant::now();
            let copy = ModelParams::clone(params);
            let dt = t0.elapsed().as_secs_f64();
            std::hint::black_box(&copy);
            init_secs.insert(name.as_str(), dt);
        }
        for bucket in buckets {
            let segments: Vec<Segment> = match bucket.budget {
                Some(b) => segment_documents(docs, vocab, b)?,
                None => {
                    let mut singles = Vec::new();
                    for doc in docs {
                        for (s, sent) in doc.src.iter().enumerate() {
                            let ids = vocab.encode(sent)?;
                            let n = ids.len();
                            singles.push(Segment {
                                doc_id: doc.id.clone(),
                                first_sentence: s,
                                src: ids,
                                src_tags: vec![0; n],
                                src_spans: vec![(0, n)],
                                tgt_sents: Vec::new(),
                            });
                        }
                    }
                    singles
                }
            };
            if segments.is_empty() {
                notices.push(format!("bucket {}: no segments, skipped", bucket.label));
                continue;
            }
            for &batch in batches {
                if segments.len() < batch {
                    notices.push(format!(
                        "bucket {} batch {}: only {} segments, skipped",
                        bucket.label,
                        batch,
                        segments.len()
                    ));
                    continue;
                }
                let work: Vec<&Segment> = segments[..batch].iter().collect();
                let mut timed = Vec::with_capacity(models.len());
                for (name, params, cfg) in models {
                    timed.push((name, cfg, time_workload(params, cfg, &work, reps, rule)?));
                }
                // The baseline is the teacher's own measurement in this cell,
                // so the teacher row is exactly 1.0 by self-comparison.
                let t_teacher = timed
                    .iter()
                    .find(|(name, ..)| name.as_str() == teacher.0)
                    .map(|&(_, _, t)| t)
                    .expect("teacher was timed");
                let teacher_init = init_secs[teacher.0.as_str()];
                for (name, _, t_model) in timed {
                    let init = init_secs[name.as_str()];
                    let incl_teacher = teacher_init / batch as f64 + t_teacher;
                    let incl_model = init / batch as f64 + t_model;
                    rows.push(SpeedRow {
                        model: name.clone(),
                        bucket: bucket.label.clone(),
                        batch,
                        secs_per_segment: t_model,
                        speedup: incl_teacher / incl_model,
                        speedup_ex_init: t_teacher / t_model,
                    });
                }
            }
        }
        Ok(SpeedReport { rows, notices, threads: crate::par::effective_threads(threads) })
    })
}
