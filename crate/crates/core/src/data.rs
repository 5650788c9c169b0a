//! Corpora: synthetic document generation, vocabulary, JSONL I/O,
//! segmentation, and distillation plumbing.
//!
//! The synthetic task is a token cipher with document-level ambiguity. Each
//! source type maps to one target form, except for an `ambiguity`-controlled
//! fraction that maps to two forms; which form is correct depends on a
//! selector token placed at the start of the document's first sentence. A
//! model that only ever sees one sentence at a time cannot resolve those
//! tokens better than chance, which is exactly the lever the context
//! ablations measure. Translations are token-for-token, so reference lengths
//! equal source lengths sentence by sentence.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BLANK: usize = 3;
pub const UNK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<blank>", "<unk>"];

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token table with the five reserved ids pinned at the front.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Vocab {
        let tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuild from a serialized token list; the reserved prefix must be
    /// intact and entries unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::data(None, "vocabulary lacks reserved tokens".to_string()));
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::data(
                    None,
                    format!("reserved slot {i} holds '{}', expected '{want}'", tokens[i]),
                ));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::data(None, format!("duplicate token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn get_or_add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn require(&self, token: &str) -> Result<usize> {
        self.id(token)
            .ok_or_else(|| Error::data(None, format!("token '{token}' not in vocabulary")))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::contract("Vocab::token", format!("id {id} out of range")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.require(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(|s| s.to_string())).collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

/// Deterministic vocabulary over a document set: reserved ids, then every
/// distinct corpus token in sorted order.
pub fn build_vocab<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Vocab {
    let mut seen: Vec<&str> = Vec::new();
    for doc in docs {
        for sent in doc.src.iter().chain(doc.tgt.iter()) {
            for tok in sent {
                seen.push(tok);
            }
        }
    }
    seen.sort_unstable();
    seen.dedup();
    let mut vocab = Vocab::new();
    for tok in seen {
        vocab.get_or_add(tok);
    }
    vocab
}

// ---------------------------------------------------------------------------
// Documents and JSONL
// ---------------------------------------------------------------------------

/// One parallel document: sentence-split token strings on both sides. The
/// target may be absent (inference inputs); when present, sentence counts
/// must match.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Document {
    pub id: String,
    pub src: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tgt: Vec<Vec<String>>,
}

impl Document {
    fn validate(&self, loc: &str) -> Result<()> {
        if self.src.is_empty() || self.src.iter().any(|s| s.is_empty()) {
            return Err(Error::data(
                Some(loc.to_string()),
                "document needs at least one non-empty source sentence".to_string(),
            ));
        }
        if !self.tgt.is_empty() && self.tgt.len() != self.src.len() {
            return Err(Error::data(
                Some(loc.to_string()),
                format!("{} source vs {} target sentences", self.src.len(), self.tgt.len()),
            ));
        }
        Ok(())
    }
}

/// One JSON document per line. Line numbers go into error locations; CRLF
/// line ends are tolerated.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(Some(path.display().to_string()), e.to_string()))?;
    let reader = std::io::BufReader::new(file);
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| {
            Error::data(Some(format!("{}:{}", path.display(), lineno + 1)), e.to_string())
        })?;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), lineno + 1);
        let doc: Document = serde_json::from_str(trimmed)
            .map_err(|e| Error::data(Some(loc.clone()), e.to_string()))?;
        doc.validate(&loc)?;
        docs.push(doc);
    }
    if docs.is_empty() {
        return Err(Error::data(Some(path.display().to_string()), "empty corpus".to_string()));
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        serde_json::to_writer(&mut w, doc).map_err(|e| Error::data(None, e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    /// Number of content source types (selectors and reserved ids not
    /// counted).
    pub vocab_size: usize,
    pub k_sentences: usize,
    pub len_lo: usize,
    pub len_hi: usize,
    /// Fraction of source types with selector-dependent translations.
    pub ambiguity: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 64,
            k_sentences: 4,
            len_lo: 5,
            len_hi: 12,
            ambiguity: 0.5,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            seed: 11,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("need at least 2 content types".into()));
        }
        if self.k_sentences == 0 {
            return Err(Error::Config("documents need at least one sentence".into()));
        }
        if self.len_lo < 2 || self.len_lo > self.len_hi {
            return Err(Error::Config(
                "sentence length range must satisfy 2 <= lo <= hi".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config("ambiguity must lie in [0, 1]".into()));
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(Error::Config("all three splits need documents".into()));
        }
        Ok(())
    }
}

/// The cipher: every source type maps to one target form per selector mode.
/// Unambiguous types ignore the mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub selectors: [String; 2],
    pub selector_targets: [String; 2],
    /// source type -> per-mode target forms; unambiguous entries repeat the
    /// same form.
    pub entries: Vec<LexEntry>,
    #[serde(skip)]
    by_src: HashMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LexEntry {
    pub src: String,
    pub tgt: [String; 2],
    pub ambiguous: bool,
}

impl Lexicon {
    pub fn build(cfg: &SynthConfig) -> Lexicon {
        let n_amb = (cfg.ambiguity * cfg.vocab_size as f64).round() as usize;
        let entries: Vec<LexEntry> = (0..cfg.vocab_size)
            .map(|i| {
                let src = format!("w{i}");
                if i < n_amb {
                    LexEntry {
                        src,
                        tgt: [format!("w{i}ta"), format!("w{i}tb")],
                        ambiguous: true,
                    }
                } else {
                    LexEntry { src, tgt: [format!("w{i}t"), format!("w{i}t")], ambiguous: false }
                }
            })
            .collect();
        let mut lex = Lexicon {
            selectors: ["s0".to_string(), "s1".to_string()],
            selector_targets: ["s0t".to_string(), "s1t".to_string()],
            entries,
            by_src: HashMap::new(),
        };
        lex.reindex();
        lex
    }

    pub fn reindex(&mut self) {
        self.by_src =
            self.entries.iter().enumerate().map(|(i, e)| (e.src.clone(), i)).collect();
    }

    pub fn translate(&self, src: &str, mode: usize) -> Result<&str> {
        if let Some(k) = self.selectors.iter().position(|s| s == src) {
            return Ok(&self.selector_targets[k]);
        }
        let i = self
            .by_src
            .get(src)
            .ok_or_else(|| Error::data(None, format!("token '{src}' not in lexicon")))?;
        Ok(&self.entries[*i].tgt[mode.min(1)])
    }

    pub fn is_ambiguous(&self, src: &str) -> bool {
        self.by_src.get(src).map(|&i| self.entries[i].ambiguous).unwrap_or(false)
    }

    /// Both target forms of an ambiguous source type.
    pub fn forms(&self, src: &str) -> Option<&[String; 2]> {
        self.by_src.get(src).map(|&i| &self.entries[i].tgt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::data(None, e.to_string()))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Lexicon> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::data(Some(path.display().to_string()), e.to_string()))?;
        let mut lex: Lexicon =
            serde_json::from_str(&s).map_err(|e| Error::data(None, e.to_string()))?;
        lex.reindex();
        Ok(lex)
    }
}

pub struct SynthCorpus {
    pub train: Vec<Document>,
    pub dev: Vec<Document>,
    pub test: Vec<Document>,
    pub lexicon: Lexicon,
}

/// Seeded corpus generation. Each document draws one selector mode; the
/// selector token opens the first sentence and every ambiguous token in the
/// document resolves with that mode.
pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let lexicon = Lexicon::build(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gen_split = |prefix: &str, count: usize, rng: &mut ChaCha8Rng| -> Vec<Document> {
        (0..count)
            .map(|di| {
                let mode = rng.gen_range(0..2usize);
                let mut src = Vec::with_capacity(cfg.k_sentences);
                let mut tgt = Vec::with_capacity(cfg.k_sentences);
                for s in 0..cfg.k_sentences {
                    let len = rng.gen_range(cfg.len_lo..=cfg.len_hi);
                    let mut sent = Vec::with_capacity(len);
                    if s == 0 {
                        sent.push(lexicon.selectors[mode].clone());
                    }
                    while sent.len() < len {
                        let t = rng.gen_range(0..cfg.vocab_size);
                        sent.push(lexicon.entries[t].src.clone());
                    }
                    let out: Vec<String> = sent
                        .iter()
                        .map(|tok| lexicon.translate(tok, mode).expect("own lexicon").to_string())
                        .collect();
                    src.push(sent);
                    tgt.push(out);
                }
                Document { id: format!("{prefix}{di:05}"), src, tgt }
            })
            .collect()
    };
    let train = gen_split("train", cfg.n_train, &mut rng);
    let dev = gen_split("dev", cfg.n_dev, &mut rng);
    let test = gen_split("test", cfg.n_test, &mut rng);
    Ok(SynthCorpus { train, dev, test, lexicon })
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// A contiguous run of sentences from one document, flattened for the model:
/// token ids, per-token sentence tags, and per-sentence source spans. Target
/// sentences ride along when references exist.
#[derive(Debug, Clone)]
pub struct Segment {
    pub doc_id: String,
    pub first_sentence: usize,
    pub src: Vec<usize>,
    pub src_tags: Vec<usize>,
    pub src_spans: Vec<(usize, usize)>,
    pub tgt_sents: Vec<Vec<usize>>,
}

impl Segment {
    pub fn k(&self) -> usize {
        self.src_spans.len()
    }

    pub fn src_sent_lens(&self) -> Vec<usize> {
        self.src_spans.iter().map(|&(s, e)| e - s).collect()
    }

    pub fn flat_tgt(&self) -> Vec<usize> {
        self.tgt_sents.iter().flatten().copied().collect()
    }

    pub fn has_refs(&self) -> bool {
        !self.tgt_sents.is_empty()
    }
}

/// Greedy packing: sentences join the current segment until the source token
/// budget would overflow, then a new segment starts. A single sentence longer
/// than the budget is a data error.
pub fn segment_documents(
    docs: &[Document],
    vocab: &Vocab,
    max_segment_len: usize,
) -> Result<Vec<Segment>> {
    let mut segments = Vec::new();
    for doc in docs {
        let mut start = 0usize;
        while start < doc.src.len() {
            let mut end = start;
            let mut used = 0usize;
            while end < doc.src.len() {
                let len = doc.src[end].len();
                if len > max_segment_len {
                    return Err(Error::data(
                        Some(doc.id.clone()),
                        format!("sentence {end} has {len} tokens, budget {max_segment_len}"),
                    ));
                }
                if used + len > max_segment_len {
                    break;
                }
                used += len;
                end += 1;
            }
            let mut seg = Segment {
                doc_id: doc.id.clone(),
                first_sentence: start,
                src: Vec::with_capacity(used),
                src_tags: Vec::with_capacity(used),
                src_spans: Vec::with_capacity(end - start),
                tgt_sents: Vec::new(),
            };
            for (tag, s) in (start..end).enumerate() {
                let ids = vocab.encode(&doc.src[s])?;
                let span_start = seg.src.len();
                seg.src_tags.extend(std::iter::repeat(tag).take(ids.len()));
                seg.src.extend(ids);
                seg.src_spans.push((span_start, seg.src.len()));
                if !doc.tgt.is_empty() {
                    seg.tgt_sents.push(vocab.encode(&doc.tgt[s])?);
                }
            }
            segments.push(seg);
            start = end;
        }
    }
    Ok(segments)
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct DistillStats {
    pub segments: usize,
    pub sentences: usize,
    /// Sentences the teacher failed to produce (left empty in the output).
    pub failed_sentences: usize,
}

/// Re-targets a corpus with a teacher's outputs. The `translate` callback
/// maps one segment to one token-string sentence per source sentence; short
/// or failed outputs become empty sentences (counted), never misaligned ones,
/// so downstream consumers keep the sentence-count invariant.
pub fn distill_corpus<F>(
    docs: &[Document],
    vocab: &Vocab,
    max_segment_len: usize,
    mut translate: F,
) -> Result<(Vec<Document>, DistillStats)>
where
    F: FnMut(&Segment) -> Result<Vec<Vec<String>>>,
{
    let mut stats = DistillStats::default();
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        let segments = segment_documents(std::slice::from_ref(doc), vocab, max_segment_len)?;
        let mut tgt: Vec<Vec<String>> = Vec::with_capacity(doc.src.len());
        for seg in &segments {
            stats.segments += 1;
            let mut sents = translate(seg)?;
            sents.resize(seg.k(), Vec::new());
            for s in &sents {
                stats.sentences += 1;
                if s.is_empty() {
                    stats.failed_sentences += 1;
                }
            }
            tgt.extend(sents);
        }
        out.push(Document { id: doc.id.clone(), src: doc.src.clone(), tgt });
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn vocab_reserves_specials() {
        let v = Vocab::new();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<blank>"), Some(BLANK));
        let mut v = v;
        let a = v.get_or_add("hello");
        assert_eq!(a, 5);
        assert_eq!(v.get_or_add("hello"), 5);
    }

    #[test]
    fn vocab_rejects_broken_prefix() {
        assert!(Vocab::from_tokens(vec!["<pad>".into(), "x".into()]).is_err());
        let mut toks: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        toks.push("<pad>".into());
        assert!(Vocab::from_tokens(toks).is_err());
    }

    #[test]
    fn default_corpus_sizes() {
        let cfg = SynthConfig { n_train: 20, n_dev: 5, n_test: 5, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        assert_eq!(corpus.train.len(), 20);
        assert_eq!(corpus.dev.len(), 5);
        assert_eq!(corpus.test.len(), 5);
        for doc in &corpus.train {
            assert_eq!(doc.src.len(), cfg.k_sentences);
            assert_eq!(doc.tgt.len(), cfg.k_sentences);
            for (s, t) in doc.src.iter().zip(&doc.tgt) {
                assert_eq!(s.len(), t.len(), "cipher must be length preserving");
                assert!(s.len() >= cfg.len_lo && s.len() <= cfg.len_hi);
            }
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = SynthConfig { n_train: 8, n_dev: 2, n_test: 2, ..SynthConfig::default() };
        let a = gen_corpus(&cfg).unwrap();
        let b = gen_corpus(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn documents_resolve_with_one_selector() {
        let cfg = SynthConfig { n_train: 30, n_dev: 2, n_test: 2, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        for doc in &corpus.train {
            let sel = &doc.src[0][0];
            let mode = corpus.lexicon.selectors.iter().position(|s| s == sel).unwrap();
            for (s, t) in doc.src.iter().zip(&doc.tgt) {
                for (stok, ttok) in s.iter().zip(t) {
                    assert_eq!(
                        corpus.lexicon.translate(stok, mode).unwrap(),
                        ttok,
                        "token must follow the document selector"
                    );
                }
            }
        }
    }

    #[test]
    fn ambiguity_rate_near_half() {
        let cfg = SynthConfig { n_train: 60, n_dev: 2, n_test: 2, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let mut content = 0usize;
        let mut ambiguous = 0usize;
        for doc in &corpus.train {
            for sent in &doc.src {
                for tok in sent {
                    if corpus.lexicon.selectors.contains(tok) {
                        continue;
                    }
                    content += 1;
                    if corpus.lexicon.is_ambiguous(tok) {
                        ambiguous += 1;
                    }
                }
            }
        }
        let rate = ambiguous as f64 / content as f64;
        // Binomial noise over ~20k draws stays well within 5 points.
        assert!((rate - 0.5).abs() < 0.05, "ambiguous rate {rate}");
    }

    #[test]
    fn corpus_roundtrip() {
        let cfg = SynthConfig { n_train: 5, n_dev: 2, n_test: 2, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_corpus(&path, &corpus.train).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(corpus_ids(&back), corpus_ids(&corpus.train));
        assert_eq!(back, corpus.train);
    }

    fn corpus_ids(docs: &[Document]) -> Vec<&str> {
        docs.iter().map(|d| d.id.as_str()).collect()
    }

    #[test]
    fn read_reports_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"src\":[[\"x\"]]}\nnot json\n").unwrap();
        let err = read_corpus(&path).unwrap_err().to_string();
        assert!(err.contains(":2"), "error should name line 2, got: {err}");
    }

    #[test]
    fn read_tolerates_crlf_and_blank_lines() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("crlf.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"src\":[[\"x\"]]}\r\n\r\n").unwrap();
        let docs = read_corpus(&path).unwrap();
        assert_eq!(docs.len(), 1);
        assert!(docs[0].tgt.is_empty());
    }

    #[test]
    fn segments_respect_budget_and_split() {
        // Two sentences of 400 and 200 tokens with a 512 budget must split.
        let long: Vec<String> = (0..400).map(|i| format!("w{}", i % 8)).collect();
        let short: Vec<String> = (0..200).map(|i| format!("w{}", i % 8)).collect();
        let doc = Document {
            id: "d".into(),
            src: vec![long.clone(), short.clone()],
            tgt: vec![long, short],
        };
        let vocab = build_vocab(std::iter::once(&doc));
        let segs = segment_documents(&[doc], &vocab, 512).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].src.len(), 400);
        assert_eq!(segs[1].src.len(), 200);
        assert_eq!(segs[1].first_sentence, 1);
        assert_eq!(segs[1].src_tags[0], 0, "tags restart per segment");
    }

    #[test]
    fn segment_rejects_oversized_sentence() {
        let giant: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let doc = Document { id: "d".into(), src: vec![giant.clone()], tgt: vec![giant] };
        let vocab = build_vocab(std::iter::once(&doc));
        assert!(segment_documents(&[doc], &vocab, 32).is_err());
    }

    #[test]
    fn segment_packs_multiple_sentences() {
        let cfg = SynthConfig { n_train: 4, n_dev: 1, n_test: 1, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let vocab = build_vocab(corpus.train.iter());
        let segs = segment_documents(&corpus.train, &vocab, 512).unwrap();
        // Default docs are ~24-48 tokens, so each fits one segment whole.
        assert_eq!(segs.len(), corpus.train.len());
        for seg in &segs {
            assert_eq!(seg.k(), cfg.k_sentences);
            assert_eq!(seg.src_tags.len(), seg.src.len());
            assert_eq!(seg.tgt_sents.len(), seg.k());
            let lens = seg.src_sent_lens();
            for (j, &(s, e)) in seg.src_spans.iter().enumerate() {
                assert_eq!(e - s, lens[j]);
                for t in s..e {
                    assert_eq!(seg.src_tags[t], j);
                }
            }
        }
    }

    #[test]
    fn distill_with_perfect_teacher_is_identity() {
        let cfg = SynthConfig { n_train: 6, n_dev: 1, n_test: 1, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let vocab = build_vocab(corpus.train.iter());
        let refs: HashMap<String, Vec<Vec<String>>> =
            corpus.train.iter().map(|d| (d.id.clone(), d.tgt.clone())).collect();
        let (distilled, stats) = distill_corpus(&corpus.train, &vocab, 512, |seg| {
            let whole = &refs[&seg.doc_id];
            Ok(whole[seg.first_sentence..seg.first_sentence + seg.k()].to_vec())
        })
        .unwrap();
        assert_eq!(distilled, corpus.train);
        assert_eq!(stats.failed_sentences, 0);
        assert_eq!(stats.sentences, 6 * cfg.k_sentences);
    }

    #[test]
    fn distill_pads_failed_sentences() {
        let cfg = SynthConfig { n_train: 2, n_dev: 1, n_test: 1, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let vocab = build_vocab(corpus.train.iter());
        let (distilled, stats) =
            distill_corpus(&corpus.train, &vocab, 512, |_seg| Ok(vec![vec!["w0t".to_string()]]))
                .unwrap();
        // Teacher returned one sentence for a 4-sentence segment: the rest
        // must come back empty rather than shifting alignment.
        assert_eq!(distilled[0].tgt.len(), cfg.k_sentences);
        assert!(stats.failed_sentences > 0);
        assert_eq!(distilled[0].tgt[1], Vec::<String>::new());
    }

    #[test]
    fn distill_collapses_to_one_modality() {
        // A teacher that always picks form 'a' produces a corpus with no 'b'
        // forms at ambiguous positions.
        let cfg = SynthConfig { n_train: 10, n_dev: 1, n_test: 1, ..SynthConfig::default() };
        let corpus = gen_corpus(&cfg).unwrap();
        let vocab = build_vocab(corpus.train.iter());
        let lex = corpus.lexicon.clone();
        let (distilled, _) = distill_corpus(&corpus.train, &vocab, 512, |seg| {
            let mut out = Vec::with_capacity(seg.k());
            for &(s, e) in &seg.src_spans {
                let sent: Vec<String> = (s..e)
                    .map(|t| {
                        let tok = vocab.token(seg.src[t]).unwrap();
                        lex.translate(tok, 0).unwrap().to_string()
                    })
                    .collect();
                out.push(sent);
            }
            Ok(out)
        })
        .unwrap();
        for doc in &distilled {
            for sent in &doc.tgt {
                for tok in sent {
                    assert!(!tok.ends_with("tb"), "form 'b' leaked into {tok}");
                }
            }
        }
    }
}
