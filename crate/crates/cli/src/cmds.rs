//! Subcommand implementations. Each function takes its parsed flags, does the
//! work through the library crate, and writes its outputs plus a resolved
//! config file; `main` maps errors to exit codes.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use natdoc_core::data::{
    build_vocab, gen_corpus, read_corpus, segment_documents, write_corpus, Document, Segment,
    Vocab,
};
use natdoc_core::decode::{at_greedy, teacher_max_len, DagRule};
use natdoc_core::eval::{
    bench_speed, d_bleu, repetition_ratio, s_bleu, speed_csv, translate_documents, BleuReport,
    BucketSpec, SpeedReport, SPEED_CSV_HEADER,
};
use natdoc_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams, Variant};
use natdoc_core::par::{par_map, with_threads};
use natdoc_core::train::{train, StepLog};
use natdoc_core::{Error, Result};

use crate::config::{
    resolve_model, resolve_synth, resolve_train, ConfigFile, DataFlags, ModelFlags, Resolved,
    TrainFlags,
};
use crate::svg::{line_chart, Series};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RuleArg {
    Lookahead,
    Greedy,
}

impl RuleArg {
    fn rule(self) -> DagRule {
        match self {
            RuleArg::Lookahead => DagRule::Lookahead,
            RuleArg::Greedy => DagRule::Greedy,
        }
    }
    fn name(self) -> &'static str {
        match self {
            RuleArg::Lookahead => "lookahead",
            RuleArg::Greedy => "greedy",
        }
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::empty()),
    }
}

/// Outputs are never silently overwritten.
fn refuse_existing(paths: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in paths {
        if p.exists() {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::data(Some(path.display().to_string()), e.to_string()))
}

/// Resolved-config text with a comment header recording the invocation.
fn resolved_text(command: &str, notes: &[(String, String)], resolved: &Resolved) -> String {
    let mut s = format!("# natdoc {command}\n");
    for (k, v) in notes {
        s.push_str(&format!("# {k}: {v}\n"));
    }
    let body = resolved.render();
    if !body.is_empty() {
        s.push('\n');
        s.push_str(&body);
    }
    s
}

/// Sibling path for a file output's resolved config.
fn config_sibling(out: &Path) -> PathBuf {
    out.with_extension("config")
}

fn model_section(cfg: &ModelConfig, out: &mut Resolved) {
    out.set("model", "variant", cfg.variant.as_str());
    out.set("model", "layers", cfg.layers);
    out.set("model", "heads", cfg.heads);
    out.set("model", "d_model", cfg.d_model);
    out.set("model", "d_ff", cfg.d_ff);
    out.set("model", "global_layers", cfg.global_layers);
    out.set("model", "max_sentence_len", cfg.max_sentence_len);
    out.set("model", "max_segment_len", cfg.max_segment_len);
    out.set("model", "ctc_upsample", cfg.ctc_upsample);
    out.set("model", "dag_lambda", cfg.dag_lambda);
    out.set("model", "seed", cfg.seed);
}

fn read_corpus_dir(dir: &Path) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>)> {
    let train = read_corpus(&dir.join("train.jsonl"))?;
    let opt = |name: &str| -> Result<Vec<Document>> {
        let p = dir.join(name);
        if p.exists() {
            read_corpus(&p)
        } else {
            Ok(Vec::new())
        }
    };
    Ok((train, opt("dev.jsonl")?, opt("test.jsonl")?))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct GenArgs {
    /// Output directory for train/dev/test files, lexicon, and manifest
    #[arg(long)]
    pub out: PathBuf,
    /// Sectioned key=value config file (see --help of the top command)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus generator seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of word types with mode-dependent translations, 0 to 1
    #[arg(long)]
    pub ambiguity: Option<f64>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub k_sentences: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_dev: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub ambiguity: f64,
    pub k_sentences: usize,
    pub vocab_size: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Word types with two mode-dependent translations.
    pub ambiguous_types: usize,
    /// Distinct surface forms over all splits, reserved tokens included.
    pub observed_vocab: usize,
}

pub fn gen_data(a: &GenArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let mut resolved = Resolved::default();
    let flags = DataFlags {
        vocab_size: a.vocab_size,
        k_sentences: a.k_sentences,
        ambiguity: a.ambiguity,
        n_train: a.n_train,
        n_dev: a.n_dev,
        n_test: a.n_test,
        seed: a.seed,
    };
    let synth = resolve_synth(&file, &flags, &mut resolved)?;

    std::fs::create_dir_all(&a.out)?;
    let names = ["train.jsonl", "dev.jsonl", "test.jsonl", "lexicon.json", "manifest.json", "config.resolved"];
    let paths: Vec<PathBuf> = names.iter().map(|n| a.out.join(n)).collect();
    refuse_existing(&paths, a.force)?;

    let corpus = gen_corpus(&synth)?;
    write_corpus(&paths[0], &corpus.train)?;
    write_corpus(&paths[1], &corpus.dev)?;
    write_corpus(&paths[2], &corpus.test)?;
    corpus.lexicon.save(&paths[3])?;

    let all = corpus.train.iter().chain(&corpus.dev).chain(&corpus.test);
    let vocab = build_vocab(all);
    let manifest = CorpusManifest {
        seed: synth.seed,
        ambiguity: synth.ambiguity,
        k_sentences: synth.k_sentences,
        vocab_size: synth.vocab_size,
        n_train: synth.n_train,
        n_dev: synth.n_dev,
        n_test: synth.n_test,
        ambiguous_types: corpus.lexicon.entries.iter().filter(|e| e.ambiguous).count(),
        observed_vocab: vocab.len(),
    };
    write_text(
        &paths[4],
        &serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(None, e.to_string()))?,
    )?;
    let notes = vec![("out".to_string(), a.out.display().to_string())];
    write_text(&paths[5], &resolved_text("gen-data", &notes, &resolved))?;
    println!(
        "wrote {}/{}/{} documents to {} (observed vocab {})",
        synth.n_train,
        synth.n_dev,
        synth.n_test,
        a.out.display(),
        vocab.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus directory from gen-data
    #[arg(long)]
    pub corpus: PathBuf,
    /// Replace the training split with a distilled file (dev/test stay raw)
    #[arg(long)]
    pub distilled: Option<PathBuf>,
    /// Model variant; may also come from model.variant in --config
    #[arg(long)]
    pub variant: Option<String>,
    /// Output directory for checkpoint and log
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    /// Shuffle and glancing seed (parameter init comes from model.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

/// One line of train_log.jsonl.
#[derive(Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_dbleu: Option<f64>,
}

impl LogLine {
    fn from_step(l: &StepLog) -> LogLine {
        LogLine { step: l.step, loss: l.loss, lr: l.lr, skipped: l.skipped, dev_dbleu: l.dev_dbleu }
    }
}

pub fn train_cmd(a: &TrainArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let (mut train_docs, dev_docs, test_docs) = read_corpus_dir(&a.corpus)?;
    if let Some(d) = &a.distilled {
        train_docs = read_corpus(d)?;
    }
    let vocab = build_vocab(train_docs.iter().chain(&dev_docs).chain(&test_docs));

    let mut resolved = Resolved::default();
    let mcfg = resolve_model(
        &file,
        vocab.len(),
        &ModelFlags { variant: a.variant.clone(), seed: None },
        &mut resolved,
    )?;
    let tcfg = resolve_train(
        &file,
        &TrainFlags {
            lr: a.lr,
            steps: a.steps,
            batch_tokens: a.batch_tokens,
            seed: a.seed,
            eval_every: a.eval_every,
        },
        &mut resolved,
    )?;

    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let log_path = a.out.join("train_log.jsonl");
    let cfg_path = a.out.join("config.resolved");
    refuse_existing(&[ckpt.clone(), log_path.clone(), cfg_path.clone()], a.force)?;

    let mut notes = vec![
        ("corpus".to_string(), a.corpus.display().to_string()),
        ("vocab".to_string(), vocab.len().to_string()),
    ];
    if let Some(d) = &a.distilled {
        notes.push(("distilled".to_string(), d.display().to_string()));
    }
    write_text(&cfg_path, &resolved_text("train", &notes, &resolved))?;

    let log_file = std::fs::File::create(&log_path)?;
    let mut log = std::io::BufWriter::new(log_file);
    let mut io_err: Option<std::io::Error> = None;

    let mut params = ModelParams::init(&mcfg)?;
    let report = train(&mut params, &mcfg, &tcfg, &train_docs, &dev_docs, &vocab, |l| {
        if io_err.is_some() {
            return;
        }
        let line = serde_json::to_string(&LogLine::from_step(l)).expect("log line");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_err = Some(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::data(Some(log_path.display().to_string()), e.to_string()));
    }

    save_checkpoint(&ckpt, &mcfg, &vocab, &report.best)?;
    if report.best_dev > f64::NEG_INFINITY {
        println!(
            "{}: {} steps, best dev d-BLEU {:.2} at step {}, {} segments skipped",
            mcfg.variant.as_str(),
            tcfg.steps,
            report.best_dev,
            report.best_step,
            report.skipped_total
        );
    } else {
        println!(
            "{}: {} steps (no dev split), {} segments skipped",
            mcfg.variant.as_str(),
            tcfg.steps,
            report.skipped_total
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct DistillArgs {
    /// Trained autoregressive teacher checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory; the training split is re-targeted
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output corpus file (jsonl)
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = default_threads())]
    pub threads: usize,
    #[arg(long)]
    pub force: bool,
}

pub fn distill(a: &DistillArgs) -> Result<()> {
    let (cfg, vocab, params) = load_checkpoint(&a.checkpoint)?;
    if !cfg.variant.is_autoregressive() {
        return Err(Error::Config(format!(
            "distillation needs an autoregressive teacher, got variant '{}'",
            cfg.variant.as_str()
        )));
    }
    let docs = read_corpus(&a.corpus.join("train.jsonl"))?;
    refuse_existing(&[a.out.clone(), config_sibling(&a.out)], a.force)?;

    let segments = segment_documents(&docs, &vocab, cfg.max_segment_len)?;
    let outs: Vec<Result<Vec<Vec<String>>>> = with_threads(a.threads, || {
        par_map(&segments, |seg| {
            let t = at_greedy(&params, &cfg, seg, teacher_max_len(seg.src.len()))?;
            t.sentences.iter().map(|s| vocab.decode(s)).collect()
        })
    });
    let mut by_key: HashMap<(&str, usize), Vec<Vec<String>>> = HashMap::new();
    for (seg, out) in segments.iter().zip(outs) {
        by_key.insert((seg.doc_id.as_str(), seg.first_sentence), out?);
    }

    let (kd_docs, stats) = natdoc_core::data::distill_corpus(
        &docs,
        &vocab,
        cfg.max_segment_len,
        |seg: &Segment| {
            by_key
                .get(&(seg.doc_id.as_str(), seg.first_sentence))
                .cloned()
                .ok_or_else(|| Error::contract("distill", "segmentation mismatch"))
        },
    )?;
    write_corpus(&a.out, &kd_docs)?;

    let mut resolved = Resolved::default();
    model_section(&cfg, &mut resolved);
    let notes = vec![
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("corpus".to_string(), a.corpus.display().to_string()),
        ("threads".to_string(), a.threads.to_string()),
    ];
    write_text(&config_sibling(&a.out), &resolved_text("distill", &notes, &resolved))?;
    println!(
        "distilled {} segments / {} sentences ({} failed) into {}",
        stats.segments,
        stats.sentences,
        stats.failed_sentences,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input corpus file (jsonl); references, if present, are ignored
    #[arg(long)]
    pub input: PathBuf,
    /// Output translations file (jsonl), one document per input document
    #[arg(long)]
    pub out: PathBuf,
    /// Add wall-clock and pass-count fields to every output line
    #[arg(long)]
    pub timed: bool,
    /// Path selection rule for graph variants
    #[arg(long, value_enum, default_value = "lookahead")]
    pub rule: RuleArg,
    #[arg(long, default_value_t = default_threads())]
    pub threads: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Serialize)]
struct HypLine<'a> {
    id: &'a str,
    src: &'a Vec<Vec<String>>,
    tgt: &'a Vec<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    secs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    passes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truncated: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_sentences: Option<usize>,
}

pub fn translate(a: &TranslateArgs) -> Result<()> {
    let (cfg, vocab, params) = load_checkpoint(&a.checkpoint)?;
    let docs = read_corpus(&a.input)?;
    refuse_existing(&[a.out.clone(), config_sibling(&a.out)], a.force)?;

    let outs = with_threads(a.threads, || {
        translate_documents(&params, &cfg, &docs, &vocab, a.rule.rule())
    })?;

    let file = std::fs::File::create(&a.out)?;
    let mut w = std::io::BufWriter::new(file);
    let mut failed = 0usize;
    let mut truncated = 0usize;
    for (doc, t) in docs.iter().zip(&outs) {
        failed += t.failed_sentences;
        truncated += t.truncated as usize;
        let line = HypLine {
            id: &t.id,
            src: &doc.src,
            tgt: &t.sentences,
            secs: a.timed.then_some(t.secs),
            passes: a.timed.then_some(t.passes),
            truncated: a.timed.then_some(t.truncated),
            failed_sentences: a.timed.then_some(t.failed_sentences),
        };
        let js = serde_json::to_string(&line).map_err(|e| Error::data(None, e.to_string()))?;
        writeln!(w, "{js}")?;
    }
    w.flush()?;

    let mut resolved = Resolved::default();
    model_section(&cfg, &mut resolved);
    let notes = vec![
        ("checkpoint".to_string(), a.checkpoint.display().to_string()),
        ("input".to_string(), a.input.display().to_string()),
        ("rule".to_string(), a.rule.name().to_string()),
        ("threads".to_string(), a.threads.to_string()),
        ("timed".to_string(), a.timed.to_string()),
    ];
    write_text(&config_sibling(&a.out), &resolved_text("translate", &notes, &resolved))?;
    println!(
        "translated {} documents with {} ({} failed sentences, {} truncated segments)",
        outs.len(),
        cfg.variant.as_str(),
        failed,
        truncated
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct EvaluateArgs {
    /// Hypothesis corpus (jsonl; the tgt field is scored)
    #[arg(long)]
    pub hyp: PathBuf,
    /// Reference corpus (jsonl; the tgt field is the reference)
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// sent scores aligned sentence pairs; doc scores whole documents
    #[arg(long, value_enum, default_value = "doc")]
    pub granularity: Granularity,
    /// Also write the report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Granularity {
    Doc,
    Sent,
}

/// The metric report, printed as key = value lines and written as JSON.
#[derive(Serialize, Deserialize)]
pub struct EvalRecord {
    pub granularity: String,
    pub documents: usize,
    pub bleu: f64,
    /// Cumulative scores truncated to orders 1..4; the last equals `bleu`.
    pub bleu_by_order: [f64; 4],
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub repetition_1: f64,
    pub repetition_2: f64,
}

fn aligned_targets(
    hyps: &[Document],
    refs: &[Document],
) -> Result<(Vec<Vec<Vec<String>>>, Vec<Vec<Vec<String>>>)> {
    let mut by_id: HashMap<&str, &Document> = HashMap::new();
    for r in refs {
        if by_id.insert(r.id.as_str(), r).is_some() {
            return Err(Error::Metric(format!("duplicate reference document '{}'", r.id)));
        }
    }
    if hyps.len() != refs.len() {
        return Err(Error::Metric(format!(
            "document counts differ: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut h = Vec::with_capacity(hyps.len());
    let mut r = Vec::with_capacity(hyps.len());
    for doc in hyps {
        let rd = by_id
            .get(doc.id.as_str())
            .ok_or_else(|| Error::Metric(format!("no reference document '{}'", doc.id)))?;
        h.push(doc.tgt.clone());
        r.push(rd.tgt.clone());
    }
    Ok((h, r))
}

pub fn make_record(
    hyps: &[Document],
    refs: &[Document],
    granularity: Granularity,
) -> Result<EvalRecord> {
    let (h, r) = aligned_targets(hyps, refs)?;
    let report: BleuReport = match granularity {
        Granularity::Doc => d_bleu(&h, &r)?,
        Granularity::Sent => s_bleu(&h, &r)?,
    };
    let flat: Vec<Vec<String>> =
        h.iter().map(|doc| doc.iter().flatten().cloned().collect()).collect();
    let repetition_1 = repetition_ratio(&flat, 1)?;
    let repetition_2 = repetition_ratio(&flat, 2)?;
    let mut bleu_by_order = [0.0; 4];
    for (n, slot) in bleu_by_order.iter_mut().enumerate() {
        *slot = report.cumulative(n + 1)?;
    }
    Ok(EvalRecord {
        granularity: match granularity {
            Granularity::Doc => "doc".to_string(),
            Granularity::Sent => "sent".to_string(),
        },
        documents: hyps.len(),
        bleu: report.score,
        bleu_by_order,
        precisions: report.precisions,
        brevity_penalty: report.brevity_penalty,
        hyp_len: report.hyp_len,
        ref_len: report.ref_len,
        repetition_1,
        repetition_2,
    })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let hyps = read_corpus(&a.hyp)?;
    let refs = read_corpus(&a.reference)?;
    let rec = make_record(&hyps, &refs, a.granularity)?;

    println!("granularity = {}", rec.granularity);
    println!("documents = {}", rec.documents);
    println!("bleu = {:.4}", rec.bleu);
    for n in 1..=4 {
        println!("bleu-{n} = {:.4}", rec.bleu_by_order[n - 1]);
    }
    for n in 1..=4 {
        println!("precision-{n} = {:.6}", rec.precisions[n - 1]);
    }
    println!("brevity_penalty = {:.6}", rec.brevity_penalty);
    println!("hyp_len = {}", rec.hyp_len);
    println!("ref_len = {}", rec.ref_len);
    println!("repetition-1 = {:.6}", rec.repetition_1);
    println!("repetition-2 = {:.6}", rec.repetition_2);

    if let Some(out) = &a.out {
        let js =
            serde_json::to_string_pretty(&rec).map_err(|e| Error::data(None, e.to_string()))?;
        write_text(out, &js)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct BenchArgs {
    /// Checkpoints to compare; include the autoregressive teacher as baseline
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Documents to translate (jsonl)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for CSV and charts
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated re-segmentation budgets; `sent` means one sentence per segment
    #[arg(long, default_value = "sent,64,128,256,512")]
    pub buckets: String,
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    pub batch_sizes: Vec<usize>,
    /// Timed repetitions per cell; the median is reported
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Fixed worker count used for every cell
    #[arg(long, default_value_t = default_threads())]
    pub threads: usize,
    #[arg(long, value_enum, default_value = "lookahead")]
    pub rule: RuleArg,
    #[arg(long)]
    pub force: bool,
}

fn parse_buckets(s: &str) -> Result<Vec<BucketSpec>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        if part == "sent" {
            out.push(BucketSpec { label: "sent".to_string(), budget: None });
        } else {
            let budget: usize = part
                .parse()
                .map_err(|_| Error::Config(format!("bad bucket '{part}': use `sent` or a token budget")))?;
            out.push(BucketSpec { label: part.to_string(), budget: Some(budget) });
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no buckets given".to_string()));
    }
    Ok(out)
}

/// Reference bucket for the batch chart: the largest numeric label present.
fn headline_bucket(report: &SpeedReport) -> Option<String> {
    report
        .rows
        .iter()
        .filter_map(|r| r.bucket.parse::<usize>().ok())
        .max()
        .map(|b| b.to_string())
        .or_else(|| report.rows.first().map(|r| r.bucket.clone()))
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    if a.checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints given".to_string()));
    }
    let mut loaded: Vec<(String, ModelConfig, Vocab, ModelParams)> = Vec::new();
    for p in &a.checkpoints {
        let (cfg, vocab, params) = load_checkpoint(p)?;
        let mut name = cfg.variant.as_str().to_string();
        let dups = loaded.iter().filter(|(n, ..)| n.split('#').next() == Some(name.as_str())).count();
        if dups > 0 {
            name = format!("{name}#{}", dups + 1);
        }
        loaded.push((name, cfg, vocab, params));
    }
    let (c0, v0) = (&loaded[0].1, &loaded[0].2);
    for (name, cfg, vocab, _) in &loaded {
        if (cfg.layers, cfg.d_model, cfg.heads, cfg.d_ff)
            != (c0.layers, c0.d_model, c0.heads, c0.d_ff)
        {
            return Err(Error::Config(format!(
                "refusing an unfair comparison: '{name}' has a different model size \
                 ({}x{}d, {} heads, ff {}) than '{}' ({}x{}d, {} heads, ff {})",
                cfg.layers, cfg.d_model, cfg.heads, cfg.d_ff,
                loaded[0].0, c0.layers, c0.d_model, c0.heads, c0.d_ff
            )));
        }
        if vocab.tokens() != v0.tokens() {
            return Err(Error::Config(format!(
                "refusing an unfair comparison: '{name}' was trained on a different vocabulary",
            )));
        }
    }
    if !loaded.iter().any(|(_, cfg, ..)| cfg.variant.is_autoregressive()) {
        return Err(Error::Config(
            "include the autoregressive teacher checkpoint as the speed baseline".to_string(),
        ));
    }

    let docs = read_corpus(&a.corpus)?;
    let buckets = parse_buckets(&a.buckets)?;
    let models: Vec<(String, &ModelParams, &ModelConfig)> =
        loaded.iter().map(|(n, c, _, p)| (n.clone(), p, c)).collect();

    std::fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join("speed.csv");
    let len_svg = a.out.join("speed_vs_length.svg");
    let batch_svg = a.out.join("speed_vs_batch.svg");
    let notices_path = a.out.join("notices.txt");
    let cfg_path = a.out.join("config.resolved");
    refuse_existing(
        &[csv_path.clone(), len_svg.clone(), batch_svg.clone(), notices_path.clone(), cfg_path.clone()],
        a.force,
    )?;

    let report = bench_speed(
        &models,
        &docs,
        v0,
        &buckets,
        &a.batch_sizes,
        a.reps,
        a.threads,
        a.rule.rule(),
    )?;

    write_text(&csv_path, &speed_csv(&report))?;
    write_text(&notices_path, &(report.notices.join("\n") + "\n"))?;

    let min_batch = a.batch_sizes.iter().copied().min().unwrap_or(1);
    let labels: Vec<String> = buckets.iter().map(|b| b.label.clone()).collect();
    let mut length_series = Vec::new();
    for (name, ..) in &loaded {
        let points: Vec<(usize, f64)> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, lab)| {
                report
                    .rows
                    .iter()
                    .find(|r| &r.model == name && &r.bucket == lab && r.batch == min_batch)
                    .map(|r| (i, r.speedup))
            })
            .collect();
        if !points.is_empty() {
            length_series.push(Series {
                name: name.clone(),
                class: format!("series-{name}"),
                points,
                dashed: false,
            });
        }
    }
    write_text(
        &len_svg,
        &line_chart(
            &format!("speedup over teacher by segment budget, batch {min_batch}"),
            "speedup",
            &labels,
            &length_series,
        ),
    )?;

    let batch_labels: Vec<String> = a.batch_sizes.iter().map(|b| b.to_string()).collect();
    let mut batch_series = Vec::new();
    if let Some(bucket) = headline_bucket(&report) {
        for (name, ..) in &loaded {
            let rows: Vec<_> = report
                .rows
                .iter()
                .filter(|r| &r.model == name && r.bucket == bucket)
                .collect();
            let with_init: Vec<(usize, f64)> = batch_labels
                .iter()
                .enumerate()
                .filter_map(|(i, lab)| {
                    rows.iter().find(|r| r.batch.to_string() == *lab).map(|r| (i, r.speedup))
                })
                .collect();
            let ex_init: Vec<(usize, f64)> = batch_labels
                .iter()
                .enumerate()
                .filter_map(|(i, lab)| {
                    rows.iter()
                        .find(|r| r.batch.to_string() == *lab)
                        .map(|r| (i, r.speedup_ex_init))
                })
                .collect();
            if !with_init.is_empty() {
                batch_series.push(Series {
                    name: format!("{name} (with init)"),
                    class: format!("series-{name}"),
                    points: with_init,
                    dashed: false,
                });
                batch_series.push(Series {
                    name: format!("{name} (no init)"),
                    class: format!("series-{name}-ex-init"),
                    points: ex_init,
                    dashed: true,
                });
            }
        }
        write_text(
            &batch_svg,
            &line_chart(
                &format!("speedup over teacher by batch size, budget {bucket}"),
                "speedup",
                &batch_labels,
                &batch_series,
            ),
        )?;
    } else {
        write_text(&batch_svg, &line_chart("speedup over teacher by batch size", "speedup", &batch_labels, &[]))?;
    }

    let mut resolved = Resolved::default();
    model_section(c0, &mut resolved);
    let notes = vec![
        ("corpus".to_string(), a.corpus.display().to_string()),
        ("checkpoints".to_string(), a.checkpoints.len().to_string()),
        ("buckets".to_string(), a.buckets.clone()),
        (
            "batch_sizes".to_string(),
            a.batch_sizes.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("reps".to_string(), a.reps.to_string()),
        ("threads".to_string(), report.threads.to_string()),
        ("rule".to_string(), a.rule.name().to_string()),
    ];
    write_text(&cfg_path, &resolved_text("bench", &notes, &resolved))?;

    for n in &report.notices {
        println!("notice: {n}");
    }
    println!(
        "benchmarked {} models over {} buckets x {} batch sizes ({} rows) into {}",
        models.len(),
        buckets.len(),
        a.batch_sizes.len(),
        report.rows.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ReportArgs {
    /// Run directory holding eval/, train/, and bench/ outputs
    #[arg(long)]
    pub dir: PathBuf,
    /// Output file (default: <dir>/report.md)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_eval_name(stem: &str) -> Option<(Variant, &'static str, &'static str)> {
    let (rest, gran) = stem.rsplit_once('_')?;
    let gran = match gran {
        "doc" => "doc",
        "sent" => "sent",
        _ => return None,
    };
    let (name, cond) = rest.rsplit_once('_')?;
    let cond = match cond {
        "raw" => "raw",
        "kd" => "kd",
        _ => return None,
    };
    let variant = Variant::parse(name).ok()?;
    Some((variant, cond, gran))
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "n/a".to_string(),
    }
}

pub fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut records: BTreeMap<(String, String, String), EvalRecord> = BTreeMap::new();
    let eval_dir = a.dir.join("eval");
    if eval_dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&eval_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let Some((variant, cond, gran)) = parse_eval_name(stem) else { continue };
            let text = std::fs::read_to_string(&path)?;
            let rec: EvalRecord = serde_json::from_str(&text)
                .map_err(|e| Error::data(Some(path.display().to_string()), e.to_string()))?;
            records.insert(
                (variant.as_str().to_string(), cond.to_string(), gran.to_string()),
                rec,
            );
        }
    }

    // Headline speedup per model: smallest batch, largest numeric bucket.
    let mut speedups: BTreeMap<String, f64> = BTreeMap::new();
    let csv_path = a.dir.join("bench").join("speed.csv");
    if csv_path.is_file() {
        let text = std::fs::read_to_string(&csv_path)?;
        let mut lines = text.lines();
        if lines.next() == Some(SPEED_CSV_HEADER) {
            let mut best: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
            for line in lines {
                let cols: Vec<&str> = line.split(',').collect();
                if cols.len() != 6 {
                    continue;
                }
                let (model, bucket, batch, speedup) = (cols[0], cols[1], cols[2], cols[4]);
                let Ok(batch) = batch.parse::<usize>() else { continue };
                let Ok(speedup) = speedup.parse::<f64>() else { continue };
                let bucket_rank = bucket.parse::<usize>().unwrap_or(0);
                let entry = best.entry(model.to_string()).or_insert((usize::MAX, 0, 1.0));
                if batch < entry.0 || (batch == entry.0 && bucket_rank >= entry.1) {
                    *entry = (batch, bucket_rank, speedup);
                }
            }
            for (model, (_, _, s)) in best {
                speedups.insert(model, s);
            }
        }
    }

    let mut dev_best: BTreeMap<(String, String), f64> = BTreeMap::new();
    let train_dir = a.dir.join("train");
    if train_dir.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&train_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for run in entries {
            let Some(stem) = run.file_name().and_then(|s| s.to_str()) else { continue };
            let Some((name, cond)) = stem.rsplit_once('_') else { continue };
            if cond != "raw" && cond != "kd" {
                continue;
            }
            let Ok(variant) = Variant::parse(name) else { continue };
            let log = run.join("train_log.jsonl");
            if !log.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&log)?;
            let best = text
                .lines()
                .filter_map(|l| serde_json::from_str::<LogLine>(l).ok())
                .filter_map(|l| l.dev_dbleu)
                .fold(f64::NEG_INFINITY, f64::max);
            if best > f64::NEG_INFINITY {
                dev_best.insert((variant.as_str().to_string(), cond.to_string()), best);
            }
        }
    }

    let mut rows = String::new();
    let mut included = 0usize;
    for variant in Variant::ALL {
        let name = variant.as_str();
        let has_any = records.keys().any(|(v, _, _)| v == name)
            || dev_best.keys().any(|(v, _)| v == name)
            || speedups.contains_key(name);
        if !has_any {
            continue;
        }
        included += 1;
        let get = |cond: &str, gran: &str| -> Option<f64> {
            records.get(&(name.to_string(), cond.to_string(), gran.to_string())).map(|r| r.bleu)
        };
        let rep2 = records
            .get(&(name.to_string(), "raw".to_string(), "doc".to_string()))
            .or_else(|| records.get(&(name.to_string(), "kd".to_string(), "doc".to_string())))
            .map(|r| r.repetition_2);
        rows.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            name,
            fmt_cell(get("raw", "doc")),
            fmt_cell(get("raw", "sent")),
            fmt_cell(get("kd", "doc")),
            fmt_cell(get("kd", "sent")),
            rep2.map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".to_string()),
            fmt_cell(dev_best.get(&(name.to_string(), "raw".to_string())).copied()),
            fmt_cell(speedups.get(name).copied()),
        ));
    }

    let mut md = String::new();
    md.push_str("# Run summary\n\n");
    md.push_str(&format!("Source directory: `{}`\n\n", a.dir.display()));
    md.push_str("Scores are BLEU on the test split; `doc` scores whole documents, `sent` scores aligned sentence pairs. ");
    md.push_str("`rep-2` is the bigram repetition ratio of the raw-data hypotheses. ");
    md.push_str("`speedup` is wall-clock against the autoregressive teacher at the smallest benchmarked batch and the largest segment budget. ");
    md.push_str("`n/a` marks runs that were not produced.\n\n");
    md.push_str("| model | d-BLEU raw | s-BLEU raw | d-BLEU KD | s-BLEU KD | rep-2 | best dev (raw) | speedup |\n");
    md.push_str("| --- | --- | --- | --- | --- | --- | --- | --- |\n");
    md.push_str(&rows);
    if included == 0 {
        md.push_str("\nNo runs found. Expected layout: `eval/<variant>_<raw|kd>_<doc|sent>.json`, `train/<variant>_<raw|kd>/train_log.jsonl`, `bench/speed.csv`.\n");
    }

    let out = a.out.clone().unwrap_or_else(|| a.dir.join("report.md"));
    write_text(&out, &md)?;
    println!("wrote {} ({} model rows)", out.display(), included);
    Ok(())
}
