//! Teacher diagnostics: trains autoregressive configs on the default corpus,
//! then classifies decode errors on dev and measures how exactly the model
//! reproduces the training split (the number that decides whether distilled
//! targets differ from raw ones at all).
//!
//! Usage: diag_teacher steps:lr:batch:global_layers:layers:d_model ...

use natdoc_core::data::{build_vocab, gen_corpus, Document, Lexicon, SynthConfig};
use natdoc_core::decode::DagRule;
use natdoc_core::eval::{d_bleu, translate_documents};
use natdoc_core::model::{ModelConfig, ModelParams, Variant};
use natdoc_core::train::{train, TrainConfig};
use natdoc_core::Result;

struct ErrorProfile {
    ambiguous_flips: usize,
    ambiguous_other: usize,
    ambiguous_total: usize,
    unambiguous_errors: usize,
    unambiguous_total: usize,
    drifted_sentences: usize,
    wrong_sentence_count: usize,
    docs_with_flip: usize,
}

/// Position-wise comparison against the lexicon: a wrong ambiguous token is a
/// "flip" if it is exactly the other selector mode's form, otherwise noise.
fn classify(lex: &Lexicon, docs: &[Document], hyps: &[Vec<Vec<String>>]) -> ErrorProfile {
    let mut p = ErrorProfile {
        ambiguous_flips: 0,
        ambiguous_other: 0,
        ambiguous_total: 0,
        unambiguous_errors: 0,
        unambiguous_total: 0,
        drifted_sentences: 0,
        wrong_sentence_count: 0,
        docs_with_flip: 0,
    };
    for (doc, hyp) in docs.iter().zip(hyps) {
        let mut flips = 0usize;
        if hyp.len() != doc.tgt.len() {
            p.wrong_sentence_count += 1;
        }
        for (j, ref_sent) in doc.tgt.iter().enumerate() {
            let hyp_sent = match hyp.get(j) {
                Some(s) => s,
                None => continue,
            };
            if hyp_sent.len() != ref_sent.len() {
                p.drifted_sentences += 1;
            }
            let src_sent = &doc.src[j];
            for (i, want) in ref_sent.iter().enumerate() {
                if j == 0 && i == 0 {
                    continue; // selector position, always trivially copied
                }
                let src_tok = match src_sent.get(i) {
                    Some(t) => t,
                    None => continue,
                };
                let got = hyp_sent.get(i);
                if lex.is_ambiguous(src_tok) {
                    p.ambiguous_total += 1;
                    if got != Some(want) {
                        let other = lex
                            .forms(src_tok)
                            .into_iter()
                            .flatten()
                            .find(|&f| f != want);
                        if got.is_some() && got == other {
                            p.ambiguous_flips += 1;
                            flips += 1;
                        } else {
                            p.ambiguous_other += 1;
                        }
                    }
                } else {
                    p.unambiguous_total += 1;
                    if got != Some(want) {
                        p.unambiguous_errors += 1;
                    }
                }
            }
        }
        if flips > 0 {
            p.docs_with_flip += 1;
        }
    }
    p
}

fn run(spec: &str) -> Result<()> {
    let parts: Vec<&str> = spec.split(':').collect();
    let steps: usize = parts[0].parse().unwrap();
    let lr: f64 = parts[1].parse().unwrap();
    let batch_tokens: usize = parts[2].parse().unwrap();
    let global_layers: usize = parts.get(3).map_or(1, |s| s.parse().unwrap());
    let layers: usize = parts.get(4).map_or(2, |s| s.parse().unwrap());
    let d_model: usize = parts.get(5).map_or(64, |s| s.parse().unwrap());

    let corpus = gen_corpus(&SynthConfig::default())?;
    let vocab = build_vocab(corpus.train.iter().chain(&corpus.dev).chain(&corpus.test));

    let mut cfg = ModelConfig::desk(Variant::AtTeacher, vocab.len());
    cfg.global_layers = global_layers;
    cfg.layers = layers;
    cfg.d_model = d_model;
    let tcfg = TrainConfig {
        steps,
        lr,
        batch_tokens,
        eval_every: 500,
        ..TrainConfig::default()
    };

    let t0 = std::time::Instant::now();
    let mut params = ModelParams::init(&cfg)?;
    let report = train(
        &mut params,
        &cfg,
        &tcfg,
        &corpus.train,
        &corpus.dev,
        &vocab,
        |l| {
            if let Some(d) = l.dev_dbleu {
                println!("{spec} step {:>4} loss {:>8.3} dev {:>6.2}", l.step + 1, l.loss, d);
            }
        },
    )?;
    let train_secs = t0.elapsed().as_secs_f64();

    let dev_out = translate_documents(&report.best, &cfg, &corpus.dev, &vocab, DagRule::Lookahead)?;
    let dev_hyps: Vec<Vec<Vec<String>>> = dev_out.iter().map(|d| d.sentences.clone()).collect();
    let dev_refs: Vec<Vec<Vec<String>>> = corpus.dev.iter().map(|d| d.tgt.clone()).collect();
    let dev_score = d_bleu(&dev_hyps, &dev_refs)?.score;
    println!(
        "{spec}: best dev {:.2} at step {} decoded dev {dev_score:.2} ({train_secs:.0}s)",
        report.best_dev, report.best_step
    );
    let p = classify(&corpus.lexicon, &corpus.dev, &dev_hyps);
    println!(
        "  dev ambiguous: {} mode-flips + {} other / {}  unambiguous: {} / {}",
        p.ambiguous_flips, p.ambiguous_other, p.ambiguous_total, p.unambiguous_errors,
        p.unambiguous_total
    );
    println!(
        "  dev sentences with length drift: {}  docs with wrong sentence count: {}  docs with >=1 flip: {} / {}",
        p.drifted_sentences, p.wrong_sentence_count, p.docs_with_flip,
        corpus.dev.len()
    );

    // The distillation question: how much of the training split does greedy
    // decode reproduce byte for byte?
    let t1 = std::time::Instant::now();
    let train_out =
        translate_documents(&report.best, &cfg, &corpus.train, &vocab, DagRule::Lookahead)?;
    let mut exact_docs = 0usize;
    let mut tok_total = 0usize;
    let mut tok_match = 0usize;
    for (doc, out) in corpus.train.iter().zip(&train_out) {
        if out.sentences == doc.tgt {
            exact_docs += 1;
        }
        for (hyp_sent, ref_sent) in out.sentences.iter().zip(&doc.tgt) {
            tok_total += ref_sent.len();
            tok_match += hyp_sent.iter().zip(ref_sent).filter(|(a, b)| a == b).count();
        }
    }
    println!(
        "  train split: {exact_docs} / {} docs exact, token accuracy {:.4} ({:.0}s decode)",
        corpus.train.len(),
        tok_match as f64 / tok_total.max(1) as f64,
        t1.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() {
        eprintln!("usage: diag_teacher steps:lr:batch:global_layers:layers:d_model ...");
        std::process::exit(2);
    }
    for spec in &args {
        if let Err(e) = run(spec) {
            eprintln!("{spec}: {e}");
        }
    }
}
