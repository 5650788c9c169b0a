//! Budget probe: train given variant specs on the default corpus and report
//! dev/test document BLEU for the best checkpoint.
//!
//! Usage: probe2 <variant:steps:lr:batch_tokens> ...

use natdoc_core::data::{build_vocab, gen_corpus, SynthConfig};
use natdoc_core::decode::DagRule;
use natdoc_core::eval::{d_bleu, translate_documents};
use natdoc_core::model::{ModelConfig, ModelParams, Variant};
use natdoc_core::train::{train, TrainConfig};

fn score(
    params: &natdoc_core::model::ModelParams,
    cfg: &ModelConfig,
    docs: &[natdoc_core::data::Document],
    vocab: &natdoc_core::data::Vocab,
) -> f64 {
    let outs = translate_documents(params, cfg, docs, vocab, DagRule::Lookahead).unwrap();
    let hyp: Vec<Vec<Vec<String>>> = outs.iter().map(|d| d.sentences.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = docs.iter().map(|d| d.tgt.clone()).collect();
    d_bleu(&hyp, &refs).unwrap().score
}

fn main() {
    let synth = SynthConfig::default();
    let corpus = gen_corpus(&synth).unwrap();
    let vocab = build_vocab(corpus.train.iter().chain(&corpus.dev).chain(&corpus.test));

    for spec in std::env::args().skip(1) {
        let parts: Vec<&str> = spec.split(':').collect();
        let variant = Variant::parse(parts[0]).unwrap();
        let steps: usize = parts[1].parse().unwrap();
        let lr: f64 = parts[2].parse().unwrap();
        let batch_tokens: usize = parts[3].parse().unwrap();

        let cfg = ModelConfig::desk(variant, vocab.len());
        let tcfg = TrainConfig { steps, lr, batch_tokens, eval_every: 500, ..TrainConfig::default() };
        let mut params = ModelParams::init(&cfg).unwrap();
        let t0 = std::time::Instant::now();
        let report = train(
            &mut params,
            &cfg,
            &tcfg,
            &corpus.train,
            &corpus.dev,
            &vocab,
            |l| {
                if l.dev_dbleu.is_some() {
                    println!(
                        "{spec} step {:>4} loss {:>8.3} dev {:>6.2}",
                        l.step + 1,
                        l.loss,
                        l.dev_dbleu.unwrap()
                    );
                }
            },
        )
        .unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let test = score(&report.best, &cfg, &corpus.test, &vocab);
        println!(
            "{spec}: best dev {:.2} at step {} test {:.2} ({:.0}s)",
            report.best_dev, report.best_step, test, secs
        );
    }
}
