//! Rough step-cost probe: seconds per optimizer step for the cheapest and
//! the most expensive variants on the default corpus shape.

use natdoc_core::data::{build_vocab, gen_corpus, SynthConfig};
use natdoc_core::model::{ModelConfig, ModelParams, Variant};
use natdoc_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let synth = SynthConfig { ambiguity: 0.5, ..SynthConfig::default() };
    let t0 = Instant::now();
    let corpus = gen_corpus(&synth).unwrap();
    let mut all = corpus.train.clone();
    all.extend(corpus.dev.iter().cloned());
    all.extend(corpus.test.iter().cloned());
    let vocab = build_vocab(all.iter());
    println!("corpus: {:.2}s, vocab {}", t0.elapsed().as_secs_f64(), vocab.len());

    for variant in [Variant::AtTeacher, Variant::GtransGlat, Variant::GtransGlatCtc, Variant::GtransDag] {
        let cfg = ModelConfig::desk(variant, vocab.len());
        let mut params = ModelParams::init(&cfg).unwrap();
        let tcfg = TrainConfig { steps: 30, eval_every: 0, ..TrainConfig::default() };
        let t = Instant::now();
        let report = train(
            &mut params,
            &cfg,
            &tcfg,
            &corpus.train,
            &[],
            &vocab,
            |_| {},
        )
        .unwrap();
        let el = t.elapsed().as_secs_f64();
        println!(
            "{variant:?}: {:.3}s/step (30 steps in {el:.2}s), last loss {:.3}, skipped {}",
            el / 30.0,
            report.log.last().unwrap().loss,
            report.skipped_total
        );
    }

    // Dev evaluation cost: one full translate+score pass over 200 dev docs.
    let cfg = ModelConfig::desk(Variant::GtransGlat, vocab.len());
    let params = ModelParams::init(&cfg).unwrap();
    let t = Instant::now();
    let hyps = natdoc_core::eval::translate_documents(
        &params,
        &cfg,
        &corpus.dev,
        &vocab,
        natdoc_core::decode::DagRule::Lookahead,
    )
    .unwrap();
    println!("dev translate (200 docs): {:.2}s, {} docs", t.elapsed().as_secs_f64(), hyps.len());
}
