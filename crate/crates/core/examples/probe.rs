//! Convergence probe: dev-score trajectories per variant on the default
//! ambiguous corpus, to pick training budgets.

use natdoc_core::data::{build_vocab, gen_corpus, SynthConfig};
use natdoc_core::model::{ModelConfig, ModelParams, Variant};
use natdoc_core::train::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let synth = SynthConfig { ambiguity: 0.5, ..SynthConfig::default() };
    let corpus = gen_corpus(&synth).unwrap();
    let mut all = corpus.train.clone();
    all.extend(corpus.dev.iter().cloned());
    all.extend(corpus.test.iter().cloned());
    let vocab = build_vocab(all.iter());

    let variants = [
        Variant::AtTeacher,
        Variant::GtransGlat,
        Variant::GlatCtc,
        Variant::GtransGlatCtc,
        Variant::Glat,
        Variant::NatVanilla,
        Variant::Dag,
        Variant::GtransDag,
    ];
    for variant in variants {
        let cfg = ModelConfig::desk(variant, vocab.len());
        let mut params = ModelParams::init(&cfg).unwrap();
        let tcfg = TrainConfig { steps, eval_every: 250, ..TrainConfig::default() };
        let t = Instant::now();
        let report = train(&mut params, &cfg, &tcfg, &corpus.train, &corpus.dev, &vocab, |l| {
            if let Some(d) = l.dev_dbleu {
                println!(
                    "{} step {:4} loss {:8.3} dev {:6.2}",
                    variant.as_str(),
                    l.step + 1,
                    l.loss,
                    d
                );
            }
        })
        .unwrap();
        println!(
            "{}: best dev {:.2} at step {} ({:.0}s, skipped {})",
            variant.as_str(),
            report.best_dev,
            report.best_step,
            t.elapsed().as_secs_f64(),
            report.skipped_total
        );
    }
}
