//! The parallel and sequential execution paths must be interchangeable:
//! same outputs, same order, and bit-identical training trajectories
//! regardless of worker count.

use natdoc_core::data::{build_vocab, gen_corpus, SynthConfig};
use natdoc_core::model::{ModelConfig, ModelParams, Variant};
use natdoc_core::par::{effective_threads, par_map, seq_map, with_threads};
use natdoc_core::train::{train, TrainConfig};

#[test]
fn par_map_matches_seq_map_in_order() {
    let items: Vec<u64> = (0..257).collect();
    let f = |x: &u64| x.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17);
    assert_eq!(par_map(&items, f), seq_map(&items, f));
}

#[test]
fn thread_count_is_at_least_one() {
    assert!(effective_threads(0) >= 1);
    assert!(effective_threads(8) >= 1);
}

#[test]
fn training_is_bit_identical_across_worker_counts() {
    let synth = SynthConfig {
        vocab_size: 12,
        k_sentences: 2,
        len_lo: 2,
        len_hi: 4,
        ambiguity: 0.5,
        n_train: 40,
        n_dev: 4,
        n_test: 4,
        seed: 3,
    };
    let corpus = gen_corpus(&synth).unwrap();
    let vocab = build_vocab(corpus.train.iter());
    let mut cfg = ModelConfig::desk(Variant::GtransGlatCtc, vocab.len());
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    let tcfg = TrainConfig { steps: 12, batch_tokens: 128, ..TrainConfig::default() };

    let run = |threads: usize| -> (Vec<f64>, Vec<u8>) {
        let mut params = ModelParams::init(&cfg).unwrap();
        let mut losses = Vec::new();
        let report = with_threads(threads, || {
            train(&mut params, &cfg, &tcfg, &corpus.train, &[], &vocab, |l| {
                losses.push(l.loss);
            })
        })
        .unwrap();
        let mut bytes = Vec::new();
        for (_, arr) in report.best.iter() {
            for &v in arr.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        (losses, bytes)
    };

    let (l1, p1) = run(1);
    let (l2, p2) = run(3);
    assert_eq!(l1, l2, "per-step losses differ across worker counts");
    assert_eq!(p1, p2, "final parameters differ across worker counts");
}
