//! Training: per-variant composite losses, the optimizer, the schedule, and
//! the step loop. One segment builds one graph; batches fan segments out over
//! the batch map and fold gradients back in input order, so a run is
//! bit-reproducible for a given seed regardless of worker count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{segment_documents, Document, Segment, Vocab, BLANK, BOS, EOS};
use crate::decode::{nat_argmax, teacher_frame_tags, DagRule};
use crate::error::{Error, Result};
use crate::eval::{d_bleu, translate_documents};
use crate::loss::{
    ctc_loss_node, ctc_viterbi_align, dag_loss_node, glance_ratio, glancing_reveal, length_loss,
    sentence_ctc_loss_node, sentence_transition_mask, xe_loss, SentenceSpans,
};
use crate::model::{
    dag_transition_scores, decoder, decoder_inputs, encoder, length_logits, nat_decoder_plan,
    output_logits, upper_triangular_mask, DecoderPlan, Graph, ModelConfig, ModelParams, Variant,
};
use crate::par::par_map;
use crate::tensor::{Array, Mask};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps of linear ramp before inverse-square-root decay.
    pub warmup: usize,
    pub steps: usize,
    /// Source-token budget per batch; at least one segment always enters.
    pub batch_tokens: usize,
    pub seed: u64,
    /// Weight on the length term where the variant predicts lengths.
    pub w_len: f64,
    pub glance_hi: f64,
    pub glance_lo: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    /// Dev evaluation period in steps (also evaluated at the last step).
    pub eval_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            warmup: 400,
            steps: 4000,
            batch_tokens: 256,
            seed: 1,
            w_len: 0.1,
            glance_hi: 0.5,
            glance_lo: 0.3,
            clip: 1.0,
            eval_every: 250,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
        }
    }
}

/// Learning rate at 1-indexed step `t`: linear ramp to `base` over `warmup`
/// steps, then decay proportional to `1/sqrt(t)` normalized so the two pieces
/// meet at the peak.
pub fn lr_at(base: f64, warmup: usize, t: usize) -> f64 {
    let t = t.max(1) as f64;
    let w = warmup.max(1) as f64;
    base * (t / w).min((w / t).sqrt())
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment optimizer with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: BTreeMap<String, Array>,
    v: BTreeMap<String, Array>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient entry are untouched (their
    /// moments do not advance either; a head that never fires stays put).
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Array>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(p.shape().to_vec()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = g.data();
            if pd.len() != gd.len() {
                return Err(Error::shape("Adam::step", format!("gradient shape for '{name}'")));
            }
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (1.0 - b1) * gd[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * gd[i] * gd[i];
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales all gradients in place so their joint L2 norm is at most `clip`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array>, clip: f64) -> f64 {
    let norm2: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = norm2.sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

// ---------------------------------------------------------------------------
// Per-segment losses
// ---------------------------------------------------------------------------

/// Framed target stream for the stepwise model: opening marker once, then
/// each sentence's tokens followed by its closing marker.
pub fn teacher_stream(seg: &Segment) -> Vec<usize> {
    let mut s = Vec::with_capacity(seg.flat_tgt().len() + seg.k() + 1);
    s.push(BOS);
    for y in &seg.tgt_sents {
        s.extend_from_slice(y);
        s.push(EOS);
    }
    s
}

/// Loss and gradients for one segment, or `None` when the item is infeasible
/// under its alignment (target longer than its reserved slots) and must be
/// skipped. `glance` is the current reveal ratio; `item_seed` fixes the
/// reveal draw.
pub fn segment_grads(
    params: &ModelParams,
    cfg: &ModelConfig,
    seg: &Segment,
    glance: f64,
    item_seed: u64,
    w_len: f64,
) -> Result<Option<(f64, BTreeMap<String, Array>)>> {
    if !seg.has_refs() {
        return Err(Error::contract("segment_grads", "training segment without references"));
    }
    let mut g = Graph::new(params, true);
    let enc = encoder(&mut g, cfg, &seg.src, &seg.src_tags)?;

    let loss = match cfg.variant {
        Variant::AtTeacher => {
            let stream = teacher_stream(seg);
            let input = stream[..stream.len() - 1].to_vec();
            let targets = stream[1..].to_vec();
            let tags = teacher_frame_tags(&input, seg.k());
            let include = vec![true; targets.len()];
            let plan = DecoderPlan::from_tokens(input, tags);
            let inp = decoder_inputs(&mut g, cfg, &plan, Some(enc), None)?;
            let feats = decoder(&mut g, cfg, inp, &plan.tags, enc, &seg.src_tags, true)?;
            let logits = output_logits(&mut g, feats)?;
            Some(xe_loss(&mut g.tape, logits, targets, include)?)
        }
        Variant::NatVanilla | Variant::Glat | Variant::GtransGlat => {
            nat_xe_loss(&mut g, params, cfg, seg, enc, glance, item_seed, w_len)?
        }
        Variant::GlatCtc | Variant::GtransGlatCtc => {
            ctc_glancing_loss(&mut g, params, cfg, seg, enc, glance, item_seed)?
        }
        Variant::Dag | Variant::GtransDag => {
            let framed = cfg.variant.is_gtrans();
            let slot_lens: Vec<usize> = if framed {
                seg.src_sent_lens().iter().map(|&l| cfg.dag_vertices(l)).collect()
            } else {
                vec![cfg.dag_vertices(seg.src.len())]
            };
            let plan = nat_decoder_plan(cfg, &seg.src_spans, &slot_lens)?;
            let inp = decoder_inputs(&mut g, cfg, &plan, Some(enc), None)?;
            let feats = decoder(&mut g, cfg, inp, &plan.tags, enc, &seg.src_tags, false)?;
            let logits = output_logits(&mut g, feats)?;
            let scores = dag_transition_scores(&mut g, cfg, feats)?;
            let emit = g.tape.log_softmax(logits);
            let m = plan.rows();
            let upper = upper_triangular_mask(m);
            let mask = if framed {
                // Normalizing once over the conjunction equals normalizing
                // over forward edges and then renormalizing within the
                // sentence structure: the first normalizer cancels.
                let sent = sentence_transition_mask(&plan.tags)?;
                Mask::from_fn(m, m, |i, j| upper.get(i, j) && sent.get(i, j))
            } else {
                upper
            };
            let trans = g.tape.log_softmax_masked(scores, std::rc::Rc::new(mask))?;
            let y = if framed {
                let mut y = Vec::new();
                for s in &seg.tgt_sents {
                    y.push(BOS);
                    y.extend_from_slice(s);
                    y.push(EOS);
                }
                y
            } else {
                let mut y = seg.flat_tgt();
                y.push(EOS);
                y
            };
            dag_loss_node(&mut g.tape, emit, trans, &y, EOS)?
        }
    };

    let Some(loss) = loss else { return Ok(None) };
    let value = g.tape.value(loss).data()[0];
    let all = g.tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, id) in g.param_nodes() {
        if let Some(grad) = &all[id] {
            grads.insert(name, grad.clone());
        }
    }
    Ok(Some((value, grads)))
}

/// Position-wise cross-entropy variants. Plain and framed layouts share the
/// path: slots sized by the true lengths, an optional glancing pass that
/// reveals reference tokens, loss on unrevealed content rows, plus the
/// weighted length term.
#[allow(clippy::too_many_arguments)]
fn nat_xe_loss(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &ModelConfig,
    seg: &Segment,
    enc: crate::tape::NodeId,
    glance: f64,
    item_seed: u64,
    w_len: f64,
) -> Result<Option<crate::tape::NodeId>> {
    let framed = cfg.variant.is_gtrans();
    let slot_lens: Vec<usize> = if framed {
        seg.tgt_sents.iter().map(|y| y.len().max(1)).collect()
    } else {
        vec![seg.flat_tgt().len()]
    };
    if slot_lens.iter().sum::<usize>() == 0 {
        return Ok(None);
    }
    let plan = nat_decoder_plan(cfg, &seg.src_spans, &slot_lens)?;

    // Row-aligned targets: reference tokens at content rows, the structural
    // token itself at marker rows (excluded from the loss). A sentence whose
    // reference is empty keeps its single pad slot out of the loss.
    let mut targets = plan.tokens.clone();
    let mut include = vec![false; plan.rows()];
    for (j, &(s, e)) in plan.spans.iter().enumerate() {
        let gold: Vec<usize> =
            if framed { seg.tgt_sents[j].clone() } else { seg.flat_tgt() };
        for (r, row) in (s..e).enumerate() {
            if r < gold.len() {
                targets[row] = gold[r];
                include[row] = true;
            }
        }
    }

    let glancing = matches!(cfg.variant, Variant::Glat | Variant::GtransGlat);
    let reveal: Option<Vec<Option<usize>>> = if glancing {
        // First pass on a throwaway graph: predictions only.
        let mut g1 = Graph::new(params, false);
        let enc1 = encoder(&mut g1, cfg, &seg.src, &seg.src_tags)?;
        let inp1 = decoder_inputs(&mut g1, cfg, &plan, Some(enc1), None)?;
        let feats1 = decoder(&mut g1, cfg, inp1, &plan.tags, enc1, &seg.src_tags, false)?;
        let logits1 = output_logits(&mut g1, feats1)?;
        let pred = nat_argmax(g1.tape.value(logits1));

        let rows: Vec<usize> =
            (0..plan.rows()).filter(|&r| include[r]).collect();
        let pred_c: Vec<usize> = rows.iter().map(|&r| pred[r]).collect();
        let gold_c: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let plan_g = glancing_reveal(&pred_c, &gold_c, glance, &mut rng)?;
        let mut reveal = vec![None; plan.rows()];
        for (i, &r) in rows.iter().enumerate() {
            if plan_g.revealed[i] {
                reveal[r] = Some(gold_c[i]);
                include[r] = false;
            }
        }
        Some(reveal)
    } else {
        None
    };

    if !include.iter().any(|&b| b) {
        return Ok(None);
    }
    let inp = decoder_inputs(g, cfg, &plan, Some(enc), reveal.as_deref())?;
    let feats = decoder(g, cfg, inp, &plan.tags, enc, &seg.src_tags, false)?;
    let logits = output_logits(g, feats)?;
    let xe = xe_loss(&mut g.tape, logits, targets, include)?;

    let (spans, true_lens): (Vec<(usize, usize)>, Vec<usize>) = if framed {
        (seg.src_spans.clone(), seg.tgt_sents.iter().map(|y| y.len()).collect())
    } else {
        (vec![(0, seg.src.len())], vec![seg.flat_tgt().len()])
    };
    let ll = length_logits(g, enc, &spans)?;
    let lterm = length_loss(&mut g.tape, ll, &true_lens)?;
    Ok(Some(g.tape.add_weighted(&[(xe, 1.0), (lterm, w_len)])?))
}

/// Latent-alignment variants with glancing: the first pass aligns the
/// reference to the slot grid (best monotone labeling, separators included),
/// reveals part of that labeling, and the second pass takes the
/// marginalization loss over the full slot span.
fn ctc_glancing_loss(
    g: &mut Graph,
    params: &ModelParams,
    cfg: &ModelConfig,
    seg: &Segment,
    enc: crate::tape::NodeId,
    glance: f64,
    item_seed: u64,
) -> Result<Option<crate::tape::NodeId>> {
    let framed = cfg.variant.is_gtrans();
    let slot_lens: Vec<usize> = if framed {
        seg.src_sent_lens().iter().map(|&l| cfg.ctc_slots(l)).collect()
    } else {
        vec![cfg.ctc_slots(seg.src.len())]
    };
    let plan = nat_decoder_plan(cfg, &seg.src_spans, &slot_lens)?;

    // First pass: predictions and the reference alignment.
    let mut g1 = Graph::new(params, false);
    let enc1 = encoder(&mut g1, cfg, &seg.src, &seg.src_tags)?;
    let inp1 = decoder_inputs(&mut g1, cfg, &plan, Some(enc1), None)?;
    let feats1 = decoder(&mut g1, cfg, inp1, &plan.tags, enc1, &seg.src_tags, false)?;
    let logits1 = output_logits(&mut g1, feats1)?;
    let logp1 = crate::tensor::log_softmax(g1.tape.value(logits1));
    let pred = nat_argmax(g1.tape.value(logits1));

    // Per-span best labeling of the reference; any infeasible sentence skips
    // the whole item, matching the loss.
    let mut aligned: Vec<Option<usize>> = vec![None; plan.rows()];
    let spans = SentenceSpans::new(plan.spans.clone(), plan.rows())?;
    let targets: Vec<Vec<usize>> =
        if framed { seg.tgt_sents.clone() } else { vec![seg.flat_tgt()] };
    for (&(s, e), y) in spans.as_slice().iter().zip(targets.iter()) {
        if s == e {
            if y.is_empty() {
                continue;
            }
            return Ok(None);
        }
        let sub = Array::from_fn(e - s, logp1.cols(), |i, c| logp1.at2(s + i, c));
        match ctc_viterbi_align(&sub, y, BLANK)? {
            Some(labels) => {
                for (i, &l) in labels.iter().enumerate() {
                    aligned[s + i] = Some(l);
                }
            }
            None => return Ok(None),
        }
    }

    // Glancing over content rows against the aligned labeling.
    let rows: Vec<usize> = (0..plan.rows()).filter(|&r| aligned[r].is_some()).collect();
    let pred_c: Vec<usize> = rows.iter().map(|&r| pred[r]).collect();
    let gold_c: Vec<usize> = rows.iter().map(|&r| aligned[r].expect("content row")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
    let plan_g = glancing_reveal(&pred_c, &gold_c, glance, &mut rng)?;
    let mut reveal = vec![None; plan.rows()];
    for (i, &r) in rows.iter().enumerate() {
        if plan_g.revealed[i] {
            reveal[r] = Some(gold_c[i]);
        }
    }

    let inp = decoder_inputs(g, cfg, &plan, Some(enc), Some(&reveal))?;
    let feats = decoder(g, cfg, inp, &plan.tags, enc, &seg.src_tags, false)?;
    let logits = output_logits(g, feats)?;
    let emissions = g.tape.log_softmax(logits);
    if framed {
        sentence_ctc_loss_node(&mut g.tape, emissions, &spans, &targets, BLANK)
    } else {
        ctc_loss_node(&mut g.tape, emissions, &targets[0], BLANK)
    }
}

// ---------------------------------------------------------------------------
// The step loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Segments skipped as infeasible in this batch.
    pub skipped: usize,
    pub dev_dbleu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<StepLog>,
    pub best: ModelParams,
    pub best_dev: f64,
    pub best_step: usize,
    pub skipped_total: usize,
}

/// Deterministic token-budget batches: a seeded shuffle per epoch, segments
/// packed until the budget is reached.
fn make_batches(n: usize, sizes: &[usize], budget: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for i in order {
        if !cur.is_empty() && used + sizes[i] > budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += sizes[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Runs the optimizer for `tcfg.steps` steps and returns the log plus the
/// parameters of the best dev score. `sink` sees every step line as it
/// happens. The step loop itself is sequential; gradient computation fans out
/// per segment.
pub fn train(
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train_docs: &[Document],
    dev_docs: &[Document],
    vocab: &Vocab,
    mut sink: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    let segments = segment_documents(train_docs, vocab, cfg.max_segment_len)?;
    if segments.is_empty() {
        return Err(Error::contract("train", "no training segments"));
    }
    if segments.iter().any(|s| !s.has_refs()) {
        return Err(Error::contract("train", "training corpus must carry references"));
    }
    let sizes: Vec<usize> = segments.iter().map(|s| s.src.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut batches: Vec<Vec<usize>> = Vec::new();

    let mut adam = Adam::new(tcfg);
    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_dev = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut skipped_total = 0usize;

    for step in 0..tcfg.steps {
        if batches.is_empty() {
            batches = make_batches(segments.len(), &sizes, tcfg.batch_tokens, &mut rng);
            batches.reverse(); // pop() consumes in shuffle order
        }
        let batch = batches.pop().expect("refilled above");
        let glance = glance_ratio(step, tcfg.steps, tcfg.glance_hi, tcfg.glance_lo);

        let items: Vec<(usize, u64)> = batch
            .iter()
            .map(|&i| (i, tcfg.seed ^ ((step as u64) << 24) ^ (i as u64).wrapping_mul(0x9e3779b9)))
            .collect();
        let outs = par_map(&items, |&(i, item_seed)| {
            segment_grads(params, cfg, &segments[i], glance, item_seed, tcfg.w_len)
        });

        let mut grads: BTreeMap<String, Array> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for out in outs {
            match out? {
                None => skipped += 1,
                Some((value, g)) => {
                    loss_sum += value;
                    used += 1;
                    for (name, arr) in g {
                        match grads.get_mut(&name) {
                            Some(acc) => {
                                let ad = acc.data_mut();
                                for (a, b) in ad.iter_mut().zip(arr.data().iter()) {
                                    *a += b;
                                }
                            }
                            None => {
                                grads.insert(name, arr);
                            }
                        }
                    }
                }
            }
        }
        skipped_total += skipped;

        let loss = if used > 0 { loss_sum / used as f64 } else { 0.0 };
        let batch_ids: Vec<String> = batch
            .iter()
            .map(|&i| format!("{}:{}", segments[i].doc_id, segments[i].first_sentence))
            .collect();
        if !loss.is_finite()
            || grads.values().any(|g| g.data().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {step}, batch [{}]",
                batch_ids.join(", ")
            )));
        }

        if used > 0 {
            let inv = 1.0 / used as f64;
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            clip_global_norm(&mut grads, tcfg.clip);
            let lr = lr_at(tcfg.lr, tcfg.warmup, step + 1);
            adam.step(params, &grads, lr)?;
        }

        let want_dev = !dev_docs.is_empty()
            && (step + 1 == tcfg.steps
                || (tcfg.eval_every > 0 && (step + 1) % tcfg.eval_every == 0));
        let dev_dbleu = if want_dev {
            let hyps = translate_documents(params, cfg, dev_docs, vocab, DagRule::Lookahead)?;
            let hyp_sents: Vec<Vec<Vec<String>>> =
                hyps.iter().map(|d| d.sentences.clone()).collect();
            let refs: Vec<Vec<Vec<String>>> = dev_docs.iter().map(|d| d.tgt.clone()).collect();
            let score = d_bleu(&hyp_sents, &refs)?.score;
            if score > best_dev {
                best_dev = score;
                best_step = step + 1;
                best = params.clone();
            }
            Some(score)
        } else {
            None
        };

        let entry = StepLog {
            step,
            loss,
            lr: lr_at(tcfg.lr, tcfg.warmup, step + 1),
            skipped,
            dev_dbleu,
        };
        sink(&entry);
        log.push(entry);
    }

    if best_dev == f64::NEG_INFINITY {
        // No dev evaluation ran; the final parameters are the best we know.
        best = params.clone();
        best_step = tcfg.steps;
    }
    Ok(TrainReport { log, best, best_dev, best_step, skipped_total })
}
