//! Encoder-decoder transformer with switchable decoding regimes.
//!
//! One parameter set and one forward vocabulary of building blocks serve all
//! eight variants; what differs is how decoder inputs are laid out (token
//! frames vs copied encoder rows), which attention masks apply, and which
//! output heads exist. The variant is part of the config, so a checkpoint is
//! self-describing.
//!
//! Layer layout is pre-norm: every sublayer reads a layer-normed view of the
//! residual stream and writes back additively, with one final norm after the
//! stack. Sentence-local attention follows the grouped scheme: all layers
//! except the top `global_layers` see only same-sentence keys; the top ones
//! see everything. Positional encodings restart at each sentence start for
//! sentence-framed variants and run flat otherwise.

use crate::attn::{self, AttnProj};
use crate::data::{Vocab, BLANK, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Array, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Decoding regime. `at_teacher` is the autoregressive baseline and the
/// distillation source; everything else decodes in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    AtTeacher,
    NatVanilla,
    Glat,
    GlatCtc,
    Dag,
    GtransGlat,
    GtransGlatCtc,
    GtransDag,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::AtTeacher,
        Variant::NatVanilla,
        Variant::Glat,
        Variant::GlatCtc,
        Variant::Dag,
        Variant::GtransGlat,
        Variant::GtransGlatCtc,
        Variant::GtransDag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::AtTeacher => "at_teacher",
            Variant::NatVanilla => "nat_vanilla",
            Variant::Glat => "glat",
            Variant::GlatCtc => "glat_ctc",
            Variant::Dag => "dag",
            Variant::GtransGlat => "gtrans_glat",
            Variant::GtransGlatCtc => "gtrans_glat_ctc",
            Variant::GtransDag => "gtrans_dag",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }

    /// Sentence-framed decoding: structural markers, grouped attention,
    /// per-sentence positions. The autoregressive teacher is framed too; it
    /// reads and writes the same marker structure the framed students use.
    pub fn is_gtrans(self) -> bool {
        matches!(
            self,
            Variant::AtTeacher | Variant::GtransGlat | Variant::GtransGlatCtc | Variant::GtransDag
        )
    }

    pub fn is_autoregressive(self) -> bool {
        self == Variant::AtTeacher
    }

    pub fn uses_ctc(self) -> bool {
        matches!(self, Variant::GlatCtc | Variant::GtransGlatCtc)
    }

    pub fn uses_dag(self) -> bool {
        matches!(self, Variant::Dag | Variant::GtransDag)
    }

    pub fn uses_glancing(self) -> bool {
        matches!(
            self,
            Variant::Glat | Variant::GlatCtc | Variant::GtransGlat | Variant::GtransGlatCtc
        )
    }

    /// Variants that cannot infer output length from slot arithmetic need the
    /// length head.
    pub fn uses_length_pred(self) -> bool {
        matches!(self, Variant::NatVanilla | Variant::Glat | Variant::GtransGlat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Top decoder/encoder layers with unrestricted attention under the
    /// grouped scheme. Ignored by non-sentence-framed variants.
    pub global_layers: usize,
    pub vocab_size: usize,
    pub max_sentence_len: usize,
    pub max_segment_len: usize,
    /// Slot multiplier for latent-alignment variants: M = ceil(u * |x|).
    pub ctc_upsample: f64,
    /// Vertex multiplier for graph variants: M = ceil(lambda * |x|).
    pub dag_lambda: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk(variant: Variant, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            // At two layers, keeping the full "top two global" budget would
            // leave no grouped layer at all; the desk preset keeps the split.
            global_layers: 1,
            vocab_size,
            max_sentence_len: 64,
            max_segment_len: 512,
            ctc_upsample: 2.0,
            dag_lambda: 4.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers/heads/d_model/d_ff must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.global_layers > self.layers {
            return Err(Error::Config(format!(
                "global_layers {} exceeds layers {}",
                self.global_layers, self.layers
            )));
        }
        if self.vocab_size <= UNK {
            return Err(Error::Config("vocab smaller than the reserved ids".into()));
        }
        if self.max_sentence_len < 2 || self.max_segment_len < self.max_sentence_len {
            return Err(Error::Config("sentence/segment length caps out of order".into()));
        }
        if self.ctc_upsample < 1.0 || self.dag_lambda < 1.0 {
            return Err(Error::Config("slot multipliers must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of classes in the length head: per-sentence lengths for
    /// sentence-framed variants, whole-segment lengths otherwise.
    pub fn length_bins(&self) -> usize {
        if self.variant.is_gtrans() {
            self.max_sentence_len
        } else {
            self.max_segment_len
        }
    }

    /// Layer `i` attends within sentences when true; the top `global_layers`
    /// attend globally. Non-framed variants are global everywhere.
    pub fn layer_is_grouped(&self, i: usize) -> bool {
        self.variant.is_gtrans() && i + self.global_layers < self.layers
    }

    /// Reserved slot count for one sentence of `src_len` source tokens under
    /// the latent-alignment regime.
    pub fn ctc_slots(&self, src_len: usize) -> usize {
        (self.ctc_upsample * src_len as f64).ceil() as usize
    }

    /// Vertex count for one sentence of `src_len` source tokens under the
    /// graph regime.
    pub fn dag_vertices(&self, src_len: usize) -> usize {
        (self.dag_lambda * src_len as f64).ceil() as usize
    }
}

/// Flat parameter store. BTreeMap keeps iteration order stable, which in turn
/// keeps gradient accumulation and optimizer updates bit-deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arrays: BTreeMap<String, Array>,
}

fn attn_param_shapes(prefix: &str, d: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push((format!("{prefix}.{w}"), vec![d, d]));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        out.push((format!("{prefix}.{b}"), vec![d]));
    }
}

fn layer_param_shapes(
    prefix: &str,
    cfg: &ModelConfig,
    cross: bool,
    out: &mut Vec<(String, Vec<usize>)>,
) {
    let d = cfg.d_model;
    out.push((format!("{prefix}.ln1.g"), vec![d]));
    out.push((format!("{prefix}.ln1.b"), vec![d]));
    attn_param_shapes(&format!("{prefix}.self"), d, out);
    out.push((format!("{prefix}.ln2.g"), vec![d]));
    out.push((format!("{prefix}.ln2.b"), vec![d]));
    if cross {
        attn_param_shapes(&format!("{prefix}.cross"), d, out);
        out.push((format!("{prefix}.ln3.g"), vec![d]));
        out.push((format!("{prefix}.ln3.b"), vec![d]));
    }
    out.push((format!("{prefix}.ffn.w1"), vec![d, cfg.d_ff]));
    out.push((format!("{prefix}.ffn.b1"), vec![cfg.d_ff]));
    out.push((format!("{prefix}.ffn.w2"), vec![cfg.d_ff, d]));
    out.push((format!("{prefix}.ffn.b2"), vec![d]));
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut shapes = vec![
        ("embed.src".to_string(), vec![v, d]),
        ("embed.tgt".to_string(), vec![v, d]),
    ];
    for i in 0..cfg.layers {
        layer_param_shapes(&format!("enc.{i}"), cfg, false, &mut shapes);
    }
    shapes.push(("enc.out_ln.g".to_string(), vec![d]));
    shapes.push(("enc.out_ln.b".to_string(), vec![d]));
    for i in 0..cfg.layers {
        layer_param_shapes(&format!("dec.{i}"), cfg, true, &mut shapes);
    }
    shapes.push(("dec.out_ln.g".to_string(), vec![d]));
    shapes.push(("dec.out_ln.b".to_string(), vec![d]));
    shapes.push(("out.w".to_string(), vec![d, v]));
    shapes.push(("out.b".to_string(), vec![v]));
    if cfg.variant.uses_length_pred() {
        shapes.push(("len.w".to_string(), vec![d, cfg.length_bins()]));
        shapes.push(("len.b".to_string(), vec![cfg.length_bins()]));
    }
    if cfg.variant.uses_dag() {
        shapes.push(("dag.wq".to_string(), vec![d, d]));
        shapes.push(("dag.wk".to_string(), vec![d, d]));
    }
    shapes
}

impl ModelParams {
    /// Seeded init: matrices get uniform Xavier ranges, embeddings a
    /// 1/sqrt(d) range (they are re-scaled by sqrt(d) at lookup), norms and
    /// biases their identities. Names are filled in sorted order so the same
    /// seed always produces the same bytes.
    pub fn init(cfg: &ModelConfig) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut shapes = param_shapes(cfg);
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        let mut arrays = BTreeMap::new();
        for (name, shape) in shapes {
            let arr = if shape.len() == 1 {
                if name.ends_with(".g") {
                    Array::filled(shape, 1.0)
                } else {
                    Array::zeros(shape)
                }
            } else if name.starts_with("embed.") {
                let a = (cfg.d_model as f64).powf(-0.5);
                let mut m = Array::zeros(shape);
                m.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
                m
            } else {
                let (fin, fout) = (shape[0] as f64, shape[1] as f64);
                let a = (6.0 / (fin + fout)).sqrt();
                let mut m = Array::zeros(shape);
                m.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
                m
            };
            arrays.insert(name, arr);
        }
        Ok(ModelParams { arrays })
    }

    pub fn from_arrays(arrays: BTreeMap<String, Array>) -> ModelParams {
        ModelParams { arrays }
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::contract("ModelParams::get", format!("no parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| Error::contract("ModelParams::get", format!("no parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Graph: one tape plus leaf nodes for every parameter
// ---------------------------------------------------------------------------

pub struct Graph {
    pub tape: Tape,
    nodes: BTreeMap<String, NodeId>,
}

impl Graph {
    /// `trainable` decides whether gradients flow into the parameter leaves;
    /// inference graphs skip the bookkeeping.
    pub fn new(params: &ModelParams, trainable: bool) -> Graph {
        let mut tape = Tape::new();
        let mut nodes = BTreeMap::new();
        for (name, arr) in params.iter() {
            let id = if trainable { tape.param(arr.clone()) } else { tape.constant(arr.clone()) };
            nodes.insert(name.clone(), id);
        }
        Graph { tape, nodes }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract("Graph::node", format!("no parameter '{name}'")))
    }

    /// Parameter leaves in name order, matching `ModelParams` iteration.
    pub fn param_nodes(&self) -> Vec<(String, NodeId)> {
        self.nodes.iter().map(|(n, &id)| (n.clone(), id)).collect()
    }

    fn attn_proj(&self, prefix: &str) -> Result<AttnProj> {
        Ok(AttnProj {
            wq: self.node(&format!("{prefix}.wq"))?,
            bq: self.node(&format!("{prefix}.bq"))?,
            wk: self.node(&format!("{prefix}.wk"))?,
            bk: self.node(&format!("{prefix}.bk"))?,
            wv: self.node(&format!("{prefix}.wv"))?,
            bv: self.node(&format!("{prefix}.bv"))?,
            wo: self.node(&format!("{prefix}.wo"))?,
            bo: self.node(&format!("{prefix}.bo"))?,
        })
    }
}

// ---------------------------------------------------------------------------
// Positions and embeddings
// ---------------------------------------------------------------------------

/// Position of each element: within-sentence offsets when `restart` (reset
/// at every tag change), running offsets otherwise.
pub fn positions_from_tags(tags: &[usize], restart: bool) -> Vec<usize> {
    if !restart {
        return (0..tags.len()).collect();
    }
    let mut out = Vec::with_capacity(tags.len());
    let mut pos = 0usize;
    for (i, &t) in tags.iter().enumerate() {
        if i > 0 && tags[i - 1] != t {
            pos = 0;
        }
        out.push(pos);
        pos += 1;
    }
    out
}

/// Fixed sinusoidal table rows for the given positions.
pub fn sinusoidal_pe(positions: &[usize], d_model: usize) -> Array {
    Array::from_fn(positions.len(), d_model, |r, c| {
        let p = positions[r] as f64;
        let j = (c / 2) as f64;
        let omega = 10000f64.powf(-2.0 * j / d_model as f64);
        if c % 2 == 0 {
            (p * omega).sin()
        } else {
            (p * omega).cos()
        }
    })
}

/// Embedding lookup scaled by sqrt(d) plus positional rows.
fn embed_tokens(
    g: &mut Graph,
    table: &str,
    tokens: &[usize],
    positions: &[usize],
) -> Result<NodeId> {
    let emb = g.node(table)?;
    let d = g.tape.value(emb).cols();
    let rows = g.tape.gather_rows(emb, Rc::new(tokens.to_vec()))?;
    let scaled = g.tape.scale(rows, (d as f64).sqrt());
    let pe = g.tape.constant(sinusoidal_pe(positions, d));
    g.tape.add(scaled, pe)
}

// ---------------------------------------------------------------------------
// Encoder and decoder stacks
// ---------------------------------------------------------------------------

fn ffn_block(g: &mut Graph, prefix: &str, x: NodeId, ln: &str) -> Result<NodeId> {
    let gain = g.node(&format!("{prefix}.{ln}.g"))?;
    let bias = g.node(&format!("{prefix}.{ln}.b"))?;
    let a = g.tape.layer_norm(x, gain, bias, LN_EPS)?;
    let w1 = g.node(&format!("{prefix}.ffn.w1"))?;
    let b1 = g.node(&format!("{prefix}.ffn.b1"))?;
    let w2 = g.node(&format!("{prefix}.ffn.w2"))?;
    let b2 = g.node(&format!("{prefix}.ffn.b2"))?;
    let h = g.tape.matmul(a, w1)?;
    let h = g.tape.add_row(h, b1)?;
    let h = g.tape.relu(h);
    let h = g.tape.matmul(h, w2)?;
    let h = g.tape.add_row(h, b2)?;
    g.tape.add(x, h)
}

fn attn_block(
    g: &mut Graph,
    prefix: &str,
    ln: &str,
    proj: &str,
    x: NodeId,
    kv: Option<NodeId>,
    mask: &Rc<Mask>,
    heads: usize,
) -> Result<NodeId> {
    let gain = g.node(&format!("{prefix}.{ln}.g"))?;
    let bias = g.node(&format!("{prefix}.{ln}.b"))?;
    let a = g.tape.layer_norm(x, gain, bias, LN_EPS)?;
    let p = g.attn_proj(&format!("{prefix}.{proj}"))?;
    let (k, v) = match kv {
        Some(e) => (e, e),
        None => (a, a),
    };
    let sa = attn::attention(&mut g.tape, a, k, v, &p, mask, heads)?;
    g.tape.add(x, sa)
}

/// Source features `[S, d_model]`. Rejects empty and overlong inputs; the
/// segmenter upstream should have split the latter.
pub fn encoder(g: &mut Graph, cfg: &ModelConfig, src: &[usize], src_tags: &[usize]) -> Result<NodeId> {
    if src.is_empty() {
        return Err(Error::contract("encoder", "empty source"));
    }
    if src.len() > cfg.max_segment_len {
        return Err(Error::data(
            None,
            format!("source of {} tokens exceeds segment cap {}", src.len(), cfg.max_segment_len),
        ));
    }
    if src_tags.len() != src.len() {
        return Err(Error::shape("encoder", "one tag per source token required"));
    }
    let restart = cfg.variant.is_gtrans();
    let positions = positions_from_tags(src_tags, restart);
    let mut x = embed_tokens(g, "embed.src", src, &positions)?;
    let n = src.len();
    let grouped_mask: Rc<Mask> = Rc::new(attn::group_mask_raw(src_tags, src_tags));
    let all: Rc<Mask> = Rc::new(Mask::all_true(n, n));
    for i in 0..cfg.layers {
        let mask = if cfg.layer_is_grouped(i) { &grouped_mask } else { &all };
        let prefix = format!("enc.{i}");
        x = attn_block(g, &prefix, "ln1", "self", x, None, mask, cfg.heads)?;
        x = ffn_block(g, &prefix, x, "ln2")?;
    }
    let gain = g.node("enc.out_ln.g")?;
    let bias = g.node("enc.out_ln.b")?;
    g.tape.layer_norm(x, gain, bias, LN_EPS)
}

/// Decoder features `[T, d_model]` over prepared inputs. `causal` adds the
/// autoregressive restriction on top of whatever grouping applies.
pub fn decoder(
    g: &mut Graph,
    cfg: &ModelConfig,
    dec_in: NodeId,
    dec_tags: &[usize],
    enc: NodeId,
    src_tags: &[usize],
    causal: bool,
) -> Result<NodeId> {
    let t = g.tape.value(dec_in).rows();
    if dec_tags.len() != t {
        return Err(Error::shape("decoder", "one tag per decoder row required"));
    }
    let s = g.tape.value(enc).rows();
    if src_tags.len() != s {
        return Err(Error::shape("decoder", "one tag per source row required"));
    }
    let self_grouped = attn::group_mask_raw(dec_tags, dec_tags);
    let self_all = Mask::all_true(t, t);
    let causal_mask = attn::build_causal_mask(t);
    let self_mask_for = |grouped: bool| -> Result<Rc<Mask>> {
        let base = if grouped { &self_grouped } else { &self_all };
        Ok(Rc::new(if causal { base.and(&causal_mask)? } else { base.clone() }))
    };
    let cross_grouped: Rc<Mask> = Rc::new(attn::group_mask_raw(dec_tags, src_tags));
    let cross_all: Rc<Mask> = Rc::new(Mask::all_true(t, s));

    let mut x = dec_in;
    for i in 0..cfg.layers {
        let grouped = cfg.layer_is_grouped(i);
        let prefix = format!("dec.{i}");
        let sm = self_mask_for(grouped)?;
        x = attn_block(g, &prefix, "ln1", "self", x, None, &sm, cfg.heads)?;
        let cm = if grouped { &cross_grouped } else { &cross_all };
        x = attn_block(g, &prefix, "ln2", "cross", x, Some(enc), cm, cfg.heads)?;
        x = ffn_block(g, &prefix, x, "ln3")?;
    }
    let gain = g.node("dec.out_ln.g")?;
    let bias = g.node("dec.out_ln.b")?;
    g.tape.layer_norm(x, gain, bias, LN_EPS)
}

/// Token logits `[T, vocab]`.
pub fn output_logits(g: &mut Graph, feats: NodeId) -> Result<NodeId> {
    let w = g.node("out.w")?;
    let b = g.node("out.b")?;
    let l = g.tape.matmul(feats, w)?;
    g.tape.add_row(l, b)
}

/// Length-head logits `[K, bins]` from mean-pooled encoder spans. Spans are
/// `(start, end)` half-open; an empty span is a contract error.
pub fn length_logits(
    g: &mut Graph,
    enc: NodeId,
    spans: &[(usize, usize)],
) -> Result<NodeId> {
    let sl: Vec<(usize, usize)> = spans.iter().map(|&(s, e)| (s, e.saturating_sub(s))).collect();
    let pooled = g.tape.mean_pool_spans(enc, Rc::new(sl))?;
    let w = g.node("len.w")?;
    let b = g.node("len.b")?;
    let l = g.tape.matmul(pooled, w)?;
    g.tape.add_row(l, b)
}

/// Raw vertex-to-vertex transition scores `[M, M]` for graph variants:
/// bilinear form over projected decoder features, scaled like attention.
pub fn dag_transition_scores(g: &mut Graph, cfg: &ModelConfig, feats: NodeId) -> Result<NodeId> {
    let wq = g.node("dag.wq")?;
    let wk = g.node("dag.wk")?;
    let q = g.tape.matmul(feats, wq)?;
    let k = g.tape.matmul(feats, wk)?;
    let kt = g.tape.transpose(k);
    let s = g.tape.matmul(q, kt)?;
    Ok(g.tape.scale(s, 1.0 / (cfg.d_model as f64).sqrt()))
}

/// Strictly-upper-triangular allowed mask for vertex transitions; the last
/// row is empty (terminal vertex).
pub fn upper_triangular_mask(m: usize) -> Mask {
    Mask::from_fn(m, m, |i, j| j > i)
}

// ---------------------------------------------------------------------------
// Decoder input plans
// ---------------------------------------------------------------------------

/// Row-by-row recipe for decoder inputs, shared by training and inference so
/// the two cannot drift. Each row is either a token embedding or a copied
/// encoder row; `content` marks rows that carry output tokens (false at
/// structural markers).
#[derive(Debug, Clone)]
pub struct DecoderPlan {
    pub tokens: Vec<usize>,
    pub copy_from: Vec<usize>,
    pub use_copy: Vec<bool>,
    pub tags: Vec<usize>,
    pub content: Vec<bool>,
    /// Content span per sentence, half-open over plan rows.
    pub spans: Vec<(usize, usize)>,
}

impl DecoderPlan {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Indices of content rows, in order.
    pub fn content_rows(&self) -> Vec<usize> {
        (0..self.rows()).filter(|&i| self.content[i]).collect()
    }

    pub fn from_tokens(tokens: Vec<usize>, tags: Vec<usize>) -> DecoderPlan {
        let n = tokens.len();
        DecoderPlan {
            tokens,
            copy_from: vec![0; n],
            use_copy: vec![false; n],
            tags,
            content: vec![true; n],
            spans: Vec::new(),
        }
    }
}

/// Evenly spread source row indices over `t_len` rows: `round(t (S-1)/(T-1))`.
pub fn uniform_copy_indices(s_len: usize, t_len: usize) -> Vec<usize> {
    if t_len <= 1 || s_len <= 1 {
        return vec![0; t_len];
    }
    let (s, t) = ((s_len - 1) as f64, (t_len - 1) as f64);
    (0..t_len).map(|i| (i as f64 * s / t).round() as usize).collect()
}

/// Lays out decoder rows for the parallel variants.
///
/// Sentence-framed variants get one block per sentence: a marker row, the
/// sentence's slots, a closing marker row. Slot rows hold the filler token
/// (replaced by reveals) except for graph variants, which copy encoder rows
/// spread within the sentence. Non-framed variants are a single span of
/// copied rows with no markers.
///
/// `src_spans` gives each source sentence's token range; `slot_lens` the slot
/// count per sentence (exactly one entry for non-framed variants).
pub fn nat_decoder_plan(
    cfg: &ModelConfig,
    src_spans: &[(usize, usize)],
    slot_lens: &[usize],
) -> Result<DecoderPlan> {
    if cfg.variant.is_autoregressive() {
        return Err(Error::contract("nat_decoder_plan", "autoregressive variant"));
    }
    if cfg.variant.is_gtrans() {
        if src_spans.len() != slot_lens.len() {
            return Err(Error::shape("nat_decoder_plan", "one slot count per sentence"));
        }
        let mut plan = DecoderPlan {
            tokens: Vec::new(),
            copy_from: Vec::new(),
            use_copy: Vec::new(),
            tags: Vec::new(),
            content: Vec::new(),
            spans: Vec::new(),
        };
        for (j, (&(ss, se), &slots)) in src_spans.iter().zip(slot_lens).enumerate() {
            let push = |plan: &mut DecoderPlan, tok: usize, copy: Option<usize>, content: bool| {
                plan.tokens.push(tok);
                plan.copy_from.push(copy.unwrap_or(0));
                plan.use_copy.push(copy.is_some());
                plan.tags.push(j);
                plan.content.push(content);
            };
            push(&mut plan, BOS, None, false);
            let start = plan.rows();
            let copy_rows = cfg.variant.uses_dag();
            let within = uniform_copy_indices(se - ss, slots);
            for t in 0..slots {
                let copy = if copy_rows { Some(ss + within[t]) } else { None };
                push(&mut plan, UNK, copy, true);
            }
            plan.spans.push((start, start + slots));
            push(&mut plan, EOS, None, false);
        }
        Ok(plan)
    } else {
        if slot_lens.len() != 1 {
            return Err(Error::shape("nat_decoder_plan", "single slot count expected"));
        }
        let s_len = src_spans.last().map(|&(_, e)| e).unwrap_or(0);
        let t = slot_lens[0];
        if t == 0 {
            return Err(Error::contract("nat_decoder_plan", "zero decoder rows"));
        }
        Ok(DecoderPlan {
            tokens: vec![UNK; t],
            copy_from: uniform_copy_indices(s_len, t),
            use_copy: vec![true; t],
            tags: vec![0; t],
            content: vec![true; t],
            spans: vec![(0, t)],
        })
    }
}

/// Materializes plan rows as a `[T, d_model]` input node. `reveal` overrides
/// a row with a target-token embedding (glancing); copied rows keep gradient
/// flow into the encoder.
pub fn decoder_inputs(
    g: &mut Graph,
    cfg: &ModelConfig,
    plan: &DecoderPlan,
    enc: Option<NodeId>,
    reveal: Option<&[Option<usize>]>,
) -> Result<NodeId> {
    let n = plan.rows();
    if n == 0 {
        return Err(Error::contract("decoder_inputs", "empty plan"));
    }
    if let Some(r) = reveal {
        if r.len() != n {
            return Err(Error::shape("decoder_inputs", "one reveal slot per row"));
        }
    }
    let mut tokens = plan.tokens.clone();
    let mut from_embed = vec![false; n];
    for i in 0..n {
        let revealed = reveal.and_then(|r| r[i]);
        if let Some(tok) = revealed {
            tokens[i] = tok;
            from_embed[i] = true;
        } else {
            from_embed[i] = !plan.use_copy[i];
        }
    }
    let positions = positions_from_tags(&plan.tags, cfg.variant.is_gtrans());
    let emb = embed_tokens(g, "embed.tgt", &tokens, &positions)?;
    if from_embed.iter().all(|&b| b) {
        return Ok(emb);
    }
    let enc = enc.ok_or_else(|| {
        Error::contract("decoder_inputs", "plan copies encoder rows but no encoder given")
    })?;
    let copied = g.tape.gather_rows(enc, Rc::new(plan.copy_from.clone()))?;
    let pe = g.tape.constant(sinusoidal_pe(&positions, cfg.d_model));
    let copied = g.tape.add(copied, pe)?;
    g.tape.row_mix(copied, emb, Rc::new(from_embed))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "natckpt v1";

/// Text header (config, vocab, array manifest) followed by a raw
/// little-endian f64 payload. Bit-exact round trip.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    vocab: &Vocab,
    params: &ModelParams,
) -> Result<()> {
    cfg.validate()?;
    if cfg.vocab_size != vocab.len() {
        return Err(Error::contract(
            "save_checkpoint",
            format!("config vocab {} vs vocabulary {}", cfg.vocab_size, vocab.len()),
        ));
    }
    let mut head = String::new();
    head.push_str(CKPT_MAGIC);
    head.push('\n');
    head.push_str("[config]\n");
    head.push_str(&format!("variant={}\n", cfg.variant.as_str()));
    head.push_str(&format!("layers={}\n", cfg.layers));
    head.push_str(&format!("heads={}\n", cfg.heads));
    head.push_str(&format!("d_model={}\n", cfg.d_model));
    head.push_str(&format!("d_ff={}\n", cfg.d_ff));
    head.push_str(&format!("global_layers={}\n", cfg.global_layers));
    head.push_str(&format!("vocab_size={}\n", cfg.vocab_size));
    head.push_str(&format!("max_sentence_len={}\n", cfg.max_sentence_len));
    head.push_str(&format!("max_segment_len={}\n", cfg.max_segment_len));
    head.push_str(&format!("ctc_upsample={}\n", cfg.ctc_upsample));
    head.push_str(&format!("dag_lambda={}\n", cfg.dag_lambda));
    head.push_str(&format!("seed={}\n", cfg.seed));
    head.push_str("[vocab]\n");
    head.push_str(&format!("count={}\n", vocab.len()));
    for id in 0..vocab.len() {
        let tok = vocab.token(id)?;
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::contract(
                "save_checkpoint",
                format!("token {id} not serializable: '{tok}'"),
            ));
        }
        head.push_str(tok);
        head.push('\n');
    }
    head.push_str("[arrays]\n");
    head.push_str(&format!("count={}\n", params.len()));
    let mut offset = 0usize;
    for (name, arr) in params.iter() {
        let dims: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
        offset += arr.numel() * 8;
    }
    head.push_str("[payload]\n");

    let mut bytes = head.into_bytes();
    bytes.reserve(offset);
    for (_, arr) in params.iter() {
        for &x in arr.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

fn header_get<'a>(lines: &'a [&str], key: &str, at: &mut usize) -> Result<&'a str> {
    let line = lines
        .get(*at)
        .ok_or_else(|| Error::data(None, "checkpoint header truncated".to_string()))?;
    *at += 1;
    line.strip_prefix(key)
        .and_then(|s| s.strip_prefix('='))
        .ok_or_else(|| Error::data(None, format!("expected '{key}=' in checkpoint, got '{line}'")))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Vocab, ModelParams)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let marker = b"[payload]\n";
    let payload_at = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::data(None, "no payload marker in checkpoint".to_string()))?;
    let head = std::str::from_utf8(&bytes[..payload_at])
        .map_err(|_| Error::data(None, "checkpoint header is not utf-8".to_string()))?;
    let payload = &bytes[payload_at + marker.len()..];
    let lines: Vec<&str> = head.lines().collect();
    let mut at = 0usize;
    if lines.first() != Some(&CKPT_MAGIC) {
        return Err(Error::data(None, "not a checkpoint file".to_string()));
    }
    at += 1;
    if lines.get(at) != Some(&"[config]") {
        return Err(Error::data(None, "missing [config] section".to_string()));
    }
    at += 1;
    let parse_usize = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::data(None, format!("bad integer '{s}' in checkpoint")))
    };
    let parse_f64 = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::data(None, format!("bad float '{s}' in checkpoint")))
    };
    let variant = Variant::parse(header_get(&lines, "variant", &mut at)?)?;
    let cfg = ModelConfig {
        variant,
        layers: parse_usize(header_get(&lines, "layers", &mut at)?)?,
        heads: parse_usize(header_get(&lines, "heads", &mut at)?)?,
        d_model: parse_usize(header_get(&lines, "d_model", &mut at)?)?,
        d_ff: parse_usize(header_get(&lines, "d_ff", &mut at)?)?,
        global_layers: parse_usize(header_get(&lines, "global_layers", &mut at)?)?,
        vocab_size: parse_usize(header_get(&lines, "vocab_size", &mut at)?)?,
        max_sentence_len: parse_usize(header_get(&lines, "max_sentence_len", &mut at)?)?,
        max_segment_len: parse_usize(header_get(&lines, "max_segment_len", &mut at)?)?,
        ctc_upsample: parse_f64(header_get(&lines, "ctc_upsample", &mut at)?)?,
        dag_lambda: parse_f64(header_get(&lines, "dag_lambda", &mut at)?)?,
        seed: header_get(&lines, "seed", &mut at)?
            .parse()
            .map_err(|_| Error::data(None, "bad seed in checkpoint".to_string()))?,
    };
    cfg.validate()?;
    if lines.get(at) != Some(&"[vocab]") {
        return Err(Error::data(None, "missing [vocab] section".to_string()));
    }
    at += 1;
    let vcount = parse_usize(header_get(&lines, "count", &mut at)?)?;
    let mut tokens = Vec::with_capacity(vcount);
    for _ in 0..vcount {
        let tok = lines
            .get(at)
            .ok_or_else(|| Error::data(None, "vocab truncated in checkpoint".to_string()))?;
        tokens.push(tok.to_string());
        at += 1;
    }
    let vocab = Vocab::from_tokens(tokens)?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::data(None, "checkpoint vocab count mismatch".to_string()));
    }
    if lines.get(at) != Some(&"[arrays]") {
        return Err(Error::data(None, "missing [arrays] section".to_string()));
    }
    at += 1;
    let acount = parse_usize(header_get(&lines, "count", &mut at)?)?;
    let mut arrays = BTreeMap::new();
    for _ in 0..acount {
        let line = lines
            .get(at)
            .ok_or_else(|| Error::data(None, "array manifest truncated".to_string()))?;
        at += 1;
        let mut parts = line.split(' ');
        let (name, dims, off) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(d), Some(o), None) => (n, d, o),
            _ => return Err(Error::data(None, format!("bad array line '{line}'"))),
        };
        let shape: Vec<usize> =
            dims.split('x').map(parse_usize).collect::<Result<_>>()?;
        let offset = parse_usize(off)?;
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(Error::data(None, format!("array '{name}' overruns payload")));
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        arrays.insert(name.to_string(), Array::from_vec(shape, data)?);
    }
    Ok((cfg, vocab, ModelParams::from_arrays(arrays)))
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

/// Encoder features as a plain array (inference-style, no gradients).
pub fn encode_values(
    params: &ModelParams,
    cfg: &ModelConfig,
    src: &[usize],
    src_tags: &[usize],
) -> Result<Array> {
    let mut g = Graph::new(params, false);
    let enc = encoder(&mut g, cfg, src, src_tags)?;
    Ok(g.tape.value(enc).clone())
}

/// Per-span length distribution argmax: predicted length is bin + 1.
pub fn predict_lengths(
    params: &ModelParams,
    cfg: &ModelConfig,
    src: &[usize],
    src_tags: &[usize],
    spans: &[(usize, usize)],
) -> Result<Vec<usize>> {
    let mut g = Graph::new(params, false);
    let enc = encoder(&mut g, cfg, src, src_tags)?;
    let logits = length_logits(&mut g, enc, spans)?;
    let lv = g.tape.value(logits);
    Ok((0..lv.rows()).map(|r| crate::tensor::argmax(lv.row(r)) + 1).collect())
}

/// Frame skeleton for tests and decoders: tokens and tags of a sentence
/// frame with the given slot counts, markers included.
pub fn init_sentence_frame(slot_lens: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if slot_lens.is_empty() {
        return Err(Error::contract("init_sentence_frame", "no sentences"));
    }
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for (j, &t) in slot_lens.iter().enumerate() {
        tokens.push(BOS);
        tags.push(j);
        for _ in 0..t {
            tokens.push(UNK);
            tags.push(j);
        }
        tokens.push(EOS);
        tags.push(j);
    }
    Ok((tokens, tags))
}

/// The filler token occupying un-revealed slots.
pub fn slot_filler() -> usize {
    UNK
}

/// The separator label used by latent-alignment variants.
pub fn blank_id() -> usize {
    BLANK
}
