//! Training objectives.
//!
//! The alignment-marginalizing losses (CTC and the vertex-graph loss) are
//! implemented twice over the same recurrences: a plain value function used by
//! decoders and oracle tests, and a forward-backward pass that produces exact
//! gradients for the fused tape node. Keeping both on one set of helpers means
//! the value the trainer reports is the value the tests check.
//!
//! Conventions shared by every loss here:
//! - log domain throughout; impossible events are `f64::NEG_INFINITY`
//! - emissions are row-normalized log-probabilities, one row per position
//! - per-item losses are normalized by target token count so batch averages
//!   are comparable across lengths

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{logsumexp, lse2, Array, Mask};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Half-open `[start, end)` rows of a frame or emission matrix belonging to
/// one sentence's content slots (markers excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceSpans {
    spans: Vec<(usize, usize)>,
}

impl SentenceSpans {
    /// Validates that spans are in order, non-overlapping, and within `rows`.
    /// Empty spans (`start == end`) are allowed; the CTC wrapper rejects an
    /// empty span itself when a non-empty target needs it.
    pub fn new(spans: Vec<(usize, usize)>, rows: usize) -> Result<Self> {
        let mut prev_end = 0usize;
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s > e || e > rows {
                return Err(Error::contract(
                    "SentenceSpans::new",
                    format!("span {i} = [{s}, {e}) out of bounds for {rows} rows"),
                ));
            }
            if s < prev_end {
                return Err(Error::contract(
                    "SentenceSpans::new",
                    format!("span {i} overlaps or reorders at row {s}"),
                ));
            }
            prev_end = e;
        }
        Ok(Self { spans })
    }

    pub fn as_slice(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn k(&self) -> usize {
        self.spans.len()
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

/// Mean negative log-likelihood of `targets` under `logits` rows selected by
/// `include`. This is the tape-level builder: `logits` is an unnormalized
/// score node, normalization happens inside.
pub fn xe_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: Vec<usize>,
    include: Vec<bool>,
) -> Result<NodeId> {
    let lp = tape.log_softmax(logits);
    tape.nll_mean(lp, Rc::new(targets), Rc::new(include))
}

/// Value-level counterpart used by oracle tests: mean of `-log p[t][y_t]`
/// over included rows of an already-normalized matrix.
pub fn xe_value(logp: &Array, targets: &[usize], include: &[bool]) -> Result<f64> {
    let (n, v) = (logp.rows(), logp.cols());
    if targets.len() != n || include.len() != n {
        return Err(Error::shape("xe_value", "targets/include length mismatch"));
    }
    let mut sum = 0.0;
    let mut cnt = 0usize;
    for t in 0..n {
        if !include[t] {
            continue;
        }
        if targets[t] >= v {
            return Err(Error::contract("xe_value", "target id out of vocab"));
        }
        sum -= logp.at2(t, targets[t]);
        cnt += 1;
    }
    if cnt == 0 {
        return Err(Error::contract("xe_value", "no included positions"));
    }
    Ok(sum / cnt as f64)
}

// ---------------------------------------------------------------------------
// Glancing
// ---------------------------------------------------------------------------

/// Which target positions to feed back in as inputs for the second decoding
/// pass. Selection is not part of the differentiated graph: the plan is
/// computed from first-pass predictions, then the loss is taken given the
/// plan, so finite differences on the second pass stay valid.
#[derive(Debug, Clone)]
pub struct GlancePlan {
    pub revealed: Vec<bool>,
    /// Hamming distance between first-pass prediction and reference over the
    /// candidate positions.
    pub distance: usize,
}

/// Linear ratio decay from `hi` at step 0 to `lo` at step `total - 1`.
pub fn glance_ratio(step: usize, total: usize, hi: f64, lo: f64) -> f64 {
    if total <= 1 {
        return lo;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    hi + (lo - hi) * t
}

/// Picks `ceil(ratio * d)` positions to reveal, uniformly without replacement
/// from all candidates, where `d` is the Hamming distance between `pred` and
/// `gold`. Requires `ratio` in `[0, 1)`: revealing everything would leave the
/// unrevealed cross-entropy with an empty support. The reveal count is
/// additionally capped at `len - 1` so at least one position always remains
/// under loss.
pub fn glancing_reveal(
    pred: &[usize],
    gold: &[usize],
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<GlancePlan> {
    if pred.len() != gold.len() {
        return Err(Error::shape("glancing_reveal", "pred/gold length mismatch"));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(
            "glancing_reveal",
            format!("ratio {ratio} outside [0, 1)"),
        ));
    }
    let n = gold.len();
    let d = pred.iter().zip(gold).filter(|(p, g)| p != g).count();
    let mut reveal = ((ratio * d as f64).ceil() as usize).min(n.saturating_sub(1));
    let mut revealed = vec![false; n];
    // Partial Fisher-Yates over position indices; draw order is what makes
    // the plan deterministic for a given rng stream.
    let mut idx: Vec<usize> = (0..n).collect();
    let mut i = 0usize;
    while reveal > 0 {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
        revealed[idx[i]] = true;
        i += 1;
        reveal -= 1;
    }
    Ok(GlancePlan { revealed, distance: d })
}

// ---------------------------------------------------------------------------
// CTC
// ---------------------------------------------------------------------------

/// Collapses a frame-level label sequence: merge adjacent repeats, then drop
/// blanks. Lives here because the loss recurrence is defined as the sum over
/// all sequences that collapse to the target; decode re-exports it.
pub fn ctc_collapse(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(labels.len());
    let mut prev: Option<usize> = None;
    for &l in labels {
        if prev != Some(l) {
            if l != blank {
                out.push(l);
            }
            prev = Some(l);
        }
    }
    out
}

fn ctc_check(logp: &Array, y: &[usize], blank: usize) -> Result<(usize, usize)> {
    let (m, v) = (logp.rows(), logp.cols());
    if blank >= v {
        return Err(Error::contract("ctc", "blank id out of vocab"));
    }
    if y.iter().any(|&t| t >= v) {
        return Err(Error::contract("ctc", "target id out of vocab"));
    }
    if y.iter().any(|&t| t == blank) {
        return Err(Error::contract("ctc", "target contains the blank id"));
    }
    if m == 0 {
        return Err(Error::contract("ctc", "zero emission rows"));
    }
    Ok((m, v))
}

/// Extended target `[blank, y_0, blank, y_1, ..., blank]` of length 2|y|+1.
fn ctc_extend(y: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(blank);
    for &t in y {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// In the extended target, state `s` may receive from `s`, `s-1`, and also
/// `s-2` when skipping the in-between blank is legal (label differs from the
/// one two back).
fn ctc_can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Total log-probability that frame-level emissions collapse to `y`.
/// `logp` is `[M, V]` row-normalized. Returns `-inf` when `y` is infeasible
/// for `M` frames (too long, or repeats need more room than `M` allows);
/// infeasibility is a value, not an error, so training can skip and count.
pub fn ctc_log_prob(logp: &Array, y: &[usize], blank: usize) -> Result<f64> {
    let (m, _) = ctc_check(logp, y, blank)?;
    if y.is_empty() {
        // Only the all-blank path collapses to an empty target.
        let mut acc = 0.0;
        for t in 0..m {
            acc += logp.at2(t, blank);
        }
        return Ok(acc);
    }
    let ext = ctc_extend(y, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; s_len];
    alpha[0] = logp.at2(0, ext[0]);
    if s_len > 1 {
        alpha[1] = logp.at2(0, ext[1]);
    }
    let mut next = vec![neg; s_len];
    for t in 1..m {
        for (s, nx) in next.iter_mut().enumerate() {
            let mut acc = alpha[s];
            if s >= 1 {
                acc = lse2(acc, alpha[s - 1]);
            }
            if ctc_can_skip(&ext, s, blank) {
                acc = lse2(acc, alpha[s - 2]);
            }
            *nx = if acc == neg { neg } else { acc + logp.at2(t, ext[s]) };
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    Ok(lse2(alpha[s_len - 1], alpha[s_len - 2]))
}

/// Forward-backward gradient of `log p(y)` with respect to the emission
/// log-probabilities. Returns `None` when the target is infeasible.
///
/// With `alpha[t][s]` including the emission at `t` and `beta[t][s]`
/// excluding it, the posterior of passing through extended state `s` at frame
/// `t` is `exp(alpha + beta - logZ)`; d logZ / d logp[t][c] is the summed
/// posterior of the states labeled `c`.
pub fn ctc_grad(logp: &Array, y: &[usize], blank: usize) -> Result<Option<(f64, Array)>> {
    let (m, v) = ctc_check(logp, y, blank)?;
    if y.is_empty() {
        let mut grad = Array::zeros(vec![m, v]);
        let mut acc = 0.0;
        for t in 0..m {
            acc += logp.at2(t, blank);
            grad.set2(t, blank, 1.0);
        }
        return Ok(Some((acc, grad)));
    }
    let ext = ctc_extend(y, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;

    let mut alpha = Array::filled(vec![m, s_len], neg);
    alpha.set2(0, 0, logp.at2(0, ext[0]));
    if s_len > 1 {
        alpha.set2(0, 1, logp.at2(0, ext[1]));
    }
    for t in 1..m {
        for s in 0..s_len {
            let mut acc = alpha.at2(t - 1, s);
            if s >= 1 {
                acc = lse2(acc, alpha.at2(t - 1, s - 1));
            }
            if ctc_can_skip(&ext, s, blank) {
                acc = lse2(acc, alpha.at2(t - 1, s - 2));
            }
            if acc != neg {
                alpha.set2(t, s, acc + logp.at2(t, ext[s]));
            }
        }
    }
    let log_z = lse2(alpha.at2(m - 1, s_len - 1), alpha.at2(m - 1, s_len - 2));
    if log_z == neg {
        return Ok(None);
    }

    // beta[t][s]: log-prob of finishing from state s at frame t, excluding
    // the emission at t itself.
    let mut beta = Array::filled(vec![m, s_len], neg);
    beta.set2(m - 1, s_len - 1, 0.0);
    beta.set2(m - 1, s_len - 2, 0.0);
    for t in (0..m - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta.at2(t + 1, s) + logp.at2(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = lse2(acc, beta.at2(t + 1, s + 1) + logp.at2(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && ctc_can_skip(&ext, s + 2, blank) {
                acc = lse2(acc, beta.at2(t + 1, s + 2) + logp.at2(t + 1, ext[s + 2]));
            }
            beta.set2(t, s, acc);
        }
    }

    let mut grad = Array::zeros(vec![m, v]);
    for t in 0..m {
        for s in 0..s_len {
            let a = alpha.at2(t, s);
            let b = beta.at2(t, s);
            if a == neg || b == neg {
                continue;
            }
            let post = (a + b - log_z).exp();
            let c = ext[s];
            grad.set2(t, c, grad.at2(t, c) + post);
        }
    }
    Ok(Some((log_z, grad)))
}

/// Most probable single frame-level alignment whose collapse is `y`
/// (Viterbi over the same extended-state lattice). Returns one label per
/// frame, or `None` when infeasible. Used to place glancing reveals for the
/// latent-alignment variants: the reveal token for a frame is the aligned
/// label, blanks included.
pub fn ctc_viterbi_align(logp: &Array, y: &[usize], blank: usize) -> Result<Option<Vec<usize>>> {
    let (m, _) = ctc_check(logp, y, blank)?;
    if y.is_empty() {
        return Ok(Some(vec![blank; m]));
    }
    let ext = ctc_extend(y, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;
    let mut score = Array::filled(vec![m, s_len], neg);
    let mut from = vec![vec![0usize; s_len]; m];
    score.set2(0, 0, logp.at2(0, ext[0]));
    if s_len > 1 {
        score.set2(0, 1, logp.at2(0, ext[1]));
    }
    for t in 1..m {
        for s in 0..s_len {
            let mut best = score.at2(t - 1, s);
            let mut arg = s;
            if s >= 1 && score.at2(t - 1, s - 1) > best {
                best = score.at2(t - 1, s - 1);
                arg = s - 1;
            }
            if ctc_can_skip(&ext, s, blank) && score.at2(t - 1, s - 2) > best {
                best = score.at2(t - 1, s - 2);
                arg = s - 2;
            }
            if best != neg {
                score.set2(t, s, best + logp.at2(t, ext[s]));
                from[t][s] = arg;
            }
        }
    }
    let (mut s, end) = if score.at2(m - 1, s_len - 1) >= score.at2(m - 1, s_len - 2) {
        (s_len - 1, score.at2(m - 1, s_len - 1))
    } else {
        (s_len - 2, score.at2(m - 1, s_len - 2))
    };
    if end == neg {
        return Ok(None);
    }
    let mut labels = vec![0usize; m];
    for t in (0..m).rev() {
        labels[t] = ext[s];
        if t > 0 {
            s = from[t][s];
        }
    }
    Ok(Some(labels))
}

/// Fused tape node: `-log p_ctc(y | emissions)` where `emissions` is an
/// already log-normalized `[M, V]` node. Returns `None` if infeasible so the
/// caller can skip the item without touching the tape output.
pub fn ctc_loss_node(
    tape: &mut Tape,
    emissions: NodeId,
    y: &[usize],
    blank: usize,
) -> Result<Option<NodeId>> {
    let logp = tape.value(emissions).clone();
    let Some((log_z, grad_emit)) = ctc_grad(&logp, y, blank)? else {
        return Ok(None);
    };
    let node = tape.custom_scalar(
        vec![emissions],
        -log_z,
        Rc::new(move |_vals, g| vec![grad_emit.map(|x| -x * g)]),
    );
    Ok(Some(node))
}

/// Per-sentence CTC over reserved spans: the sum over sentences of
/// `-log p_ctc(y_j | emissions over span j)`. The whole sum is one fused node
/// so composite losses can weight it as a unit. `None` if any sentence is
/// infeasible (the item is skipped, consistent with the flat loss).
pub fn sentence_ctc_loss_node(
    tape: &mut Tape,
    emissions: NodeId,
    spans: &SentenceSpans,
    targets: &[Vec<usize>],
    blank: usize,
) -> Result<Option<NodeId>> {
    if targets.len() != spans.k() {
        return Err(Error::shape(
            "sentence_ctc",
            "one target per sentence span required",
        ));
    }
    let full = tape.value(emissions).clone();
    let (rows, v) = (full.rows(), full.cols());
    let mut total = 0.0;
    let mut grad = Array::zeros(vec![rows, v]);
    for (j, (&(s, e), y)) in spans.as_slice().iter().zip(targets).enumerate() {
        if s == e {
            if y.is_empty() {
                continue;
            }
            return Err(Error::contract(
                "sentence_ctc",
                format!("sentence {j} has a non-empty target but an empty span"),
            ));
        }
        let sub = Array::from_fn(e - s, v, |i, c| full.at2(s + i, c));
        let Some((log_z, g)) = ctc_grad(&sub, y, blank)? else {
            return Ok(None);
        };
        total -= log_z;
        for i in 0..(e - s) {
            for c in 0..v {
                grad.set2(s + i, c, grad.at2(s + i, c) - g.at2(i, c));
            }
        }
    }
    let node = tape.custom_scalar(
        vec![emissions],
        total,
        Rc::new(move |_vals, gout| vec![grad.map(|x| x * gout)]),
    );
    Ok(Some(node))
}

/// Value-level counterpart: sum over sentences of per-span `ctc_log_prob`.
pub fn sentence_ctc_log_prob(
    logp: &Array,
    spans: &SentenceSpans,
    targets: &[Vec<usize>],
    blank: usize,
) -> Result<f64> {
    if targets.len() != spans.k() {
        return Err(Error::shape(
            "sentence_ctc",
            "one target per sentence span required",
        ));
    }
    let v = logp.cols();
    let mut total = 0.0;
    for (&(s, e), y) in spans.as_slice().iter().zip(targets) {
        if s == e {
            if y.is_empty() {
                continue;
            }
            return Ok(f64::NEG_INFINITY);
        }
        let sub = Array::from_fn(e - s, v, |i, c| logp.at2(s + i, c));
        total += ctc_log_prob(&sub, y, blank)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Vertex-graph loss
// ---------------------------------------------------------------------------

/// A decoding lattice over `M` vertices: per-vertex token emissions and
/// row-normalized transition log-probabilities restricted to `j > i`.
/// Row `M-1` is terminal (all `-inf`). Paths start at vertex 0, end at
/// vertex `M-1`, and emit one token per visited vertex.
#[derive(Debug, Clone)]
pub struct DagGraph {
    pub emit_logp: Array,
    pub trans_logp: Array,
}

impl DagGraph {
    pub fn new(emit_logp: Array, trans_logp: Array) -> Result<Self> {
        let m = emit_logp.rows();
        if trans_logp.rows() != m || trans_logp.cols() != m {
            return Err(Error::shape("DagGraph::new", "transition matrix must be [M, M]"));
        }
        if m < 2 {
            return Err(Error::contract("DagGraph::new", "need at least 2 vertices"));
        }
        for i in 0..m {
            for j in 0..=i {
                if trans_logp.at2(i, j) != f64::NEG_INFINITY {
                    return Err(Error::contract(
                        "DagGraph::new",
                        format!("transition {i} -> {j} must be -inf (not strictly forward)"),
                    ));
                }
            }
        }
        Ok(Self { emit_logp, trans_logp })
    }

    pub fn m(&self) -> usize {
        self.emit_logp.rows()
    }
}

fn dag_check_target(g: &DagGraph, y: &[usize], eos: usize) -> Result<()> {
    let v = g.emit_logp.cols();
    if y.is_empty() || *y.last().unwrap() != eos {
        return Err(Error::contract(
            "dag_log_prob",
            "target must end with the terminal token",
        ));
    }
    if y.iter().any(|&t| t >= v) {
        return Err(Error::contract("dag_log_prob", "target id out of vocab"));
    }
    Ok(())
}

/// `log sum_paths p(path) p(y | path)` over all vertex paths
/// `0 = v_0 < ... < v_{n-1} = M-1` of length `|y|`. Targets longer than `M`
/// are infeasible and yield `-inf`.
pub fn dag_log_prob(g: &DagGraph, y: &[usize], eos: usize) -> Result<f64> {
    dag_check_target(g, y, eos)?;
    let m = g.m();
    let n = y.len();
    if n > m {
        return Ok(f64::NEG_INFINITY);
    }
    let neg = f64::NEG_INFINITY;
    // alpha[u] after consuming y[..=i]: log-prob of paths ending at vertex u.
    let mut alpha = vec![neg; m];
    alpha[0] = g.emit_logp.at2(0, y[0]);
    let mut next = vec![neg; m];
    for yi in y.iter().skip(1) {
        for (u, nx) in next.iter_mut().enumerate() {
            let mut acc = neg;
            for (v, &a) in alpha.iter().enumerate().take(u) {
                if a != neg {
                    acc = lse2(acc, a + g.trans_logp.at2(v, u));
                }
            }
            *nx = if acc == neg { neg } else { acc + g.emit_logp.at2(u, *yi) };
        }
        std::mem::swap(&mut alpha, &mut next);
        next.iter_mut().for_each(|x| *x = neg);
    }
    Ok(alpha[m - 1])
}

/// Forward-backward gradients of `log p(y)` w.r.t. emission and transition
/// log-probabilities. `None` when infeasible.
///
/// `alpha[i][u]` includes the emission at step i; `beta[i][u]` is the
/// log-prob of completing `y[i+1..]` from vertex `u`, excluding step i's
/// emission. Then d logZ / d emit[u][y_i] sums `exp(alpha[i][u] + beta[i][u]
/// - logZ)` and d logZ / d trans[u][w] sums the posterior of using that edge
/// between consecutive steps.
pub fn dag_grad(g: &DagGraph, y: &[usize], eos: usize) -> Result<Option<(f64, Array, Array)>> {
    dag_check_target(g, y, eos)?;
    let m = g.m();
    let n = y.len();
    let v_sz = g.emit_logp.cols();
    if n > m {
        return Ok(None);
    }
    let neg = f64::NEG_INFINITY;

    let mut alpha = Array::filled(vec![n, m], neg);
    alpha.set2(0, 0, g.emit_logp.at2(0, y[0]));
    for i in 1..n {
        for u in 0..m {
            let mut acc = neg;
            for v in 0..u {
                let a = alpha.at2(i - 1, v);
                if a != neg {
                    acc = lse2(acc, a + g.trans_logp.at2(v, u));
                }
            }
            if acc != neg {
                alpha.set2(i, u, acc + g.emit_logp.at2(u, y[i]));
            }
        }
    }
    let log_z = alpha.at2(n - 1, m - 1);
    if log_z == neg {
        return Ok(None);
    }

    let mut beta = Array::filled(vec![n, m], neg);
    beta.set2(n - 1, m - 1, 0.0);
    for i in (0..n - 1).rev() {
        for u in 0..m {
            let mut acc = neg;
            for w in (u + 1)..m {
                let b = beta.at2(i + 1, w);
                if b != neg {
                    acc = lse2(acc, g.trans_logp.at2(u, w) + g.emit_logp.at2(w, y[i + 1]) + b);
                }
            }
            beta.set2(i, u, acc);
        }
    }

    let mut g_emit = Array::zeros(vec![m, v_sz]);
    let mut g_trans = Array::zeros(vec![m, m]);
    for i in 0..n {
        for u in 0..m {
            let a = alpha.at2(i, u);
            let b = beta.at2(i, u);
            if a != neg && b != neg {
                let post = (a + b - log_z).exp();
                g_emit.set2(u, y[i], g_emit.at2(u, y[i]) + post);
            }
        }
        if i + 1 < n {
            for u in 0..m {
                let a = alpha.at2(i, u);
                if a == neg {
                    continue;
                }
                for w in (u + 1)..m {
                    let b = beta.at2(i + 1, w);
                    if b == neg {
                        continue;
                    }
                    let post = (a + g.trans_logp.at2(u, w) + g.emit_logp.at2(w, y[i + 1]) + b
                        - log_z)
                        .exp();
                    if post != 0.0 {
                        g_trans.set2(u, w, g_trans.at2(u, w) + post);
                    }
                }
            }
        }
    }
    Ok(Some((log_z, g_emit, g_trans)))
}

/// Fused tape node: `-log p(y)` over the lattice whose emission and
/// transition nodes are already log-normalized. `None` if infeasible.
pub fn dag_loss_node(
    tape: &mut Tape,
    emit_logp: NodeId,
    trans_logp: NodeId,
    y: &[usize],
    eos: usize,
) -> Result<Option<NodeId>> {
    let g = DagGraph::new(tape.value(emit_logp).clone(), tape.value(trans_logp).clone())?;
    let Some((log_z, g_emit, g_trans)) = dag_grad(&g, y, eos)? else {
        return Ok(None);
    };
    let node = tape.custom_scalar(
        vec![emit_logp, trans_logp],
        -log_z,
        Rc::new(move |_vals, gout| vec![g_emit.map(|x| -x * gout), g_trans.map(|x| -x * gout)]),
    );
    Ok(Some(node))
}

// ---------------------------------------------------------------------------
// Sentence masking for vertex graphs
// ---------------------------------------------------------------------------

/// Allowed-transition mask for a sentence-tagged vertex sequence: forward
/// edges within a sentence, plus the single boundary edge from a sentence's
/// last vertex to the next sentence's first vertex. Everything else (skips,
/// other cross-sentence edges) is disallowed.
pub fn sentence_transition_mask(tags: &[usize]) -> Result<Mask> {
    let m = tags.len();
    if m == 0 {
        return Err(Error::contract("sentence_transition_mask", "no vertices"));
    }
    if tags[0] != 0 {
        return Err(Error::contract("sentence_transition_mask", "tags must start at 0"));
    }
    for w in tags.windows(2) {
        if w[1] != w[0] && w[1] != w[0] + 1 {
            return Err(Error::contract(
                "sentence_transition_mask",
                "tags must be non-decreasing in steps of one",
            ));
        }
    }
    Ok(Mask::from_fn(m, m, |i, j| {
        if j <= i {
            return false;
        }
        if tags[j] == tags[i] {
            return true;
        }
        // Boundary: i is the last vertex of its sentence, j the first of the
        // next. Blocks are contiguous so this forces j == i + 1.
        tags[j] == tags[i] + 1 && j == i + 1
    }))
}

/// Restricts a normalized transition matrix to sentence-legal edges and
/// renormalizes each surviving row over its allowed set. Rows with no
/// allowed edges (the terminal vertex) become all `-inf`.
pub fn apply_sentence_mask(trans_logp: &Array, tags: &[usize]) -> Result<Array> {
    let m = trans_logp.rows();
    if trans_logp.cols() != m || tags.len() != m {
        return Err(Error::shape("apply_sentence_mask", "tags must match [M, M] matrix"));
    }
    let mask = sentence_transition_mask(tags)?;
    let neg = f64::NEG_INFINITY;
    let mut out = Array::filled(vec![m, m], neg);
    for i in 0..m {
        let row: Vec<f64> = (0..m)
            .map(|j| if mask.get(i, j) { trans_logp.at2(i, j) } else { neg })
            .collect();
        let z = logsumexp(&row);
        if z == neg {
            continue;
        }
        for (j, &r) in row.iter().enumerate() {
            if r != neg {
                out.set2(i, j, r - z);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Length loss
// ---------------------------------------------------------------------------

/// Mean cross-entropy of true span lengths under the length classifier.
/// `length_logits` is `[K, B]`; bin `b` means length `b + 1`. Lengths are
/// clamped into `[1, B]` so overlong sentences still train the top bin.
pub fn length_loss(tape: &mut Tape, length_logits: NodeId, true_lens: &[usize]) -> Result<NodeId> {
    let bins = tape.value(length_logits).cols();
    if true_lens.is_empty() {
        return Err(Error::contract("length_loss", "no spans"));
    }
    let targets: Vec<usize> = true_lens.iter().map(|&l| l.clamp(1, bins) - 1).collect();
    let include = vec![true; targets.len()];
    let lp = tape.log_softmax(length_logits);
    tape.nll_mean(lp, Rc::new(targets), Rc::new(include))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_softmax;
    use rand::SeedableRng;

    fn rand_logp(rows: usize, cols: usize, seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0));
        log_softmax(&raw)
    }

    #[test]
    fn xe_uniform_is_ln_vocab() {
        let v = 7usize;
        let logp = log_softmax(&Array::zeros(vec![3, v]));
        let loss = xe_value(&logp, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn glancing_reveal_count_tracks_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gold = vec![1, 2, 3, 4, 5, 6, 7, 8];
        let pred = vec![1, 9, 9, 9, 9, 6, 7, 8]; // d = 4
        let plan = glancing_reveal(&pred, &gold, 0.5, &mut rng).unwrap();
        assert_eq!(plan.distance, 4);
        assert_eq!(plan.revealed.iter().filter(|&&r| r).count(), 2);
    }

    #[test]
    fn glancing_never_reveals_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gold = vec![3];
        let pred = vec![4]; // d = 1, ceil(0.9 * 1) = 1, capped to 0
        let plan = glancing_reveal(&pred, &gold, 0.9, &mut rng).unwrap();
        assert_eq!(plan.revealed.iter().filter(|&&r| r).count(), 0);
    }

    #[test]
    fn glancing_rejects_ratio_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(glancing_reveal(&[1], &[2], 1.0, &mut rng).is_err());
    }

    #[test]
    fn collapse_merges_then_drops() {
        assert_eq!(ctc_collapse(&[5, 5, 0, 6], 0), vec![5, 6]);
        assert_eq!(ctc_collapse(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(ctc_collapse(&[5, 0, 5], 0), vec![5, 5]);
    }

    #[test]
    fn repeat_needs_separator_frame() {
        // Two frames cannot produce "a a": the repeat needs a blank between.
        let logp = rand_logp(2, 4, 1);
        assert_eq!(ctc_log_prob(&logp, &[1, 1], 0).unwrap(), f64::NEG_INFINITY);
        let logp3 = rand_logp(3, 4, 2);
        assert!(ctc_log_prob(&logp3, &[1, 1], 0).unwrap() > f64::NEG_INFINITY);
    }

    /// Enumerates all V^M frame sequences and sums those collapsing to y.
    fn ctc_brute(logp: &Array, y: &[usize], blank: usize) -> f64 {
        let m = logp.rows();
        let v = logp.cols();
        let mut total = f64::NEG_INFINITY;
        let mut labels = vec![0usize; m];
        loop {
            if ctc_collapse(&labels, blank) == y {
                let lp: f64 = labels.iter().enumerate().map(|(t, &c)| logp.at2(t, c)).sum();
                total = lse2(total, lp);
            }
            let mut k = 0;
            loop {
                if k == m {
                    return total;
                }
                labels[k] += 1;
                if labels[k] < v {
                    break;
                }
                labels[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn ctc_matches_enumeration() {
        for seed in 0..6 {
            let logp = rand_logp(4, 4, 100 + seed);
            for y in [vec![1], vec![1, 2], vec![2, 2], vec![1, 2, 3], vec![]] {
                let dp = ctc_log_prob(&logp, &y, 0).unwrap();
                let brute = ctc_brute(&logp, &y, 0);
                if brute == f64::NEG_INFINITY {
                    assert_eq!(dp, f64::NEG_INFINITY);
                } else {
                    assert!((dp - brute).abs() < 1e-9, "seed {seed} y {y:?}: {dp} vs {brute}");
                }
            }
        }
    }

    #[test]
    fn three_frames_two_labels_has_five_alignments() {
        // Frame sequences collapsing to "a b" with M = 3: aab, abb, ab_, a_b,
        // _ab (with _ the blank). Uniform emissions make each path (1/V)^3.
        let v = 4usize;
        let logp = log_softmax(&Array::zeros(vec![3, v]));
        let got = ctc_log_prob(&logp, &[1, 2], 0).unwrap();
        let want = (5.0f64).ln() - 3.0 * (v as f64).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ctc_grad_matches_finite_difference() {
        let raw = {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            Array::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0))
        };
        let y = vec![1, 2];
        // Differentiate the composition -ctc(log_softmax(raw)) so the check
        // covers the same pipeline the trainer uses.
        let loss_of = |a: &Array| -ctc_log_prob(&log_softmax(a), &y, 0).unwrap();
        let logp = log_softmax(&raw);
        let (_, g_logp) = ctc_grad(&logp, &y, 0).unwrap().unwrap();
        // d(-logZ)/d logp = -g_logp, then chain through log_softmax rows:
        // dL/draw[c] = g[c] - softmax[c] * sum_c' g[c'].
        let mut analytic = Array::zeros(vec![4, 4]);
        for t in 0..4 {
            let row_sum: f64 = (0..4).map(|c| -g_logp.at2(t, c)).sum();
            for c in 0..4 {
                let sm = logp.at2(t, c).exp();
                analytic.set2(t, c, -g_logp.at2(t, c) - sm * row_sum);
            }
        }
        let eps = 1e-6;
        for i in 0..16 {
            let mut hi = raw.clone();
            hi.data_mut()[i] += eps;
            let mut lo = raw.clone();
            lo.data_mut()[i] -= eps;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
            assert!((fd - analytic.data()[i]).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn viterbi_alignment_collapses_to_target() {
        for seed in 0..8 {
            let logp = rand_logp(5, 5, 300 + seed);
            let y = vec![1, 2, 2];
            let align = ctc_viterbi_align(&logp, &y, 0).unwrap().unwrap();
            assert_eq!(align.len(), 5);
            assert_eq!(ctc_collapse(&align, 0), y);
        }
    }

    #[test]
    fn sentence_ctc_single_sentence_equals_flat() {
        let logp = rand_logp(6, 5, 42);
        let spans = SentenceSpans::new(vec![(0, 6)], 6).unwrap();
        let y = vec![1, 2, 3];
        let split = sentence_ctc_log_prob(&logp, &spans, &[y.clone()], 0).unwrap();
        let flat = ctc_log_prob(&logp, &y, 0).unwrap();
        assert_eq!(split.to_bits(), flat.to_bits());
    }

    #[test]
    fn sentence_ctc_is_product_of_spans() {
        let logp = rand_logp(7, 5, 43);
        let spans = SentenceSpans::new(vec![(0, 4), (4, 7)], 7).unwrap();
        let ys = vec![vec![1, 2], vec![3]];
        let split = sentence_ctc_log_prob(&logp, &spans, &ys, 0).unwrap();
        let v = 5;
        let sub0 = Array::from_fn(4, v, |i, c| logp.at2(i, c));
        let sub1 = Array::from_fn(3, v, |i, c| logp.at2(4 + i, c));
        let manual =
            ctc_log_prob(&sub0, &ys[0], 0).unwrap() + ctc_log_prob(&sub1, &ys[1], 0).unwrap();
        assert!((split - manual).abs() < 1e-12);
    }

    #[test]
    fn sentence_ctc_never_exceeds_unrestricted() {
        // Restricting alignments can only remove probability mass.
        for seed in 0..5 {
            let logp = rand_logp(8, 5, 500 + seed);
            let spans = SentenceSpans::new(vec![(0, 4), (4, 8)], 8).unwrap();
            let ys = vec![vec![1, 2], vec![3, 4]];
            let split = sentence_ctc_log_prob(&logp, &spans, &ys, 0).unwrap();
            let flat: Vec<usize> = ys.iter().flatten().copied().collect();
            let unres = ctc_log_prob(&logp, &flat, 0).unwrap();
            assert!(split <= unres + 1e-12, "seed {seed}: {split} > {unres}");
        }
    }

    fn rand_graph(m: usize, v: usize, seed: u64) -> DagGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emit = log_softmax(&Array::from_fn(m, v, |_, _| rng.gen_range(-2.0..2.0)));
        let mut trans = Array::filled(vec![m, m], f64::NEG_INFINITY);
        for i in 0..m - 1 {
            let row: Vec<f64> = (i + 1..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z = logsumexp(&row);
            for (k, &r) in row.iter().enumerate() {
                trans.set2(i, i + 1 + k, r - z);
            }
        }
        DagGraph::new(emit, trans).unwrap()
    }

    fn dag_brute(g: &DagGraph, y: &[usize]) -> f64 {
        // Enumerate increasing vertex paths 0 = v_0 < ... < v_{n-1} = M-1.
        fn rec(g: &DagGraph, y: &[usize], pos: usize, at: usize, acc: f64, total: &mut f64) {
            let m = g.m();
            if pos == y.len() {
                if at == m - 1 {
                    *total = lse2(*total, acc);
                }
                return;
            }
            for next in (at + 1)..m {
                rec(
                    g,
                    y,
                    pos + 1,
                    next,
                    acc + g.trans_logp.at2(at, next) + g.emit_logp.at2(next, y[pos]),
                    total,
                );
            }
        }
        let mut total = f64::NEG_INFINITY;
        rec(g, y, 1, 0, g.emit_logp.at2(0, y[0]), &mut total);
        total
    }

    #[test]
    fn dag_matches_enumeration() {
        for seed in 0..6 {
            let g = rand_graph(6, 5, 700 + seed);
            for y in [vec![1, 4], vec![1, 2, 4], vec![1, 2, 3, 4], vec![1, 1, 2, 3, 3, 4]] {
                let dp = dag_log_prob(&g, &y, 4).unwrap();
                let brute = dag_brute(&g, &y);
                assert!((dp - brute).abs() < 1e-9, "seed {seed} y {y:?}");
            }
        }
    }

    #[test]
    fn dag_single_forced_path() {
        // M = 3 and |y| = 2: only the path 0 -> 2 fits.
        let g = rand_graph(3, 5, 11);
        let y = vec![1, 4];
        let want = g.emit_logp.at2(0, 1) + g.trans_logp.at2(0, 2) + g.emit_logp.at2(2, 4);
        let got = dag_log_prob(&g, &y, 4).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn dag_two_paths_m4() {
        // M = 4, |y| = 3: paths 0-1-3 and 0-2-3.
        let g = rand_graph(4, 5, 12);
        let y = vec![1, 2, 4];
        let p1 = g.emit_logp.at2(0, 1)
            + g.trans_logp.at2(0, 1)
            + g.emit_logp.at2(1, 2)
            + g.trans_logp.at2(1, 3)
            + g.emit_logp.at2(3, 4);
        let p2 = g.emit_logp.at2(0, 1)
            + g.trans_logp.at2(0, 2)
            + g.emit_logp.at2(2, 2)
            + g.trans_logp.at2(2, 3)
            + g.emit_logp.at2(3, 4);
        let got = dag_log_prob(&g, &y, 4).unwrap();
        assert!((got - lse2(p1, p2)).abs() < 1e-12);
    }

    #[test]
    fn dag_full_length_uses_every_vertex() {
        let g = rand_graph(4, 5, 13);
        let y = vec![1, 2, 3, 4];
        let mut want = g.emit_logp.at2(0, 1);
        for i in 0..3 {
            want += g.trans_logp.at2(i, i + 1) + g.emit_logp.at2(i + 1, y[i + 1]);
        }
        let got = dag_log_prob(&g, &y, 4).unwrap();
        assert!((got - want).abs() < 1e-12);
        // One token longer than M is infeasible.
        let long = vec![1, 2, 3, 1, 4];
        assert_eq!(dag_log_prob(&g, &long, 4).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn dag_grad_matches_finite_difference() {
        let g = rand_graph(5, 4, 21);
        let y = vec![1, 2, 3];
        let (_, g_emit, g_trans) = dag_grad(&g, &y, 3).unwrap().unwrap();
        let eps = 1e-6;
        // Probe raw entries directly: the fused node's inputs are free
        // log-potentials, normalization is the caller's concern.
        for (u, c) in [(0usize, 1usize), (1, 2), (2, 2), (4, 3), (3, 1)] {
            let mut hi = g.clone();
            hi.emit_logp.set2(u, c, hi.emit_logp.at2(u, c) + eps);
            let mut lo = g.clone();
            lo.emit_logp.set2(u, c, lo.emit_logp.at2(u, c) - eps);
            let fd = (dag_log_prob(&hi, &y, 3).unwrap() - dag_log_prob(&lo, &y, 3).unwrap())
                / (2.0 * eps);
            assert!((fd - g_emit.at2(u, c)).abs() < 1e-6, "emit {u} {c}");
        }
        for (u, w) in [(0usize, 1usize), (0, 2), (1, 3), (2, 4), (3, 4)] {
            let mut hi = g.clone();
            hi.trans_logp.set2(u, w, hi.trans_logp.at2(u, w) + eps);
            let mut lo = g.clone();
            lo.trans_logp.set2(u, w, lo.trans_logp.at2(u, w) - eps);
            let fd = (dag_log_prob(&hi, &y, 3).unwrap() - dag_log_prob(&lo, &y, 3).unwrap())
                / (2.0 * eps);
            assert!((fd - g_trans.at2(u, w)).abs() < 1e-6, "trans {u} {w}");
        }
    }

    #[test]
    fn sentence_mask_allows_only_forward_and_boundary() {
        // Two sentences of 3 vertices each (M = 6): allowed edges are forward
        // within each block plus exactly 2 -> 3.
        let tags = [0, 0, 0, 1, 1, 1];
        let mask = sentence_transition_mask(&tags).unwrap();
        let mut allowed = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                if mask.get(i, j) {
                    allowed.push((i, j));
                }
            }
        }
        assert_eq!(allowed, vec![(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (4, 5)]);
    }

    #[test]
    fn masked_rows_renormalize() {
        let g = rand_graph(6, 5, 31);
        let tags = [0, 0, 0, 1, 1, 1];
        let masked = apply_sentence_mask(&g.trans_logp, &tags).unwrap();
        for i in 0..5 {
            let row: Vec<f64> = (0..6).map(|j| masked.at2(i, j)).collect();
            let z = logsumexp(&row);
            assert!(z.abs() < 1e-12, "row {i} sums to {z}");
        }
        // Cross-sentence skip 1 -> 4 must be dead even though 1 < 4.
        assert_eq!(masked.at2(1, 4), f64::NEG_INFINITY);
        assert!(masked.at2(2, 3) > f64::NEG_INFINITY);
    }

    #[test]
    fn one_vertex_sentences_force_boundary_edges() {
        let g = rand_graph(2, 4, 33);
        let masked = apply_sentence_mask(&g.trans_logp, &[0, 1]).unwrap();
        // Only edge is 0 -> 1 and it must carry all mass.
        assert!(masked.at2(0, 1).abs() < 1e-12);
    }

    #[test]
    fn length_loss_uniform_is_ln_bins() {
        let mut tape = Tape::new();
        let logits = tape.constant(Array::zeros(vec![2, 8]));
        let node = length_loss(&mut tape, logits, &[3, 5]).unwrap();
        assert!((tape.value(node).item() - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn fused_nodes_expose_values() {
        let mut tape = Tape::new();
        let logp = rand_logp(4, 5, 77);
        let emissions = tape.param(logp.clone());
        let y = vec![1, 2];
        let node = ctc_loss_node(&mut tape, emissions, &y, 0).unwrap().unwrap();
        let want = -ctc_log_prob(&logp, &y, 0).unwrap();
        assert!((tape.value(node).item() - want).abs() < 1e-12);
    }

    #[test]
    fn fused_ctc_grad_flows_through_tape() {
        let mut tape = Tape::new();
        let logp = rand_logp(4, 5, 78);
        let emissions = tape.param(logp.clone());
        let y = vec![1, 2];
        let node = ctc_loss_node(&mut tape, emissions, &y, 0).unwrap().unwrap();
        let grads = tape.grads_for(node, &[emissions]).unwrap();
        let (_, g) = ctc_grad(&logp, &y, 0).unwrap().unwrap();
        for i in 0..20 {
            assert!((grads[0].data()[i] + g.data()[i]).abs() < 1e-12);
        }
    }
}
