//! Define-by-run reverse-mode autodiff over [`Array`] values.
//!
//! A [`Tape`] owns an append-only list of nodes; building an op computes its
//! value eagerly and records how to push gradients back through it. Node ids
//! are indices, so the graph is acyclic by construction and the reverse sweep
//! is a single right-to-left pass over the node list. Gradient accumulation
//! happens in that fixed order, which makes backward bit-deterministic: two
//! runs over the same graph produce identical bytes.
//!
//! The op set is exactly what the translation models need, nothing more.
//! Losses with internal dynamic programming (CTC, vertex-graph marginals)
//! plug in through [`Tape::custom_scalar`], providing their own backward
//! closure; the tape stays ignorant of their internals.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Array, Mask};

pub type NodeId = usize;

type BackwardFn = dyn Fn(&[&Array], f64) -> Vec<Array>;

enum Op {
    Leaf { grad: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `[m,n] + [n]`, the bias pattern.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    SoftmaxMasked { x: NodeId, mask: Rc<Mask> },
    /// Masked value mixing: `out[i] = Σ_{j allowed} w[i][j] · v[j]`.
    /// Disallowed pairs are skipped outright (not multiplied by zero), so a
    /// query row is bitwise independent of keys outside its mask.
    AttnMix { w: NodeId, v: NodeId, mask: Rc<Mask> },
    LogSoftmax(NodeId),
    LogSoftmaxMasked { x: NodeId, mask: Rc<Mask> },
    LogSumExp(NodeId),
    GatherRows { x: NodeId, idx: Rc<Vec<usize>> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    MeanPoolSpans { x: NodeId, spans: Rc<Vec<(usize, usize)>> },
    /// Per-row selector: rows flagged in `from_b` come from `b`, others from `a`.
    RowMix { a: NodeId, b: NodeId, from_b: Rc<Vec<bool>> },
    /// Mean negative log-likelihood over included positions of a `[T,V]`
    /// log-probability matrix.
    NllMean { logp: NodeId, targets: Rc<Vec<usize>>, include: Rc<Vec<bool>> },
    /// Weighted sum of scalar nodes.
    AddWeighted(Vec<(NodeId, f64)>),
    Custom { inputs: Vec<NodeId>, back: Rc<BackwardFn> },
}

struct Node {
    op: Op,
    value: Array,
    /// Whether any gradient can flow into this node (a grad-requiring leaf or
    /// a node with such an ancestor). Lets backward skip constant subgraphs.
    needs: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        let needs = match &op {
            Op::Leaf { grad } => *grad,
            _ => self.op_inputs(&op).iter().any(|&i| self.nodes[i].needs),
        };
        self.nodes.push(Node { op, value, needs });
        self.nodes.len() - 1
    }

    fn op_inputs(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SoftmaxMasked { x, .. } | Op::LogSoftmaxMasked { x, .. } => vec![*x],
            Op::AttnMix { w, v, .. } => vec![*w, *v],
            Op::GatherRows { x, .. }
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::MeanPoolSpans { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::RowMix { a, b, .. } => vec![*a, *b],
            Op::NllMean { logp, .. } => vec![*logp],
            Op::AddWeighted(xs) => xs.iter().map(|(id, _)| *id).collect(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { grad: true }, value)
    }

    /// A constant leaf; no gradient ever flows into it.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { grad: false }, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "Tape::add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.shape().len() != 1 || rv.cols() != av.cols() {
            return Err(Error::shape(
                "Tape::add_row",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut v = av.clone();
        let c = v.cols();
        for i in 0..v.rows() {
            for (x, r) in v.row_mut(i).iter_mut().zip(rv.data().iter()) {
                *x += r;
            }
        }
        debug_assert_eq!(c, rv.cols());
        Ok(self.push(Op::AddRow(a, row), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "Tape::mul",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = Array::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("Tape::layer_norm", format!("cols {c} vs affine params")));
        }
        let mut v = xv.clone();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                row[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, v))
    }

    pub fn softmax_masked(&mut self, x: NodeId, mask: Rc<Mask>) -> Result<NodeId> {
        let v = tensor::softmax_masked(self.value(x), &mask)?;
        Ok(self.push(Op::SoftmaxMasked { x, mask }, v))
    }

    pub fn attn_mix(&mut self, w: NodeId, v: NodeId, mask: Rc<Mask>) -> Result<NodeId> {
        let wv = self.value(w);
        let vv = self.value(v);
        if wv.cols() != vv.rows() || wv.rows() != mask.rows() || wv.cols() != mask.cols() {
            return Err(Error::shape(
                "Tape::attn_mix",
                format!(
                    "w {}x{}, v {}x{}, mask {}x{}",
                    wv.rows(),
                    wv.cols(),
                    vv.rows(),
                    vv.cols(),
                    mask.rows(),
                    mask.cols()
                ),
            ));
        }
        let (r, d) = (wv.rows(), vv.cols());
        let mut out = Array::zeros(vec![r, d]);
        for i in 0..r {
            for j in 0..wv.cols() {
                if !mask.get(i, j) {
                    continue;
                }
                let wij = wv.at2(i, j);
                let vrow = vv.row(j);
                let orow = out.row_mut(i);
                for (o, &x) in orow.iter_mut().zip(vrow.iter()) {
                    *o += wij * x;
                }
            }
        }
        Ok(self.push(Op::AttnMix { w, v, mask }, out))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let v = tensor::log_softmax(self.value(x));
        self.push(Op::LogSoftmax(x), v)
    }

    pub fn log_softmax_masked(&mut self, x: NodeId, mask: Rc<Mask>) -> Result<NodeId> {
        let v = tensor::log_softmax_masked(self.value(x), &mask)?;
        Ok(self.push(Op::LogSoftmaxMasked { x, mask }, v))
    }

    /// Scalar `log Σ exp` over all elements.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).numel() == 0 {
            return Err(Error::contract("Tape::logsumexp", "empty input".to_string()));
        }
        let v = Array::scalar(tensor::logsumexp(self.value(x).data()));
        Ok(self.push(Op::LogSumExp(x), v))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= xv.rows() {
                return Err(Error::contract(
                    "Tape::gather_rows",
                    format!("row {} out of {}", i, xv.rows()),
                ));
            }
            data.extend_from_slice(xv.row(i));
        }
        let v = Array::from_vec(vec![idx.len(), c], data)?;
        Ok(self.push(Op::GatherRows { x, idx }, v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.rows() {
            return Err(Error::shape(
                "Tape::slice_rows",
                format!("{}..{} of {}", start, start + len, xv.rows()),
            ));
        }
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let v = Array::from_vec(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows { x, start }, v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start + len > xv.cols() {
            return Err(Error::shape(
                "Tape::slice_cols",
                format!("{}..{} of {}", start, start + len, xv.cols()),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for i in 0..xv.rows() {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Array::from_vec(vec![xv.rows(), len], data)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("Tape::concat_cols", "no parts".to_string()));
        }
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                if pv.rows() != r {
                    return Err(Error::shape("Tape::concat_cols", "row mismatch".to_string()));
                }
                data.extend_from_slice(pv.row(i));
            }
        }
        let v = Array::from_vec(vec![r, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    /// Mean over each `(start, len)` row span; output has one row per span.
    pub fn mean_pool_spans(&mut self, x: NodeId, spans: Rc<Vec<(usize, usize)>>) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(spans.len() * c);
        for &(start, len) in spans.iter() {
            if len == 0 || start + len > xv.rows() {
                return Err(Error::contract(
                    "Tape::mean_pool_spans",
                    format!("span ({start},{len}) of {} rows", xv.rows()),
                ));
            }
            let mut acc = vec![0.0; c];
            for i in start..start + len {
                for (a, &x) in acc.iter_mut().zip(xv.row(i).iter()) {
                    *a += x;
                }
            }
            for a in acc.iter_mut() {
                *a /= len as f64;
            }
            data.extend_from_slice(&acc);
        }
        let v = Array::from_vec(vec![spans.len(), c], data)?;
        Ok(self.push(Op::MeanPoolSpans { x, spans }, v))
    }

    pub fn row_mix(&mut self, a: NodeId, b: NodeId, from_b: Rc<Vec<bool>>) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rows() != from_b.len() {
            return Err(Error::shape(
                "Tape::row_mix",
                format!("{:?} vs {:?} with {} flags", av.shape(), bv.shape(), from_b.len()),
            ));
        }
        let mut v = av.clone();
        for (i, &take) in from_b.iter().enumerate() {
            if take {
                v.row_mut(i).copy_from_slice(bv.row(i));
            }
        }
        Ok(self.push(Op::RowMix { a, b, from_b }, v))
    }

    /// Mean of `-logp[t, targets[t]]` over positions where `include[t]`.
    pub fn nll_mean(
        &mut self,
        logp: NodeId,
        targets: Rc<Vec<usize>>,
        include: Rc<Vec<bool>>,
    ) -> Result<NodeId> {
        let lv = self.value(logp);
        if targets.len() != lv.rows() || include.len() != lv.rows() {
            return Err(Error::shape(
                "Tape::nll_mean",
                format!("{} rows vs {} targets", lv.rows(), targets.len()),
            ));
        }
        let n = include.iter().filter(|&&b| b).count();
        if n == 0 {
            return Err(Error::contract("Tape::nll_mean", "every position masked out".to_string()));
        }
        let mut acc = 0.0;
        for (t, (&y, &inc)) in targets.iter().zip(include.iter()).enumerate() {
            if inc {
                if y >= lv.cols() {
                    return Err(Error::contract(
                        "Tape::nll_mean",
                        format!("target {} out of vocab {}", y, lv.cols()),
                    ));
                }
                acc -= lv.at2(t, y);
            }
        }
        let v = Array::scalar(acc / n as f64);
        Ok(self.push(Op::NllMean { logp, targets, include }, v))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn add_weighted(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &(id, w) in terms {
            if !self.value(id).is_scalar() {
                return Err(Error::contract("Tape::add_weighted", "non-scalar term".to_string()));
            }
            acc += w * self.value(id).item();
        }
        Ok(self.push(Op::AddWeighted(terms.to_vec()), Array::scalar(acc)))
    }

    /// Scalar-valued op with caller-supplied value and backward rule. The
    /// closure receives the input values and the upstream scalar gradient and
    /// must return one gradient array per input, shaped like that input.
    pub fn custom_scalar(
        &mut self,
        inputs: Vec<NodeId>,
        value: f64,
        back: Rc<BackwardFn>,
    ) -> NodeId {
        self.push(Op::Custom { inputs, back }, Array::scalar(value))
    }

    /// Reverse sweep from a scalar output. Returns one gradient slot per node;
    /// `None` where no gradient flows (constants, unused branches).
    pub fn backward(&self, out: NodeId) -> Result<Vec<Option<Array>>> {
        if !self.value(out).is_scalar() {
            return Err(Error::contract(
                "Tape::backward",
                format!("output shape {:?} is not scalar", self.value(out).shape()),
            ));
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[out] = Some(Array::from_vec(self.value(out).shape().to_vec(), vec![1.0]).unwrap());
        for id in (0..=out).rev() {
            if grads[id].is_none() || !self.nodes[id].needs {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.push_back(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients for a chosen set of nodes (usually the parameters). Missing
    /// gradients come back as zero arrays of the right shape.
    pub fn grads_for(&self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<Array>> {
        let mut grads = self.backward(out)?;
        Ok(wrt
            .iter()
            .map(|&id| {
                grads[id].take().unwrap_or_else(|| Array::zeros(self.value(id).shape().to_vec()))
            })
            .collect())
    }

    fn push_back(&self, id: NodeId, g: &Array, grads: &mut Vec<Option<Array>>) -> Result<()> {
        let acc = |grads: &mut Vec<Option<Array>>, target: NodeId, delta: Array| -> Result<()> {
            if !self.nodes[target].needs {
                return Ok(());
            }
            match &mut grads[target] {
                Some(buf) => buf.add_assign(&delta)?,
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };

        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].needs {
                    let bt = self.value(*b).transpose();
                    acc(grads, *a, tensor::matmul(g, &bt)?)?;
                }
                if self.nodes[*b].needs {
                    let at = self.value(*a).transpose();
                    acc(grads, *b, tensor::matmul(&at, g)?)?;
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose())?,
            Op::Add(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, g.clone())?;
                if self.nodes[*row].needs {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (acc_j, &gj) in gr.iter_mut().zip(g.row(i).iter()) {
                            *acc_j += gj;
                        }
                    }
                    acc(grads, *row, Array::vector(gr))?;
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs {
                    let d = zip_mul(g, self.value(*b));
                    acc(grads, *a, d)?;
                }
                if self.nodes[*b].needs {
                    let d = zip_mul(g, self.value(*a));
                    acc(grads, *b, d)?;
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * c))?,
            Op::Relu(a) => {
                let xv = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data().iter())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                acc(grads, *a, Array::from_vec(xv.shape().to_vec(), data)?)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.cols();
                let mut gx = Array::zeros(xv.shape().to_vec());
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for i in 0..xv.rows() {
                    let row = xv.row(i);
                    let grow = g.row(i);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let mut sum_gg = 0.0; // Σ g_j·gain_j
                    let mut sum_ggx = 0.0; // Σ g_j·gain_j·xhat_j
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let gg = grow[j] * gv.data()[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        ggain[j] += grow[j] * xhat;
                        gbias[j] += grow[j];
                    }
                    let gxrow = gx.row_mut(i);
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let gg = grow[j] * gv.data()[j];
                        gxrow[j] = inv * (gg - sum_gg / c as f64 - xhat * sum_ggx / c as f64);
                    }
                }
                acc(grads, *x, gx)?;
                acc(grads, *gain, Array::vector(ggain))?;
                acc(grads, *bias, Array::vector(gbias))?;
            }
            Op::SoftmaxMasked { x, mask } => {
                let s = &self.nodes[id].value;
                let mut gx = Array::zeros(s.shape().to_vec());
                for i in 0..s.rows() {
                    let srow = s.row(i);
                    let grow = g.row(i);
                    let mrow = mask.row(i);
                    let dot: f64 = (0..s.cols())
                        .filter(|&j| mrow[j])
                        .map(|j| grow[j] * srow[j])
                        .sum();
                    let gxrow = gx.row_mut(i);
                    for j in 0..s.cols() {
                        if mrow[j] {
                            gxrow[j] = srow[j] * (grow[j] - dot);
                        }
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::AttnMix { w, v, mask } => {
                let wv = self.value(*w);
                let vv = self.value(*v);
                if self.nodes[*w].needs {
                    let mut gw = Array::zeros(wv.shape().to_vec());
                    for i in 0..wv.rows() {
                        let grow = g.row(i);
                        let gwrow = gw.row_mut(i);
                        for j in 0..wv.cols() {
                            if mask.get(i, j) {
                                gwrow[j] =
                                    grow.iter().zip(vv.row(j).iter()).map(|(&a, &b)| a * b).sum();
                            }
                        }
                    }
                    acc(grads, *w, gw)?;
                }
                if self.nodes[*v].needs {
                    let mut gv = Array::zeros(vv.shape().to_vec());
                    for i in 0..wv.rows() {
                        let grow = g.row(i);
                        for j in 0..wv.cols() {
                            if mask.get(i, j) {
                                let wij = wv.at2(i, j);
                                for (gvj, &gi) in gv.row_mut(j).iter_mut().zip(grow.iter()) {
                                    *gvj += wij * gi;
                                }
                            }
                        }
                    }
                    acc(grads, *v, gv)?;
                }
            }
            Op::LogSoftmax(x) => {
                let out = &self.nodes[id].value;
                let mut gx = Array::zeros(out.shape().to_vec());
                for i in 0..out.rows() {
                    let sumg: f64 = g.row(i).iter().sum();
                    let orow = out.row(i);
                    let grow = g.row(i);
                    let gxrow = gx.row_mut(i);
                    for j in 0..out.cols() {
                        gxrow[j] = grow[j] - orow[j].exp() * sumg;
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::LogSoftmaxMasked { x, mask } => {
                let out = &self.nodes[id].value;
                let mut gx = Array::zeros(out.shape().to_vec());
                for i in 0..out.rows() {
                    let mrow = mask.row(i);
                    let sumg: f64 =
                        (0..out.cols()).filter(|&j| mrow[j]).map(|j| g.row(i)[j]).sum();
                    let orow = out.row(i);
                    let grow = g.row(i);
                    let gxrow = gx.row_mut(i);
                    for j in 0..out.cols() {
                        if mrow[j] {
                            gxrow[j] = grow[j] - orow[j].exp() * sumg;
                        }
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::LogSumExp(x) => {
                let out = self.nodes[id].value.item();
                let xv = self.value(*x);
                let gs = g.item();
                let data = if out == f64::NEG_INFINITY {
                    vec![0.0; xv.numel()]
                } else {
                    xv.data().iter().map(|&v| (v - out).exp() * gs).collect()
                };
                acc(grads, *x, Array::from_vec(xv.shape().to_vec(), data)?)?;
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = Array::zeros(xv.shape().to_vec());
                for (pos, &src) in idx.iter().enumerate() {
                    let grow = g.row(pos);
                    for (a, &b) in gx.row_mut(src).iter_mut().zip(grow.iter()) {
                        *a += b;
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Array::zeros(xv.shape().to_vec());
                for i in 0..g.rows() {
                    gx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(grads, *x, gx)?;
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Array::zeros(xv.shape().to_vec());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(grads, *x, gx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.nodes[p].needs {
                        let mut gp = Array::zeros(self.value(p).shape().to_vec());
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        acc(grads, p, gp)?;
                    }
                    offset += pc;
                }
            }
            Op::MeanPoolSpans { x, spans } => {
                let xv = self.value(*x);
                let mut gx = Array::zeros(xv.shape().to_vec());
                for (k, &(start, len)) in spans.iter().enumerate() {
                    let scale = 1.0 / len as f64;
                    for i in start..start + len {
                        for (a, &b) in gx.row_mut(i).iter_mut().zip(g.row(k).iter()) {
                            *a += b * scale;
                        }
                    }
                }
                acc(grads, *x, gx)?;
            }
            Op::RowMix { a, b, from_b } => {
                if self.nodes[*a].needs {
                    let mut ga = Array::zeros(g.shape().to_vec());
                    for (i, &take) in from_b.iter().enumerate() {
                        if !take {
                            ga.row_mut(i).copy_from_slice(g.row(i));
                        }
                    }
                    acc(grads, *a, ga)?;
                }
                if self.nodes[*b].needs {
                    let mut gb = Array::zeros(g.shape().to_vec());
                    for (i, &take) in from_b.iter().enumerate() {
                        if take {
                            gb.row_mut(i).copy_from_slice(g.row(i));
                        }
                    }
                    acc(grads, *b, gb)?;
                }
            }
            Op::NllMean { logp, targets, include } => {
                let lv = self.value(*logp);
                let n = include.iter().filter(|&&b| b).count() as f64;
                let gs = g.item();
                let mut gl = Array::zeros(lv.shape().to_vec());
                for (t, (&y, &inc)) in targets.iter().zip(include.iter()).enumerate() {
                    if inc {
                        gl.row_mut(t)[y] -= gs / n;
                    }
                }
                acc(grads, *logp, gl)?;
            }
            Op::AddWeighted(terms) => {
                let gs = g.item();
                for &(id, w) in terms {
                    acc(grads, id, Array::scalar(w * gs))?;
                }
            }
            Op::Custom { inputs, back } => {
                let vals: Vec<&Array> = inputs.iter().map(|&i| self.value(i)).collect();
                let deltas = back(&vals, g.item());
                debug_assert_eq!(deltas.len(), inputs.len());
                for (&input, delta) in inputs.iter().zip(deltas.into_iter()) {
                    acc(grads, input, delta)?;
                }
            }
        }
        Ok(())
    }
}

fn zip_mul(a: &Array, b: &Array) -> Array {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Array::from_vec(a.shape().to_vec(), data).unwrap()
}

/// Max over all parameter coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
///
/// `f` must rebuild the same scalar function each call; the tape is
/// reconstructed for every probe, so `f` sees exactly the perturbed inputs.
pub fn grad_check<F>(f: F, params: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_coords(f, params, eps, None)
}

/// Like [`grad_check`] but probing only `coords` (pairs of parameter index and
/// flat coordinate). Used where a full sweep would be too slow; the analytic
/// side is still the complete backward pass.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Array],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_coords(f, params, eps, Some(coords))
}

fn grad_check_coords<F>(
    f: F,
    params: &[Array],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::contract("grad_check", format!("eps {eps} outside (0, 1e-3]")));
    }
    let eval = |arrays: &[Array]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = arrays.iter().map(|a| tape.param(a.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok(tape.value(out).item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|a| tape.param(a.clone())).collect();
        let out = f(&mut tape, &ids)?;
        tape.grads_for(out, &ids)?
    };

    let all_coords: Vec<(usize, usize)> = match coords {
        Some(cs) => cs.to_vec(),
        None => params
            .iter()
            .enumerate()
            .flat_map(|(p, a)| (0..a.numel()).map(move |c| (p, c)))
            .collect(),
    };

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, c) in all_coords {
        let orig = probe[p].data()[c];
        probe[p].data_mut()[c] = orig + eps;
        let f_plus = eval(&probe)?;
        probe[p].data_mut()[c] = orig - eps;
        let f_minus = eval(&probe)?;
        probe[p].data_mut()[c] = orig;
        let fd = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic[p].data()[c];
        let rel = (a - fd).abs() / 1.0f64.max(a.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
