//! Sentence group tags, attention-mask construction, and masked multi-head
//! attention.
//!
//! Locality in the document models is carried entirely by boolean masks:
//! group-attention allows a query to see only keys with the same sentence
//! tag, global-attention sees every non-pad key, and the autoregressive
//! teacher conjoins a causal mask on top. Disallowed pairs get exactly zero
//! weight and are skipped during value mixing, so the output at a sentence is
//! bitwise independent of other sentences wherever only group-attention is in
//! play.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Mask;

/// One sentence index per token position.
///
/// Invariants (checked at construction): non-empty, first tag is 0, tags are
/// non-decreasing, and consecutive tags differ by at most 1. Together these
/// say the positions form contiguous sentence blocks numbered 0..K.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTags {
    tags: Vec<usize>,
}

impl GroupTags {
    pub fn new(tags: Vec<usize>) -> Result<GroupTags> {
        if tags.is_empty() {
            return Err(Error::contract("GroupTags::new", "empty tag sequence".to_string()));
        }
        if tags[0] != 0 {
            return Err(Error::contract(
                "GroupTags::new",
                format!("first tag must be 0, got {}", tags[0]),
            ));
        }
        for w in tags.windows(2) {
            if w[1] < w[0] || w[1] > w[0] + 1 {
                return Err(Error::contract(
                    "GroupTags::new",
                    format!("tags must step by 0 or 1, got {} -> {}", w[0], w[1]),
                ));
            }
        }
        Ok(GroupTags { tags })
    }

    /// Tags for consecutive sentence blocks of the given lengths.
    pub fn from_lens(lens: &[usize]) -> Result<GroupTags> {
        if lens.is_empty() || lens.iter().any(|&l| l == 0) {
            return Err(Error::contract(
                "GroupTags::from_lens",
                format!("sentence lengths must be non-empty and positive: {lens:?}"),
            ));
        }
        let mut tags = Vec::with_capacity(lens.iter().sum());
        for (j, &l) in lens.iter().enumerate() {
            tags.extend(std::iter::repeat(j).take(l));
        }
        Ok(GroupTags { tags })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Number of sentences.
    pub fn k(&self) -> usize {
        self.tags.last().map(|&t| t + 1).unwrap_or(0)
    }

    /// `(start, len)` of sentence `j`'s block.
    pub fn span(&self, j: usize) -> (usize, usize) {
        let start = self.tags.iter().position(|&t| t == j).expect("sentence index in range");
        let len = self.tags.iter().filter(|&&t| t == j).count();
        (start, len)
    }

    pub fn spans(&self) -> Vec<(usize, usize)> {
        (0..self.k()).map(|j| self.span(j)).collect()
    }
}

/// Allowed iff query tag equals key tag. Works for self-attention (same tags
/// on both sides) and cross-attention (target queries over source keys).
pub fn build_group_mask(q_tags: &GroupTags, k_tags: &GroupTags) -> Mask {
    group_mask_raw(q_tags.as_slice(), k_tags.as_slice())
}

/// Tag-equality mask over raw tag slices. The ablation probes need masks for
/// single-sentence frames whose tag is not 0, which `GroupTags` (rightly)
/// rejects, so the raw form exists alongside the validated one.
pub fn group_mask_raw(q_tags: &[usize], k_tags: &[usize]) -> Mask {
    Mask::from_fn(q_tags.len(), k_tags.len(), |i, j| q_tags[i] == k_tags[j])
}

/// Lower-triangular mask: position `i` may look at `j <= i`.
pub fn build_causal_mask(n: usize) -> Mask {
    Mask::from_fn(n, n, |i, j| j <= i)
}

/// Mask that rules out padded key columns everywhere.
pub fn key_valid_mask(query_len: usize, key_valid: &[bool]) -> Mask {
    Mask::from_fn(query_len, key_valid.len(), |_, j| key_valid[j])
}

/// Projection weights for one attention block, already bound to a tape.
#[derive(Clone, Copy)]
pub struct AttnProj {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

/// Masked multi-head scaled dot-product attention.
///
/// `q_in`, `k_in`, `v_in` are `[len, d_model]` feature matrices (for
/// self-attention all three are the same node). The mask is applied before
/// the softmax and again during value mixing, so disallowed keys contribute
/// neither weight nor floating-point noise.
pub fn attention(
    tape: &mut Tape,
    q_in: NodeId,
    k_in: NodeId,
    v_in: NodeId,
    proj: &AttnProj,
    mask: &Rc<Mask>,
    heads: usize,
) -> Result<NodeId> {
    let d_model = tape.value(q_in).cols();
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    let dh = d_model / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.matmul(q_in, proj.wq)?;
    let q = tape.add_row(q, proj.bq)?;
    let k = tape.matmul(k_in, proj.wk)?;
    let k = tape.add_row(k, proj.bk)?;
    let v = tape.matmul(v_in, proj.wv)?;
    let v = tape.add_row(v, proj.bv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_masked(scores, Rc::clone(mask))?;
        let ctx = tape.attn_mix(weights, vh, Rc::clone(mask))?;
        head_outs.push(ctx);
    }
    let merged = tape.concat_cols(&head_outs)?;
    let out = tape.matmul(merged, proj.wo)?;
    tape.add_row(out, proj.bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_mask_hand_case() {
        let q = GroupTags::new(vec![0, 0, 1]).unwrap();
        let k = GroupTags::new(vec![0, 1, 1]).unwrap();
        let m = build_group_mask(&q, &k);
        let want = [
            [true, false, false],
            [true, false, false],
            [false, true, true],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), want[i][j], "at ({i},{j})");
            }
        }
    }

    #[test]
    fn all_zero_tags_give_all_true() {
        let t = GroupTags::new(vec![0, 0, 0]).unwrap();
        let m = build_group_mask(&t, &t);
        assert_eq!(m, Mask::all_true(3, 3));
    }

    #[test]
    fn causal_mask_small_cases() {
        let m1 = build_causal_mask(1);
        assert!(m1.get(0, 0));
        let m3 = build_causal_mask(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m3.get(i, j), j <= i);
            }
        }
    }

    #[test]
    fn tag_invariants_rejected() {
        assert!(GroupTags::new(vec![]).is_err());
        assert!(GroupTags::new(vec![1, 1]).is_err());
        assert!(GroupTags::new(vec![0, 2]).is_err());
        assert!(GroupTags::new(vec![0, 1, 0]).is_err());
        assert!(GroupTags::from_lens(&[2, 0, 1]).is_err());
    }

    #[test]
    fn spans_partition_positions() {
        let t = GroupTags::from_lens(&[3, 1, 2]).unwrap();
        assert_eq!(t.k(), 3);
        assert_eq!(t.spans(), vec![(0, 3), (3, 1), (4, 2)]);
    }
}
