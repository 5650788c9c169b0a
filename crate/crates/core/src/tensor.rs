//! Dense row-major arrays of `f64` and the raw numeric kernels the rest of
//! the crate builds on.
//!
//! Design constraints, fixed once here so every caller can rely on them:
//!
//! * All numerics are 64-bit. Dynamic-programming losses and gradient checks
//!   need the headroom, and desk-scale models never get large enough for the
//!   memory cost to matter.
//! * Log-space zero is exactly `f64::NEG_INFINITY`, never a large negative
//!   stand-in. `logsumexp` of an all`-inf` slice is `-inf`.
//! * A masked softmax row with no allowed entries comes back all zeros rather
//!   than NaN; callers treat such rows as "no distribution".
//! * Shape mismatches are errors, not broadcasts.

use crate::error::{Error, Result};

/// Row-major dense array. Rank 0 (empty shape) is a scalar with one element,
/// rank 1 a vector, rank 2 a matrix. Nothing in the crate needs rank 3: the
/// model code slices heads out of rank-2 arrays instead.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Array> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Array::from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Array {
        let numel: usize = shape.iter().product();
        Array { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Array {
        let numel: usize = shape.iter().product();
        Array { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Array {
        Array { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Array {
        Array { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Array> {
        Array::from_vec(vec![rows, cols], data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Array {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Array { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    /// Rows of a rank-2 array; a rank-1 array counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            1 => 1,
            _ => 1,
        }
    }

    /// Columns of a rank-2 array; for rank 1 this is the vector length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise in-place `self += other`.
    pub fn add_assign(&mut self, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Array::add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn transpose(&self) -> Array {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Array::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// Squared Euclidean norm over all elements.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }
}

/// Boolean attention/selection mask over a `rows x cols` grid. `true` means
/// allowed. Stored densely; desk-scale sequence lengths keep this small.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn all_true(rows: usize, cols: usize) -> Mask {
        Mask { rows, cols, bits: vec![true; rows * cols] }
    }

    pub fn all_false(rows: usize, cols: usize) -> Mask {
        Mask { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Mask {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Mask { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    /// Pointwise conjunction. Shapes must match.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "Mask::and",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let bits = self.bits.iter().zip(other.bits.iter()).map(|(&a, &b)| a && b).collect();
        Ok(Mask { rows: self.rows, cols: self.cols, bits })
    }

    /// Number of allowed entries in a row.
    pub fn row_allowed(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }
}

/// `a @ b` for rank-2 (or rank-1 treated as a single row) arrays.
///
/// The loop order streams rows of `b`, which keeps the inner loop contiguous
/// for row-major storage; this kernel is the hot path of the whole crate.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(Error::shape("matmul", format!("{}x{} @ {}x{}", m, ka, kb, n)));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bkj;
            }
        }
    }
    Array::from_vec(vec![m, n], out)
}

/// Numerically stable `log(sum(exp(xs)))`. Empty or all `-inf` input gives
/// `-inf` exactly.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Two-argument special case used pervasively by the lattice recurrences.
#[inline]
pub fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
pub fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Row-wise masked softmax. Disallowed entries get probability exactly 0.0;
/// a row with no allowed entries comes back as all zeros.
pub fn softmax_masked(x: &Array, mask: &Mask) -> Result<Array> {
    check_mask("softmax_masked", x, mask)?;
    let (r, c) = (x.rows(), x.cols());
    let mut out = Array::zeros(x.shape().to_vec());
    for i in 0..r {
        let xi = x.row(i);
        let mi = mask.row(i);
        let mut m = f64::NEG_INFINITY;
        for j in 0..c {
            if mi[j] && xi[j] > m {
                m = xi[j];
            }
        }
        if m == f64::NEG_INFINITY {
            continue; // all-masked row stays zero
        }
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..c {
            if mi[j] {
                let e = (xi[j] - m).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for j in 0..c {
            if mi[j] {
                orow[j] /= sum;
            }
        }
    }
    Ok(out)
}

/// Row-wise log-softmax over every column.
pub fn log_softmax(x: &Array) -> Array {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..r {
        let lse = logsumexp(&x.data[i * c..(i + 1) * c]);
        for v in out.data[i * c..(i + 1) * c].iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Row-wise masked log-softmax: normalize over allowed entries, set the rest
/// to `-inf`. A row with no allowed entries is all `-inf`.
pub fn log_softmax_masked(x: &Array, mask: &Mask) -> Result<Array> {
    check_mask("log_softmax_masked", x, mask)?;
    let (r, c) = (x.rows(), x.cols());
    let mut out = Array::filled(x.shape().to_vec(), f64::NEG_INFINITY);
    for i in 0..r {
        let xi = x.row(i);
        let mi = mask.row(i);
        let allowed: Vec<f64> =
            (0..c).filter(|&j| mi[j]).map(|j| xi[j]).collect();
        if allowed.is_empty() {
            continue;
        }
        let lse = logsumexp(&allowed);
        let orow = out.row_mut(i);
        for j in 0..c {
            if mi[j] {
                orow[j] = xi[j] - lse;
            }
        }
    }
    Ok(out)
}

/// Index of the row maximum; ties break to the lowest index. This tie rule is
/// load-bearing: every argmax in decoding uses it so outputs are reproducible.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut bv = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        if x > bv {
            bv = x;
            best = i;
        }
    }
    best
}

fn check_mask(op: &'static str, x: &Array, mask: &Mask) -> Result<()> {
    if x.rows() != mask.rows() || x.cols() != mask.cols() {
        return Err(Error::shape(
            op,
            format!("array {}x{} vs mask {}x{}", x.rows(), x.cols(), mask.rows(), mask.cols()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Array::matrix(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let id = Array::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &id).unwrap(), a);
        assert_eq!(matmul(&id, &a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = Array::zeros(vec![2, 3]);
        let b = Array::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn logsumexp_two_zeros_is_ln2() {
        let v = logsumexp(&[0.0, 0.0]);
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_singleton_is_identity() {
        assert_eq!(logsumexp(&[3.25]), 3.25);
    }

    #[test]
    fn logsumexp_handles_large_negatives() {
        // Factored form: -1000 + ln(1 + e^-1), exact in shifted space.
        let want = -1000.0 + (1.0 + (-1.0f64).exp()).ln();
        let got = logsumexp(&[-1000.0, -1001.0]);
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_all_neg_inf() {
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_masked_all_false_row_is_zeros() {
        let x = Array::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let m = Mask::all_false(1, 3);
        let s = softmax_masked(&x, &m).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_masked_uniform_logits() {
        let x = Array::matrix(1, 4, vec![0.5; 4]).unwrap();
        let m = Mask::from_fn(1, 4, |_, j| j != 2);
        let s = softmax_masked(&x, &m).unwrap();
        let third = 1.0 / 3.0;
        for (j, &v) in s.data().iter().enumerate() {
            if j == 2 {
                assert_eq!(v, 0.0);
            } else {
                assert!((v - third).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), 0);
    }
}
