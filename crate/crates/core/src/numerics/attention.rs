//! Scaled dot-product attention kernels.
//!
//! The kernel reads queries, keys and values laid out as `[outer, L, inner, D]`
//! and attends over the `L` axis independently for every `(outer, inner)` pair.
//! This covers temporal attention on `[S, T, N, D]` (outer = S, inner = N),
//! spatial attention (outer = S·T, inner = 1) and flattened joint attention
//! without materialising transposes. Heads split the last axis into
//! contiguous `D / heads` chunks.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Additive mask value marking a dropped key.
pub const MASK_SENTINEL: f64 = -1e9;

/// Key-keep pattern for every attention row plus query padding flags.
///
/// A padded query row produces a zero output and an all-zero weight row. A
/// non-padded row with every key dropped is an error.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    batch: usize,
    lq: usize,
    lk: usize,
    keep: Vec<bool>,
    pad_query: Vec<bool>,
}

impl AttnMask {
    /// Mask keeping every key for every row.
    pub fn dense(batch: usize, lq: usize, lk: usize) -> Self {
        Self {
            batch,
            lq,
            lk,
            keep: vec![true; batch * lq * lk],
            pad_query: vec![false; batch * lq],
        }
    }

    /// Key padding per batch element, with query rows padded where `query_valid` is false.
    pub fn from_validity(batch: usize, query_valid: &[bool], key_valid: &[bool]) -> Result<Self> {
        if batch == 0 || query_valid.len() % batch != 0 || key_valid.len() % batch != 0 {
            return Err(Error::shape("attn_mask", "validity lengths not divisible by batch"));
        }
        let lq = query_valid.len() / batch;
        let lk = key_valid.len() / batch;
        let mut keep = Vec::with_capacity(batch * lq * lk);
        for b in 0..batch {
            let keys = &key_valid[b * lk..(b + 1) * lk];
            for _ in 0..lq {
                keep.extend_from_slice(keys);
            }
        }
        Ok(Self { batch, lq, lk, keep, pad_query: query_valid.iter().map(|v| !v).collect() })
    }

    /// Builds a mask from an additive `[lq × lk]` tensor using the sentinel convention.
    pub fn from_additive<T: Scalar>(mask: &Tensor<T>) -> Result<Self> {
        if mask.rank() != 2 {
            return Err(Error::shape("attn_mask", format!("expected 2-D mask, got {:?}", mask.shape())));
        }
        let (lq, lk) = (mask.shape()[0], mask.shape()[1]);
        let cutoff = MASK_SENTINEL / 2.0;
        let keep = mask.data().iter().map(|v| v.to_f64_lossy() > cutoff).collect();
        Ok(Self { batch: 1, lq, lk, keep, pad_query: vec![false; lq] })
    }

    /// Additionally drops every key `j > i` (query row `i` sees only the prefix).
    pub fn with_causal(mut self) -> Self {
        for b in 0..self.batch {
            for i in 0..self.lq {
                for j in (i + 1)..self.lk {
                    self.keep[(b * self.lq + i) * self.lk + j] = false;
                }
            }
        }
        self
    }

    /// Drops the keys rejected by `allow(i, j)` in every batch element.
    pub fn restrict(mut self, allow: impl Fn(usize, usize) -> bool) -> Self {
        for b in 0..self.batch {
            for i in 0..self.lq {
                for j in 0..self.lk {
                    if !allow(i, j) {
                        self.keep[(b * self.lq + i) * self.lk + j] = false;
                    }
                }
            }
        }
        self
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn lq(&self) -> usize {
        self.lq
    }

    pub fn lk(&self) -> usize {
        self.lk
    }

    #[inline]
    pub fn keeps(&self, b: usize, i: usize, j: usize) -> bool {
        self.keep[(b * self.lq + i) * self.lk + j]
    }

    #[inline]
    pub fn is_padded(&self, b: usize, i: usize) -> bool {
        self.pad_query[b * self.lq + i]
    }

    /// Additive `[lq × lk]` form of batch element `b` (0 keep, sentinel drop).
    pub fn additive<T: Scalar>(&self, b: usize) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.lq * self.lk);
        for i in 0..self.lq {
            for j in 0..self.lk {
                data.push(if self.keeps(b, i, j) { T::zero() } else { T::lit(MASK_SENTINEL) });
            }
        }
        Tensor::new(&[self.lq, self.lk], data).expect("mask dims")
    }
}

/// Dimensions of one attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeometry {
    pub outer: usize,
    pub inner: usize,
    pub lq: usize,
    pub lk: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeometry {
    pub fn batch(&self) -> usize {
        self.outer * self.inner
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Multiply-accumulates of the score and weighted-sum products.
    pub fn macs(&self) -> u64 {
        2 * (self.batch() * self.lq * self.lk * self.dim) as u64
    }

    pub fn weights_len(&self) -> usize {
        self.batch() * self.heads * self.lq * self.lk
    }

    pub(crate) fn validate(&self, mask: Option<&AttnMask>) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("model dim {} not divisible into {} heads", self.dim, self.heads),
            ));
        }
        if self.lq == 0 || self.lk == 0 {
            return Err(Error::shape("attention", "empty sequence"));
        }
        if let Some(m) = mask {
            if m.batch != self.batch() || m.lq != self.lq || m.lk != self.lk {
                return Err(Error::shape(
                    "attention",
                    format!(
                        "mask [{}×{}×{}] vs attention [{}×{}×{}]",
                        m.batch,
                        m.lq,
                        m.lk,
                        self.batch(),
                        self.lq,
                        self.lk
                    ),
                ));
            }
        }
        Ok(())
    }

    #[inline]
    fn q_offset(&self, b: usize, i: usize, h: usize) -> usize {
        let (a, c) = (b / self.inner, b % self.inner);
        ((a * self.lq + i) * self.inner + c) * self.dim + h * self.head_dim()
    }

    #[inline]
    fn k_offset(&self, b: usize, j: usize, h: usize) -> usize {
        let (a, c) = (b / self.inner, b % self.inner);
        ((a * self.lk + j) * self.inner + c) * self.dim + h * self.head_dim()
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Forward pass. Returns the attended values (same layout as `q`) and the
/// weights laid out `[batch, heads, lq, lk]`.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    geo: &AttnGeometry,
    mask: Option<&AttnMask>,
) -> Result<(Vec<T>, Vec<T>)> {
    geo.validate(mask)?;
    let dh = geo.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut weights = vec![T::zero(); geo.weights_len()];
    let mut scores = vec![T::zero(); geo.lk];
    for b in 0..geo.batch() {
        for h in 0..geo.heads {
            for i in 0..geo.lq {
                if mask.is_some_and(|m| m.is_padded(b, i)) {
                    continue;
                }
                let qo = geo.q_offset(b, i, h);
                let qrow = &q[qo..qo + dh];
                let mut max = T::neg_infinity();
                let mut kept = 0usize;
                for j in 0..geo.lk {
                    if mask.is_some_and(|m| !m.keeps(b, i, j)) {
                        scores[j] = T::neg_infinity();
                        continue;
                    }
                    let ko = geo.k_offset(b, j, h);
                    let s = dot(qrow, &k[ko..ko + dh]) * scale;
                    scores[j] = s;
                    max = max.max(s);
                    kept += 1;
                }
                if kept == 0 {
                    return Err(Error::FullyMasked { row: b * geo.lq + i });
                }
                let mut denom = T::zero();
                for s in scores.iter_mut() {
                    *s = if s.is_finite() { (*s - max).exp() } else { T::zero() };
                    denom += *s;
                }
                let wrow = &mut weights[((b * geo.heads + h) * geo.lq + i) * geo.lk..][..geo.lk];
                let orow = &mut out[qo..qo + dh];
                for j in 0..geo.lk {
                    let w = scores[j] / denom;
                    wrow[j] = w;
                    if w != T::zero() {
                        let vo = geo.k_offset(b, j, h);
                        axpy(w, &v[vo..vo + dh], orow);
                    }
                }
            }
        }
    }
    Ok((out, weights))
}

/// Gradients of the forward pass with respect to `q`, `k` and `v`.
pub(crate) fn backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    weights: &[T],
    d_out: &[T],
    geo: &AttnGeometry,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = geo.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); geo.lk];
    for b in 0..geo.batch() {
        for h in 0..geo.heads {
            for i in 0..geo.lq {
                let wrow = &weights[((b * geo.heads + h) * geo.lq + i) * geo.lk..][..geo.lk];
                if wrow.iter().all(|w| *w == T::zero()) {
                    continue;
                }
                let qo = geo.q_offset(b, i, h);
                let dorow = &d_out[qo..qo + dh];
                let mut inner = T::zero();
                for j in 0..geo.lk {
                    if wrow[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vo = geo.k_offset(b, j, h);
                    axpy(wrow[j], dorow, &mut dv[vo..vo + dh]);
                    dp[j] = dot(dorow, &v[vo..vo + dh]);
                    inner += dp[j] * wrow[j];
                }
                for j in 0..geo.lk {
                    if wrow[j] == T::zero() {
                        continue;
                    }
                    let ds = wrow[j] * (dp[j] - inner) * scale;
                    let ko = geo.k_offset(b, j, h);
                    axpy(ds, &k[ko..ko + dh], &mut dq[qo..qo + dh]);
                    axpy(ds, &q[qo..qo + dh], &mut dk[ko..ko + dh]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Single-head attention `softmax(q kᵀ / √D + mask) v` on `[L × D]` matrices.
///
/// The mask uses the additive convention: `0` keeps a key and
/// [`MASK_SENTINEL`] (or anything below half of it) drops it. Dropped keys
/// receive a weight of exactly zero. Returns the output and the `[Lq × Lk]`
/// weight matrix.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape("scaled_dot_attention", "q, k, v must be 2-D"));
    }
    let (lq, dim) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    if k.shape()[1] != dim || v.shape() != k.shape() {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mask = mask.map(AttnMask::from_additive).transpose()?;
    let geo = AttnGeometry { outer: 1, inner: 1, lq, lk, dim, heads: 1 };
    let (out, w) = forward(q.data(), k.data(), v.data(), &geo, mask.as_ref())?;
    Ok((Tensor::new(&[lq, dim], out)?, Tensor::new(&[lq, lk], w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_queries_average_values() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let k = Tensor::<f64>::zeros(&[4, 3]);
        let v = Tensor::from_f64(&[4, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]).unwrap();
        let (out, w) = scaled_dot_attention(&q, &k, &v, None).unwrap();
        for &x in w.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert_eq!(out.data()[0], 5.5);
        assert_eq!(out.data()[1], 6.5);
        assert_eq!(out.data()[2], 7.5);
    }

    #[test]
    fn dropped_column_has_zero_weight() {
        let q = Tensor::<f64>::from_f64(&[2, 2], &[0.3, -1.0, 2.0, 0.5]).unwrap();
        let k = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.0, -0.5, 2.0, 0.1, 0.1]).unwrap();
        let v = k.clone();
        let mask = Tensor::from_f64(&[2, 3], &[0.0, MASK_SENTINEL, 0.0, 0.0, MASK_SENTINEL, 0.0]).unwrap();
        let (_, w) = scaled_dot_attention(&q, &k, &v, Some(&mask)).unwrap();
        assert_eq!(w.at(&[0, 1]), 0.0);
        assert_eq!(w.at(&[1, 1]), 0.0);
        for i in 0..2 {
            let s: f64 = (0..3).map(|j| w.at(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let q = Tensor::<f64>::zeros(&[1, 2]);
        let k = Tensor::<f64>::zeros(&[2, 2]);
        let mask = Tensor::full(&[1, 2], MASK_SENTINEL);
        let err = scaled_dot_attention(&q, &k, &k, Some(&mask)).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { .. }));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let q = Tensor::<f64>::zeros(&[1, 2]);
        let k = Tensor::<f64>::zeros(&[2, 3]);
        assert!(scaled_dot_attention(&q, &k, &k, None).is_err());
    }

    #[test]
    fn padded_query_row_is_zero() {
        let mask = AttnMask::from_validity(1, &[true, false], &[true, true, false]).unwrap();
        let geo = AttnGeometry { outer: 1, inner: 1, lq: 2, lk: 3, dim: 2, heads: 1 };
        let q = [1.0, 0.5, 2.0, 2.0];
        let kv = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (out, w) = forward(&q, &kv, &kv, &geo, Some(&mask)).unwrap();
        assert_eq!(&out[2..], &[0.0, 0.0]);
        assert_eq!(&w[3..], &[0.0, 0.0, 0.0]);
        assert_eq!(w[2], 0.0);
    }

    proptest::proptest! {
        #[test]
        fn weight_rows_are_distributions(
            lq in 1usize..6, lk in 1usize..6, dim in 1usize..5,
            raw in proptest::collection::vec(-20.0..20.0f64, 90),
            drop in proptest::collection::vec(proptest::bool::weighted(0.4), 30),
        ) {
            let q = Tensor::from_f64(&[lq, dim], &raw[..lq * dim]).unwrap();
            let k = Tensor::from_f64(&[lk, dim], &raw[30..30 + lk * dim]).unwrap();
            let v = Tensor::from_f64(&[lk, dim], &raw[60..60 + lk * dim]).unwrap();
            // Column 0 always stays so no row is empty.
            let m: Vec<f64> = (0..lq * lk).map(|i| if i % lk != 0 && drop[i] { MASK_SENTINEL } else { 0.0 }).collect();
            let (_, w) = scaled_dot_attention(&q, &k, &v, Some(&Tensor::from_f64(&[lq, lk], &m).unwrap())).unwrap();
            for i in 0..lq {
                let row = &w.data()[i * lk..(i + 1) * lk];
                proptest::prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..lk {
                    proptest::prop_assert!(row[j] >= 0.0);
                    if m[i * lk + j] != 0.0 {
                        proptest::prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }
}
