//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied to
//! [`Var`] handles. Nodes that depend on no trainable parameter are never
//! differentiated. Inference graphs built with [`Graph::inference`] record the
//! same values but mark parameters as constants, so they are read-only over the
//! store and may be built concurrently from several threads.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::attention::{self, AttnGeometry, AttnMask};
use crate::numerics::params::{Gradients, ParamId, ParamStore};
use crate::numerics::tensor::strides_of;
use crate::numerics::Tensor;
use crate::scalar::{MatRef, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Operation counters accumulated while recording.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Multiply-accumulates spent in dense projections.
    pub proj_macs: u64,
    /// Multiply-accumulates spent in attention scores and weighted sums.
    pub attn_macs: u64,
    /// Number of full passes through an encoder stack.
    pub encoder_forwards: u64,
    /// Number of full passes through a decoder stack.
    pub decoder_forwards: u64,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, rows: usize, k: usize, n: usize },
    Binary { kind: BinKind, a: usize, b: usize },
    Scale { a: usize, factor: T },
    Relu { a: usize },
    Sum { a: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    IndexSelect { a: usize, axis: usize, indices: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Attention { q: usize, k: usize, v: usize, geo: AttnGeometry, weights: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Dropout { a: usize, keep: Vec<T> },
}

enum Slot<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Slot<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<usize>>,
    track: bool,
    counters: Counters,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Recording graph whose parameters receive gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_tracking(params, true)
    }

    /// Forward-only graph; parameters are treated as constants.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_tracking(params, false)
    }

    fn with_tracking(params: &'p ParamStore<T>, track: bool) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            track,
            counters: Counters::default(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn counters_mut(&mut self) -> &mut Counters {
        &mut self.counters
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(v.0)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.val(v.0).shape()
    }

    fn val(&self, idx: usize) -> &Tensor<T> {
        match &self.nodes[idx].value {
            Slot::Owned(t) => t,
            Slot::Param(id) => self.params.get(*id),
        }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value: Slot::Owned(value), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Slot::Owned(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(idx) = self.param_nodes[id.0] {
            return Var(idx);
        }
        self.nodes.push(Node { value: Slot::Param(id), op: Op::Leaf, needs_grad: self.track });
        let idx = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(idx);
        Var(idx)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// `x[.., K] · w[K, N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("matmul", format!("{xs:?} · {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.val(x.0).numel() / k;
        let out = crate::scalar::matmul(self.val(x.0).data(), self.val(w.0).data(), rows, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        self.counters.proj_macs += (rows * k * n) as u64;
        let needs = self.needs(x.0) || self.needs(w.0);
        self.push("matmul", Tensor::new(&shape, out)?, Op::MatMul { a: x.0, b: w.0, rows, k, n }, needs)
    }

    /// Affine map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Elementwise op where `b` broadcasts into the shape of `a` (trailing alignment).
    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let bstr = broadcast_strides(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(ad.len());
        for_each_row(av.shape(), &bstr, |ao, bo, len, bs| {
            let arow = &ad[ao..ao + len];
            match (kind, bs) {
                (BinKind::Add, 1) => out.extend(arow.iter().zip(&bd[bo..bo + len]).map(|(&x, &y)| x + y)),
                (BinKind::Sub, 1) => out.extend(arow.iter().zip(&bd[bo..bo + len]).map(|(&x, &y)| x - y)),
                (BinKind::Mul, 1) => out.extend(arow.iter().zip(&bd[bo..bo + len]).map(|(&x, &y)| x * y)),
                (BinKind::Add, _) => out.extend(arow.iter().map(|&x| x + bd[bo])),
                (BinKind::Sub, _) => out.extend(arow.iter().map(|&x| x - bd[bo])),
                (BinKind::Mul, _) => out.extend(arow.iter().map(|&x| x * bd[bo])),
            }
        });
        let shape = av.shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push("binary", Tensor::new(&shape, out)?, Op::Binary { kind, a: a.0, b: b.0 }, needs)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.val(a.0).map(|v| v * factor);
        let needs = self.needs(a.0);
        self.push("scale", out, Op::Scale { a: a.0, factor }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a.0).map(|v| v.max(T::zero()));
        let needs = self.needs(a.0);
        self.push("relu", out, Op::Relu { a: a.0 }, needs)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a.0).sum();
        let needs = self.needs(a.0);
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a.0).clone().reshape(shape)?;
        let needs = self.needs(a.0);
        self.push("reshape", out, Op::Reshape { a: a.0 }, needs)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.val(a.0);
        let mut seen = vec![false; av.rank()];
        if axes.len() != av.rank() || axes.iter().any(|&x| x >= seen.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {:?}", av.shape())));
        }
        let (data, shape) = permute_data(av.data(), av.shape(), axes);
        let needs = self.needs(a.0);
        self.push("permute", Tensor::new(&shape, data)?, Op::Permute { a: a.0, axes: axes.to_vec() }, needs)
    }

    /// Gathers `indices` along `axis`.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let av = self.val(a.0);
        if axis >= av.rank() || indices.iter().any(|&i| i >= av.shape()[axis]) {
            return Err(Error::shape("index_select", format!("axis {axis} indices out of range for {:?}", av.shape())));
        }
        let (outer, dim, inner) = split_axis(av.shape(), axis);
        let d = av.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let off = (o * dim + i) * inner;
                out.extend_from_slice(&d[off..off + inner]);
            }
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = indices.len();
        let needs = self.needs(a.0);
        self.push(
            "index_select",
            Tensor::new(&shape, out)?,
            Op::IndexSelect { a: a.0, axis, indices: indices.to_vec() },
            needs,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let pv = self.val(p.0);
                let len = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.needs(p.0));
        self.push(
            "concat",
            Tensor::new(&shape, out)?,
            Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis },
            needs,
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a.0);
        if axis >= av.rank() || start + len > av.shape()[axis] || len == 0 {
            return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, av.shape())));
        }
        let (outer, dim, inner) = split_axis(av.shape(), axis);
        let d = av.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * dim + start) * inner;
            out.extend_from_slice(&d[off..off + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let needs = self.needs(a.0);
        self.push("slice", Tensor::new(&shape, out)?, Op::Slice { a: a.0, axis, start }, needs)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.val(x.0);
        let d = xv.last_dim();
        if self.val(gain.0).numel() != d || self.val(bias.0).numel() != d {
            return Err(Error::shape("layer_norm", format!("gain/bias vs feature dim {d}")));
        }
        let (g, bb) = (self.val(gain.0).data(), self.val(bias.0).data());
        let rows = xv.numel() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + bb[j]);
            }
        }
        let shape = xv.shape().to_vec();
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        self.push(
            "layer_norm",
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention on `[outer, L, inner, D]` inputs.
    ///
    /// `q` is `[outer, Lq, inner, D]`, `k` and `v` are `[outer, Lk, inner, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Arc<AttnMask>>) -> Result<Var> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 4 || ks.len() != 4 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] || qs[3] != ks[3] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let geo = AttnGeometry { outer: qs[0], inner: qs[2], lq: qs[1], lk: ks[1], dim: qs[3], heads };
        let shape = qs.to_vec();
        let (out, weights) = attention::forward(
            self.val(q.0).data(),
            self.val(k.0).data(),
            self.val(v.0).data(),
            &geo,
            mask.map(|m| m.as_ref()),
        )?;
        self.counters.attn_macs += geo.macs();
        let needs = self.needs(q.0) || self.needs(k.0) || self.needs(v.0);
        self.push(
            "attention",
            Tensor::new(&shape, out)?,
            Op::Attention { q: q.0, k: k.0, v: v.0, geo, weights },
            needs,
        )
    }

    /// Attention weights `[batch, heads, Lq, Lk]` recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<(&AttnGeometry, &[T])> {
        match &self.nodes[v.0].op {
            Op::Attention { geo, weights, .. } => Some((geo, weights)),
            _ => None,
        }
    }

    /// Mean negative log-likelihood over rows that carry a target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.val(logits.0);
        let classes = lv.last_dim();
        let rows = lv.numel() / classes;
        if targets.len() != rows || targets.iter().flatten().any(|&c| c >= classes) {
            return Err(Error::shape("cross_entropy", format!("{rows} rows of {classes} classes vs {} targets", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Data("cross entropy over zero targets".into()));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut loss = T::zero();
        for (r, (row, target)) in lv.data().chunks_exact(classes).zip(targets).enumerate() {
            let Some(t) = target else { continue };
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&x| (x - max).exp()).sum();
            for (c, &x) in row.iter().enumerate() {
                probs[r * classes + c] = (x - max).exp() / denom;
            }
            loss += denom.ln() + max - row[*t];
        }
        loss /= T::from_usize(count).unwrap();
        let needs = self.needs(logits.0);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs, count },
            needs,
        )
    }

    /// Inverted dropout with drop probability `p`. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout probability {p} must be < 1")));
        }
        let scale = T::lit(1.0 / (1.0 - p));
        let av = self.val(a.0);
        let keep: Vec<T> = (0..av.numel()).map(|_| if rng.random::<f64>() < p { T::zero() } else { scale }).collect();
        let out: Vec<T> = av.data().iter().zip(&keep).map(|(&x, &m)| x * m).collect();
        let shape = av.shape().to_vec();
        let needs = self.needs(a.0);
        self.push("dropout", Tensor::new(&shape, out)?, Op::Dropout { a: a.0, keep }, needs)
    }

    /// Back-propagates from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss.0).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Slot::Param(id) = node.value {
                        for (a, b) in out.get_mut(id).data_mut().iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                }
                Op::MatMul { a, b, rows, k, n } => {
                    let (rows, k, n) = (*rows, *k, *n);
                    if self.needs(*a) {
                        // dx = dy · wᵀ
                        let mut dx = vec![T::zero(); rows * k];
                        T::gemm_raw(
                            rows,
                            n,
                            k,
                            T::one(),
                            MatRef::row_major(&g, n),
                            MatRef::row_major(self.val(*b).data(), n).t(),
                            T::zero(),
                            &mut dx,
                        );
                        accumulate(&mut grads, *a, dx);
                    }
                    if self.needs(*b) {
                        // dw = xᵀ · dy
                        let mut dw = vec![T::zero(); k * n];
                        T::gemm_raw(
                            k,
                            rows,
                            n,
                            T::one(),
                            MatRef::row_major(self.val(*a).data(), k).t(),
                            MatRef::row_major(&g, n),
                            T::zero(),
                            &mut dw,
                        );
                        accumulate(&mut grads, *b, dw);
                    }
                }
                Op::Binary { kind, a, b } => {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let bstr = broadcast_strides(av.shape(), bv.shape())?;
                    if self.needs(*a) {
                        let da = match kind {
                            BinKind::Add | BinKind::Sub => g.clone(),
                            BinKind::Mul => {
                                let mut da = Vec::with_capacity(g.len());
                                let bd = bv.data();
                                for_each_row(av.shape(), &bstr, |ao, bo, len, bs| {
                                    for i in 0..len {
                                        da.push(g[ao + i] * bd[bo + i * bs]);
                                    }
                                });
                                da
                            }
                        };
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); bv.numel()];
                        let ad = av.data();
                        for_each_row(av.shape(), &bstr, |ao, bo, len, bs| {
                            for i in 0..len {
                                let gi = g[ao + i];
                                db[bo + i * bs] += match kind {
                                    BinKind::Add => gi,
                                    BinKind::Sub => -gi,
                                    BinKind::Mul => gi * ad[ao + i],
                                };
                            }
                        });
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.into_iter().map(|v| v * f).collect());
                }
                Op::Relu { a } => {
                    let av = self.val(*a).data();
                    let da = g.iter().zip(av).map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() }).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum { a } => {
                    let n = self.val(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Reshape { a } => accumulate(&mut grads, *a, g),
                Op::Permute { a, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inverse[ax] = i;
                    }
                    let (da, _) = permute_data(&g, node_shape(self, idx), &inverse);
                    accumulate(&mut grads, *a, da);
                }
                Op::IndexSelect { a, axis, indices } => {
                    let ashape = self.val(*a).shape();
                    let (outer, dim, inner) = split_axis(ashape, *axis);
                    let mut da = vec![T::zero(); outer * dim * inner];
                    let mut src = 0;
                    for o in 0..outer {
                        for &i in indices {
                            let off = (o * dim + i) * inner;
                            for (d, s) in da[off..off + inner].iter_mut().zip(&g[src..src + inner]) {
                                *d += *s;
                            }
                            src += inner;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Concat { parts, axis } => {
                    let oshape = node_shape(self, idx);
                    let (outer, total, inner) = split_axis(oshape, *axis);
                    let mut start = 0;
                    for &p in parts {
                        let len = self.val(p).shape()[*axis];
                        if self.needs(p) {
                            let mut dp = Vec::with_capacity(outer * len * inner);
                            for o in 0..outer {
                                let off = (o * total + start) * inner;
                                dp.extend_from_slice(&g[off..off + len * inner]);
                            }
                            accumulate(&mut grads, p, dp);
                        }
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let ashape = self.val(*a).shape();
                    let (outer, dim, inner) = split_axis(ashape, *axis);
                    let len = node_shape(self, idx)[*axis];
                    let mut da = vec![T::zero(); outer * dim * inner];
                    for o in 0..outer {
                        let off = (o * dim + start) * inner;
                        da[off..off + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.val(*gain).data();
                    let d = gv.len();
                    let dn = T::from_usize(d).unwrap();
                    if self.needs(*gain) || self.needs(*bias) {
                        let mut dg = vec![T::zero(); d];
                        let mut db = vec![T::zero(); d];
                        for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                dg[j] += grow[j] * hrow[j];
                                db[j] += grow[j];
                            }
                        }
                        if self.needs(*gain) {
                            accumulate(&mut grads, *gain, dg);
                        }
                        if self.needs(*bias) {
                            accumulate(&mut grads, *bias, db);
                        }
                    }
                    if self.needs(*x) {
                        let mut dx = Vec::with_capacity(g.len());
                        let mut dxhat = vec![T::zero(); d];
                        for ((grow, hrow), &inv) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(inv_std) {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for j in 0..d {
                                dxhat[j] = grow[j] * gv[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * hrow[j];
                            }
                            for j in 0..d {
                                dx.push(inv / dn * (dn * dxhat[j] - s1 - hrow[j] * s2));
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention { q, k, v, geo, weights } => {
                    let (dq, dk, dv) = attention::backward(
                        self.val(*q).data(),
                        self.val(*k).data(),
                        self.val(*v).data(),
                        weights,
                        &g,
                        geo,
                    );
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let classes = self.val(*logits).last_dim();
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let mut dl = vec![T::zero(); probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for c in 0..classes {
                            dl[r * classes + c] = probs[r * classes + c] * scale;
                        }
                        dl[r * classes + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Dropout { a, keep } => {
                    accumulate(&mut grads, *a, g.iter().zip(keep).map(|(&x, &m)| x * m).collect());
                }
            }
        }
        Ok(out)
    }
}

fn node_shape<'a, T: Scalar>(g: &'a Graph<'_, T>, idx: usize) -> &'a [usize] {
    g.val(idx).shape()
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, delta: Vec<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Strides of `b` aligned to the axes of `a`, zero on broadcast axes.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if b.len() > a.len() {
        return Err(Error::shape("broadcast", format!("{b:?} into {a:?}")));
    }
    let bstr_own = strides_of(b);
    let pad = a.len() - b.len();
    let mut out = vec![0; a.len()];
    for i in 0..b.len() {
        let (ad, bd) = (a[pad + i], b[i]);
        if bd == ad {
            out[pad + i] = if bd == 1 { 0 } else { bstr_own[i] };
        } else if bd != 1 {
            return Err(Error::shape("broadcast", format!("{b:?} into {a:?}")));
        }
    }
    Ok(out)
}

/// Walks `a` row by row (rows = all axes but the last), yielding
/// `(a_offset, b_offset, row_len, b_inner_stride)`.
fn for_each_row(shape: &[usize], bstr: &[usize], mut f: impl FnMut(usize, usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1, 0);
        return;
    }
    let len = shape[rank - 1];
    let inner_stride = bstr[rank - 1];
    let rows: usize = shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut boff = 0usize;
    for r in 0..rows {
        f(r * len, boff, len, inner_stride);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            boff += bstr[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            boff -= bstr[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Copies `data` (shaped `shape`) into the layout of `shape` permuted by `axes`.
fn permute_data<T: Copy + Default>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, new_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            off -= src_strides[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore<f64>, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        let u = s.insert("unused", Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap()).unwrap();
        (s, w, u)
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let (s, w, u) = store();
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        let x = g.constant(Tensor::from_f64(&[3], &[3.0, 4.0, -5.0]).unwrap());
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), &[3.0, 4.0, -5.0]);
        assert_eq!(grads.get(u).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (s, w, _) = store();
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        assert!(g.backward(wv).is_err());
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let (s, _, _) = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::from_f64(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1, 3], &[100., 200., 300., 400., 500., 600.]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).at(&[1, 1, 2]), 11.0 + 600.0);
        assert_eq!(g.value(c).at(&[0, 1, 0]), 3.0 + 100.0);
        let bias = g.constant(Tensor::from_f64(&[3], &[1., 2., 3.]).unwrap());
        let d = g.add(a, bias).unwrap();
        assert_eq!(g.value(d).at(&[1, 0, 1]), 7.0 + 2.0);
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (p, shape) = permute_data(&data, &[2, 3, 4], &[1, 2, 0]);
        assert_eq!(shape, vec![3, 4, 2]);
        // out[i][j][k] = in[k][i][j]
        assert_eq!(p[(1 * 4 + 2) * 2 + 1], data[(1 * 3 + 1) * 4 + 2]);
        let (back, bshape) = permute_data(&p, &shape, &[2, 0, 1]);
        assert_eq!(bshape, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let (s, _, _) = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::from_f64(&[1], &[f64::MAX]).unwrap());
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite { .. })));
    }
}
