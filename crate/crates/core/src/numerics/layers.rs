//! Parameterised building blocks shared by the trajectory model and the
//! masked token model.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::numerics::attention::AttnMask;
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Variance epsilon of every layer normalization.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation used for learned encodings and queries.
pub const EMBED_STD: f64 = 0.02;

pub fn xavier_uniform<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
    let data = (0..fan_in * fan_out).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier shape")
}

pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| T::lit(dist.sample(rng))).collect()).expect("normal shape")
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert(format!("{prefix}.w"), xavier_uniform(rng, d_in, d_out))?;
        let b = store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self { w: store.id(&format!("{prefix}.w"))?, b: store.id(&format!("{prefix}.b"))? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        let gain = store.insert(format!("{prefix}.g"), Tensor::full(&[d], T::one()))?;
        let bias = store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))?;
        Ok(Self { gain, bias })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self { gain: store.id(&format!("{prefix}.g"))?, bias: store.id(&format!("{prefix}.b"))? })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, T::lit(LN_EPS))
    }
}

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MhaParams {
    pub fn register<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            q: Linear::register(store, &format!("{prefix}.q"), d, d, rng)?,
            k: Linear::register(store, &format!("{prefix}.k"), d, d, rng)?,
            v: Linear::register(store, &format!("{prefix}.v"), d, d, rng)?,
            o: Linear::register(store, &format!("{prefix}.o"), d, d, rng)?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: Linear::lookup(store, &format!("{prefix}.q"))?,
            k: Linear::lookup(store, &format!("{prefix}.k"))?,
            v: Linear::lookup(store, &format!("{prefix}.v"))?,
            o: Linear::lookup(store, &format!("{prefix}.o"))?,
        })
    }

    /// Projects, attends over axis 1 of `[outer, L, inner, D]` inputs and
    /// applies the output projection. Returns the output and the attention node.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key_value: Var,
        heads: usize,
        mask: Option<&Arc<AttnMask>>,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, key_value)?;
        let v = self.v.forward(g, key_value)?;
        let att = g.attention(q, k, v, heads, mask)?;
        Ok((self.o.forward(g, att)?, att))
    }
}

/// Point-wise feed-forward: `W2 · relu(W1 · x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            inner: Linear::register(store, &format!("{prefix}.1"), d, d_ff, rng)?,
            outer: Linear::register(store, &format!("{prefix}.2"), d_ff, d, rng)?,
        })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            inner: Linear::lookup(store, &format!("{prefix}.1"))?,
            outer: Linear::lookup(store, &format!("{prefix}.2"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, h)
    }
}

/// Plain weight tensors of one multi-head attention layer (`[D × D]` and `[D]`).
#[derive(Clone, Debug)]
pub struct MhaWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

impl<T: Scalar> MhaWeights<T> {
    pub fn identity(d: usize) -> Self {
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.set(&[i, i], T::one());
        }
        let zero = Tensor::zeros(&[d]);
        Self {
            wq: eye.clone(),
            bq: zero.clone(),
            wk: eye.clone(),
            bk: zero.clone(),
            wv: eye.clone(),
            bv: zero.clone(),
            wo: eye,
            bo: zero,
        }
    }

    pub fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            wq: xavier_uniform(rng, d, d),
            bq: normal(rng, &[d], 0.1),
            wk: xavier_uniform(rng, d, d),
            bk: normal(rng, &[d], 0.1),
            wv: xavier_uniform(rng, d, d),
            bv: normal(rng, &[d], 0.1),
            wo: xavier_uniform(rng, d, d),
            bo: normal(rng, &[d], 0.1),
        }
    }
}

/// Multi-head attention on `[L × D]` matrices: project, split into heads,
/// attend per head, concatenate and project back.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
    weights: &MhaWeights<T>,
) -> Result<Tensor<T>> {
    if q.rank() != 2 || k.rank() != 2 || v.shape() != k.shape() || q.shape()[1] != k.shape()[1] {
        return Err(Error::shape("multi_head_attention", format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let lk = k.shape()[0];
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("multi_head_attention", format!("D = {d} not divisible by {heads} heads")));
    }
    let empty = ParamStore::new();
    let mut g = Graph::inference(&empty);
    let proj = |g: &mut Graph<'_, T>, x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>| -> Result<Var> {
        let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        g.linear(x, w, b)
    };
    let qp = proj(&mut g, q, &weights.wq, &weights.bq)?;
    let kp = proj(&mut g, k, &weights.wk, &weights.bk)?;
    let vp = proj(&mut g, v, &weights.wv, &weights.bv)?;
    let qp = g.reshape(qp, &[1, lq, 1, d])?;
    let kp = g.reshape(kp, &[1, lk, 1, d])?;
    let vp = g.reshape(vp, &[1, lk, 1, d])?;
    let mask = mask.map(|m| AttnMask::from_additive(m).map(Arc::new)).transpose()?;
    let att = g.attention(qp, kp, vp, heads, mask.as_ref())?;
    let att = g.reshape(att, &[lq, d])?;
    let (wo, bo) = (g.constant(weights.wo.clone()), g.constant(weights.bo.clone()));
    let out = g.linear(att, wo, bo)?;
    Ok(g.value(out).clone())
}

/// Layer normalization over the last axis with epsilon [`LN_EPS`].
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let empty = ParamStore::new();
    let mut g = Graph::inference(&empty);
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, T::lit(LN_EPS))?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::attention::scaled_dot_attention;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_head_identity_equals_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Tensor<f64> = normal(&mut rng, &[3, 4], 1.0);
        let k: Tensor<f64> = normal(&mut rng, &[5, 4], 1.0);
        let v: Tensor<f64> = normal(&mut rng, &[5, 4], 1.0);
        let mha = multi_head_attention(&q, &k, &v, 1, None, &MhaWeights::identity(4)).unwrap();
        let (sdpa, _) = scaled_dot_attention(&q, &k, &v, None).unwrap();
        assert!(mha.max_abs_diff(&sdpa) < 1e-12);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let q = Tensor::<f64>::zeros(&[2, 6]);
        assert!(multi_head_attention(&q, &q, &q, 4, None, &MhaWeights::identity(6)).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 3.0, 5.0, 5.0]).unwrap();
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let y = layer_norm(&x, &ones, &zeros).unwrap();
        // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert_eq!(&y.data()[2..], &[0.0, 0.0]);

        let bias = Tensor::from_f64(&[2], &[0.25, -4.0]).unwrap();
        let y = layer_norm(&x, &zeros, &bias).unwrap();
        assert_eq!(y.data(), &[0.25, -4.0, 0.25, -4.0]);
    }
}
