use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{drop, Dropout};
use crate::numerics::layers::{normal, FeedForward, Linear, MhaParams, Norm, EMBED_STD};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::substream;
use crate::scalar::Scalar;

use super::tokens::TokenBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommaConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub n_max: usize,
    /// Coordinate tokens plus MASK and PAD.
    pub vocab: usize,
}

impl CommaConfig {
    pub fn new(vocab: usize) -> Self {
        Self { d_model: 512, d_ff: 1024, heads: 8, layers: 2, t_obs: 8, t_pred: 12, n_max: 20, vocab }
    }

    pub fn t_total(&self) -> usize {
        self.t_obs + self.t_pred
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "need layers >= 1 and d_model {} divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 3 || self.d_ff == 0 || self.t_obs == 0 || self.t_pred == 0 || self.n_max == 0 {
            return Err(Error::Config("vocab, d_ff, t_obs, t_pred and n_max too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CommaLayer {
    pub temporal: MhaParams,
    pub spatial: MhaParams,
    pub norm_t: Norm,
    pub norm_s: Norm,
    pub ff: FeedForward,
    pub norm_ff: Norm,
}

#[derive(Clone, Debug)]
pub struct CommaParams {
    pub token: ParamId,
    pub time: ParamId,
    pub agent: ParamId,
    pub segment: ParamId,
    pub layers: Vec<CommaLayer>,
    pub head: Linear,
}

impl CommaParams {
    fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &CommaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let token = store.insert("token", normal(rng, &[cfg.vocab, d], EMBED_STD))?;
        let time = store.insert("time", normal(rng, &[cfg.t_total(), d], EMBED_STD))?;
        let agent = store.insert("agent", normal(rng, &[cfg.n_max, d], EMBED_STD))?;
        let segment = store.insert("segment", normal(rng, &[2, d], EMBED_STD))?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("layer.{l}");
            layers.push(CommaLayer {
                temporal: MhaParams::register(store, &format!("{p}.tattn"), d, rng)?,
                spatial: MhaParams::register(store, &format!("{p}.sattn"), d, rng)?,
                norm_t: Norm::register(store, &format!("{p}.ln_t"), d)?,
                norm_s: Norm::register(store, &format!("{p}.ln_s"), d)?,
                ff: FeedForward::register(store, &format!("{p}.ff"), d, cfg.d_ff, rng)?,
                norm_ff: Norm::register(store, &format!("{p}.ln_ff"), d)?,
            });
        }
        let head = Linear::register(store, "head", d, cfg.vocab, rng)?;
        Ok(Self { token, time, agent, segment, layers, head })
    }

    fn lookup<T: Scalar>(store: &ParamStore<T>, cfg: &CommaConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("layer.{l}");
                Ok(CommaLayer {
                    temporal: MhaParams::lookup(store, &format!("{p}.tattn"))?,
                    spatial: MhaParams::lookup(store, &format!("{p}.sattn"))?,
                    norm_t: Norm::lookup(store, &format!("{p}.ln_t"))?,
                    norm_s: Norm::lookup(store, &format!("{p}.ln_s"))?,
                    ff: FeedForward::lookup(store, &format!("{p}.ff"))?,
                    norm_ff: Norm::lookup(store, &format!("{p}.ln_ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token: store.id("token")?,
            time: store.id("time")?,
            agent: store.id("agent")?,
            segment: store.id("segment")?,
            layers,
            head: Linear::lookup(store, "head")?,
        })
    }
}

/// Logits of the masked entries plus every layer's temporal attention node.
pub struct CommaForward {
    /// `[M, vocab]`, rows in batch order of the masked entries.
    pub logits: Var,
    pub labels: Vec<Option<usize>>,
    pub temporal_attention: Vec<Var>,
}

/// Masked spatio-temporal token model.
#[derive(Clone, Debug)]
pub struct StComma<T> {
    pub config: CommaConfig,
    pub params: ParamStore<T>,
    pub handles: CommaParams,
}

impl<T: Scalar> StComma<T> {
    pub fn new(config: CommaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "comma.init");
        let mut params = ParamStore::new();
        let handles = CommaParams::register(&mut params, &config, &mut rng)?;
        Ok(Self { config, params, handles })
    }

    pub fn from_params(config: CommaConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let handles = CommaParams::lookup(&params, &config)?;
        let fresh = Self::new(config, 0)?;
        if fresh.params.len() != params.len()
            || fresh.params.iter().any(|(_, n, t)| params.by_name(n).map(|p| p.shape() != t.shape()).unwrap_or(true))
        {
            return Err(Error::Checkpoint("parameters do not match the token-model configuration".into()));
        }
        Ok(Self { config, params, handles })
    }

    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &TokenBatch, dropout: &mut Option<Dropout<'_>>) -> Result<CommaForward> {
        let cfg = &self.config;
        let (s, t_len, n, d) = (batch.scenes, batch.t_total, batch.agents, cfg.d_model);
        if t_len != cfg.t_total() || batch.t_obs != cfg.t_obs {
            return Err(Error::shape("st_comma", format!("batch has {t_len} steps, model {}", cfg.t_total())));
        }
        if let Some(&bad) = batch.tokens.iter().find(|&&tok| tok >= cfg.vocab) {
            return Err(Error::Data(format!("token {bad} outside vocabulary of {}", cfg.vocab)));
        }
        let emb = g.param(self.handles.token);
        let x = g.index_select(emb, 0, &batch.tokens)?;
        let x = g.reshape(x, &[s, t_len, n, d])?;
        let time = g.param(self.handles.time);
        let time = g.reshape(time, &[1, t_len, 1, d])?;
        let x = g.add(x, time)?;
        let agent = g.param(self.handles.agent);
        let agent = g.index_select(agent, 0, &batch.slots)?;
        let agent = g.reshape(agent, &[s, 1, n, d])?;
        let x = g.add(x, agent)?;
        let seg_ids: Vec<usize> = (0..t_len).map(|t| usize::from(t >= cfg.t_obs)).collect();
        let seg = g.param(self.handles.segment);
        let seg = g.index_select(seg, 0, &seg_ids)?;
        let seg = g.reshape(seg, &[1, t_len, 1, d])?;
        let mut x = g.add(x, seg)?;
        x = drop(g, x, dropout)?;

        let tmask = batch.temporal_mask()?;
        let smask = batch.spatial_mask()?;
        let mut temporal_attention = Vec::with_capacity(cfg.layers);
        for layer in &self.handles.layers {
            let (a, node) = layer.temporal.forward(g, x, x, cfg.heads, Some(&tmask))?;
            temporal_attention.push(node);
            let a = drop(g, a, dropout)?;
            let r = g.add(x, a)?;
            let e = layer.norm_t.forward(g, r)?;
            let flat = g.reshape(e, &[s * t_len, n, 1, d])?;
            let (b, _) = layer.spatial.forward(g, flat, flat, cfg.heads, Some(&smask))?;
            let b = g.reshape(b, &[s, t_len, n, d])?;
            let b = drop(g, b, dropout)?;
            let r = g.add(e, b)?;
            let e = layer.norm_s.forward(g, r)?;
            let h = layer.ff.forward(g, e)?;
            let h = drop(g, h, dropout)?;
            let r = g.add(h, e)?;
            x = layer.norm_ff.forward(g, r)?;
        }
        let rows: Vec<usize> = batch.labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i).collect();
        if rows.is_empty() {
            return Err(Error::Data("token batch has no masked entry".into()));
        }
        let flat = g.reshape(x, &[s * t_len * n, d])?;
        let picked = g.index_select(flat, 0, &rows)?;
        let logits = self.handles.head.forward(g, picked)?;
        let labels = rows.iter().map(|&i| batch.labels[i]).collect();
        Ok(CommaForward { logits, labels, temporal_attention })
    }

    /// Masked-token cross-entropy and accuracy for one batch.
    pub fn loss(&self, g: &mut Graph<'_, T>, batch: &TokenBatch, dropout: &mut Option<Dropout<'_>>) -> Result<(Var, f64)> {
        let out = self.forward(g, batch, dropout)?;
        let loss = g.cross_entropy(out.logits, &out.labels)?;
        Ok((loss, accuracy(g.value(out.logits), &out.labels)))
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[Option<usize>]) -> f64 {
    let v = logits.last_dim();
    let (mut hit, mut total) = (0usize, 0usize);
    for (row, label) in logits.data().chunks_exact(v).zip(labels) {
        let Some(l) = label else { continue };
        let arg = row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
        hit += usize::from(arg == *l);
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
