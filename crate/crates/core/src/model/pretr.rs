use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::baselines;
use crate::data::Scene;
use crate::error::Result;
use crate::numerics::layers::{normal, FeedForward, Linear, MhaParams, Norm, EMBED_STD};
use crate::numerics::{AttnMask, Graph, ParamStore, Tensor, Var};
use crate::rng::substream;
use crate::scalar::Scalar;

use super::batch::{DecoderMasks, EncoderMasks, SceneBatch};
use super::config::{AttnLayout, AttnVariant, DecodeMode, ModelConfig};

/// Self-attention sublayer: projections and the norms following each residual.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub temporal: MhaParams,
    pub spatial: MhaParams,
    pub norm_t: Norm,
    pub norm_s: Norm,
}

impl SelfAttention {
    fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            temporal: MhaParams::register(store, &format!("{prefix}.tattn"), d, rng)?,
            spatial: MhaParams::register(store, &format!("{prefix}.sattn"), d, rng)?,
            norm_t: Norm::register(store, &format!("{prefix}.ln_t"), d)?,
            norm_s: Norm::register(store, &format!("{prefix}.ln_s"), d)?,
        })
    }

    fn lookup<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            temporal: MhaParams::lookup(store, &format!("{prefix}.tattn"))?,
            spatial: MhaParams::lookup(store, &format!("{prefix}.sattn"))?,
            norm_t: Norm::lookup(store, &format!("{prefix}.ln_t"))?,
            norm_s: Norm::lookup(store, &format!("{prefix}.ln_s"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn: SelfAttention,
    pub ff: FeedForward,
    pub norm_ff: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub attn: SelfAttention,
    pub cross: MhaParams,
    pub norm_c: Norm,
    pub ff: FeedForward,
    pub norm_ff: Norm,
}

/// Masks for one self-attention stage over a `[S, L, n, D]` grid.
#[derive(Clone, Copy)]
pub struct StageMasks<'m> {
    pub temporal: &'m Arc<AttnMask>,
    pub spatial: &'m Arc<AttnMask>,
    pub merged: &'m Arc<AttnMask>,
}

impl<'m> From<&'m EncoderMasks> for StageMasks<'m> {
    fn from(m: &'m EncoderMasks) -> Self {
        Self { temporal: &m.temporal, spatial: &m.spatial, merged: &m.merged }
    }
}

impl<'m> From<&'m DecoderMasks> for StageMasks<'m> {
    fn from(m: &'m DecoderMasks) -> Self {
        Self { temporal: &m.temporal, spatial: &m.spatial, merged: &m.merged }
    }
}

/// Dropout source for training passes. `None` everywhere means evaluation mode.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

pub(crate) fn drop<T: Scalar>(g: &mut Graph<'_, T>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) if d.p > 0.0 => g.dropout(x, d.p, d.rng),
        _ => Ok(x),
    }
}

/// Temporal attention of `[S, L, n, D]`: each agent attends over its own steps.
pub fn temporal_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &MhaParams,
    x: Var,
    heads: usize,
    mask: &Arc<AttnMask>,
) -> Result<Var> {
    Ok(p.forward(g, x, x, heads, Some(mask))?.0)
}

/// Spatial attention of `[S, L, n, D]`: each step attends over the agents present.
pub fn spatial_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &MhaParams,
    x: Var,
    heads: usize,
    mask: &Arc<AttnMask>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (s, l, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = g.reshape(x, &[s * l, n, 1, d])?;
    let (out, _) = p.forward(g, flat, flat, heads, Some(mask))?;
    g.reshape(out, &shape)
}

/// Divided spatio-temporal self-attention with residuals and norms.
pub fn divided_attention_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &SelfAttention,
    x: Var,
    masks: StageMasks<'_>,
    variant: AttnVariant,
    heads: usize,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let temporal = |g: &mut Graph<'_, T>, x: Var, dropout: &mut Option<Dropout<'_>>| -> Result<Var> {
        let a = temporal_attention(g, &p.temporal, x, heads, masks.temporal)?;
        let a = drop(g, a, dropout)?;
        let r = g.add(x, a)?;
        p.norm_t.forward(g, r)
    };
    let spatial = |g: &mut Graph<'_, T>, x: Var, dropout: &mut Option<Dropout<'_>>| -> Result<Var> {
        let a = spatial_attention(g, &p.spatial, x, heads, masks.spatial)?;
        let a = drop(g, a, dropout)?;
        let r = g.add(x, a)?;
        p.norm_s.forward(g, r)
    };
    match variant {
        AttnVariant::Ts => {
            let e = temporal(g, x, dropout)?;
            spatial(g, e, dropout)
        }
        AttnVariant::St => {
            let e = spatial(g, x, dropout)?;
            temporal(g, e, dropout)
        }
        AttnVariant::AggTs => {
            let a = temporal(g, x, dropout)?;
            let b = spatial(g, x, dropout)?;
            g.add(a, b)
        }
    }
}

fn self_attention_stage<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    p: &SelfAttention,
    x: Var,
    masks: StageMasks<'_>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    match cfg.layout {
        AttnLayout::Divided => divided_attention_block(g, p, x, masks, cfg.variant, cfg.heads, dropout),
        AttnLayout::Merged => {
            let a = baselines::merged_attention(g, &p.temporal, x, masks.merged, cfg.heads)?;
            let a = drop(g, a, dropout)?;
            let r = g.add(x, a)?;
            p.norm_t.forward(g, r)
        }
        AttnLayout::TemporalOnly => {
            let a = temporal_attention(g, &p.temporal, x, cfg.heads, masks.temporal)?;
            let a = drop(g, a, dropout)?;
            let r = g.add(x, a)?;
            p.norm_t.forward(g, r)
        }
    }
}

fn feed_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    ff: &FeedForward,
    norm: &Norm,
    x: Var,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let h = ff.forward(g, x)?;
    let h = drop(g, h, dropout)?;
    let r = g.add(h, x)?;
    norm.forward(g, r)
}

/// Parameter handles of a [`Pretr`] model.
#[derive(Clone, Debug)]
pub struct PretrParams {
    pub embed: Linear,
    pub enc_time: crate::numerics::ParamId,
    pub dec_time: crate::numerics::ParamId,
    pub agent: crate::numerics::ParamId,
    pub queries: crate::numerics::ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
}

impl PretrParams {
    fn register<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let embed = Linear::register(store, "embed", cfg.d_in, d, rng)?;
        let enc_time = store.insert("enc_time", normal(rng, &[cfg.t_obs, d], EMBED_STD))?;
        let dec_time = store.insert("dec_time", normal(rng, &[cfg.t_pred, d], EMBED_STD))?;
        let agent = store.insert("agent", normal(rng, &[cfg.n_max, d], EMBED_STD))?;
        let queries = store.insert("queries", normal(rng, &[cfg.t_pred, cfg.n_max, d], EMBED_STD))?;
        let mut encoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let pre = format!("enc.{l}");
            encoder.push(EncoderLayer {
                attn: SelfAttention::register(store, &pre, d, rng)?,
                ff: FeedForward::register(store, &format!("{pre}.ff"), d, cfg.d_ff, rng)?,
                norm_ff: Norm::register(store, &format!("{pre}.ln_ff"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let pre = format!("dec.{l}");
            decoder.push(DecoderLayer {
                attn: SelfAttention::register(store, &pre, d, rng)?,
                cross: MhaParams::register(store, &format!("{pre}.cattn"), d, rng)?,
                norm_c: Norm::register(store, &format!("{pre}.ln_c"), d)?,
                ff: FeedForward::register(store, &format!("{pre}.ff"), d, cfg.d_ff, rng)?,
                norm_ff: Norm::register(store, &format!("{pre}.ln_ff"), d)?,
            });
        }
        let head = Linear::register(store, "head", d, cfg.d_out, rng)?;
        Ok(Self { embed, enc_time, dec_time, agent, queries, encoder, decoder, head })
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let encoder = (0..cfg.layers)
            .map(|l| {
                let pre = format!("enc.{l}");
                Ok(EncoderLayer {
                    attn: SelfAttention::lookup(store, &pre)?,
                    ff: FeedForward::lookup(store, &format!("{pre}.ff"))?,
                    norm_ff: Norm::lookup(store, &format!("{pre}.ln_ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.layers)
            .map(|l| {
                let pre = format!("dec.{l}");
                Ok(DecoderLayer {
                    attn: SelfAttention::lookup(store, &pre)?,
                    cross: MhaParams::lookup(store, &format!("{pre}.cattn"))?,
                    norm_c: Norm::lookup(store, &format!("{pre}.ln_c"))?,
                    ff: FeedForward::lookup(store, &format!("{pre}.ff"))?,
                    norm_ff: Norm::lookup(store, &format!("{pre}.ln_ff"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed: Linear::lookup(store, "embed")?,
            enc_time: store.id("enc_time")?,
            dec_time: store.id("dec_time")?,
            agent: store.id("agent")?,
            queries: store.id("queries")?,
            encoder,
            decoder,
            head: Linear::lookup(store, "head")?,
        })
    }
}

/// Decoder stack output plus the cross-attention node of every layer.
pub struct DecoderTrace {
    pub prediction: Var,
    pub hidden: Var,
    pub cross_attention: Vec<Var>,
}

/// Encoder-decoder trajectory predictor over a batch of multi-agent scenes.
#[derive(Clone, Debug)]
pub struct Pretr<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub handles: PretrParams,
}

impl<T: Scalar> Pretr<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "model.init");
        let mut params = ParamStore::new();
        let handles = PretrParams::register(&mut params, &config, &mut rng)?;
        Ok(Self { config, params, handles })
    }

    /// Rebuilds a model from an existing parameter store (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let handles = PretrParams::lookup(&params, &config)?;
        let expected = Self::new(config, 0)?;
        for (_, name, t) in expected.params.iter() {
            let got = params.by_name(name)?;
            if got.shape() != t.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != expected.params.len() {
            return Err(crate::Error::Checkpoint(format!(
                "{} parameters, expected {}",
                params.len(),
                expected.params.len()
            )));
        }
        Ok(Self { config, params, handles })
    }

    pub fn batch(&self, scenes: &[&Scene]) -> Result<SceneBatch<T>> {
        SceneBatch::new(scenes, self.config.n_max)
    }

    /// Agent identity encodings gathered to the batch columns, `[S, 1, n, D]`.
    pub(crate) fn agent_encoding(&self, g: &mut Graph<'_, T>, batch: &SceneBatch<T>) -> Result<Var> {
        let agent = g.param(self.handles.agent);
        let sel = g.index_select(agent, 0, &batch.slots)?;
        g.reshape(sel, &[batch.scenes, 1, batch.agents, self.config.d_model])
    }

    /// Embeds `[S, L, n, 4]` states and adds the first `L` rows of `time` plus agent identity.
    pub(crate) fn embed_states(
        &self,
        g: &mut Graph<'_, T>,
        states: Var,
        time: crate::numerics::ParamId,
        agent: Var,
    ) -> Result<Var> {
        let len = g.shape(states)[1];
        let e = self.handles.embed.forward(g, states)?;
        let time = g.param(time);
        let time = if g.shape(time)[0] == len { time } else { g.slice(time, 0, 0, len)? };
        let time = g.reshape(time, &[1, len, 1, self.config.d_model])?;
        let e = g.add(e, time)?;
        g.add(e, agent)
    }

    /// Encodes the observed sequences into memory `[S, T_obs, n, D]`.
    pub fn encode(&self, g: &mut Graph<'_, T>, batch: &SceneBatch<T>, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        let masks = batch.encoder_masks()?;
        let inputs = g.constant(batch.inputs.clone());
        let agent = self.agent_encoding(g, batch)?;
        let mut e = self.embed_states(g, inputs, self.handles.enc_time, agent)?;
        e = drop(g, e, dropout)?;
        for layer in &self.handles.encoder {
            let a = self_attention_stage(g, &self.config, &layer.attn, e, (&masks).into(), dropout)?;
            e = feed_forward(g, &layer.ff, &layer.norm_ff, a, dropout)?;
        }
        g.counters_mut().encoder_forwards += 1;
        Ok(e)
    }

    /// Learned queries for every future step, `[S, T_pred, n, D]`, with
    /// time and agent encodings added.
    pub fn query_embeddings(&self, g: &mut Graph<'_, T>, batch: &SceneBatch<T>) -> Result<Var> {
        let cfg = &self.config;
        let q = g.param(self.handles.queries);
        let q = g.index_select(q, 1, &batch.slots)?;
        let q = g.reshape(q, &[cfg.t_pred, batch.scenes, batch.agents, cfg.d_model])?;
        let q = g.permute(q, &[1, 0, 2, 3])?;
        let time = g.param(self.handles.dec_time);
        let time = g.reshape(time, &[1, cfg.t_pred, 1, cfg.d_model])?;
        let q = g.add(q, time)?;
        let agent = self.agent_encoding(g, batch)?;
        g.add(q, agent)
    }

    /// Runs the decoder stack on `[S, L, n, D]` inputs against encoder memory.
    pub fn decoder_stack(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        memory: Var,
        masks: &DecoderMasks,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut e = x;
        let mut cross_nodes = Vec::with_capacity(self.handles.decoder.len());
        for layer in &self.handles.decoder {
            let a = self_attention_stage(g, &self.config, &layer.attn, e, masks.into(), dropout)?;
            let (c, node) = layer.cross.forward(g, a, memory, self.config.heads, Some(&masks.cross))?;
            cross_nodes.push(node);
            let c = drop(g, c, dropout)?;
            let r = g.add(a, c)?;
            let c = layer.norm_c.forward(g, r)?;
            e = feed_forward(g, &layer.ff, &layer.norm_ff, c, dropout)?;
        }
        g.counters_mut().decoder_forwards += 1;
        Ok((e, cross_nodes))
    }

    /// Maps decoder states `[S, L, n, D]` to absolute positions `[S, L, n, 2]`.
    pub fn head(&self, g: &mut Graph<'_, T>, hidden: Var, batch: &SceneBatch<T>) -> Result<Var> {
        let delta = self.handles.head.forward(g, hidden)?;
        let last = g.constant(batch.last_observed.clone());
        g.add(delta, last)
    }

    /// All future steps from one non-causal decoder pass.
    pub fn decode_parallel_traced(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        batch: &SceneBatch<T>,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<DecoderTrace> {
        let masks = batch.decoder_masks(self.config.t_pred, false)?;
        let q = self.query_embeddings(g, batch)?;
        let q = drop(g, q, dropout)?;
        let (hidden, cross_attention) = self.decoder_stack(g, q, memory, &masks, dropout)?;
        let prediction = self.head(g, hidden, batch)?;
        Ok(DecoderTrace { prediction, hidden, cross_attention })
    }

    pub fn decode_parallel(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        batch: &SceneBatch<T>,
        dropout: &mut Option<Dropout<'_>>,
    ) -> Result<Var> {
        Ok(self.decode_parallel_traced(g, memory, batch, dropout)?.prediction)
    }

    /// Predicted positions `[S, T_pred, n, 2]` using the configured decoding mode.
    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &SceneBatch<T>, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
        let memory = self.encode(g, batch, dropout)?;
        match self.config.decode {
            DecodeMode::Parallel => self.decode_parallel(g, memory, batch, dropout),
            DecodeMode::Autoregressive => baselines::decode_autoregressive(self, g, memory, batch, dropout),
        }
    }

    /// Normalized predictions `[T_pred, n_max, 2]` per scene; inactive slots are zero.
    pub fn predict(&self, scenes: &[&Scene]) -> Result<Vec<Tensor<f64>>> {
        let batch = self.batch(scenes)?;
        let mut g = Graph::inference(&self.params);
        let out = self.forward(&mut g, &batch, &mut None)?;
        batch.scatter(g.value(out), self.config.n_max)
    }

    /// Overwrites the head with zeros so every prediction equals the last observed position.
    pub fn zero_head(&mut self) {
        let h = self.handles.head;
        self.params.get_mut(h.w).data_mut().fill(T::zero());
        self.params.get_mut(h.b).data_mut().fill(T::zero());
    }
}
