//! Comparators: step-by-step causal decoding over the same stack, and joint
//! attention over all flattened agent-time tokens.

use std::sync::Arc;

use crate::error::Result;
use crate::model::{drop, Dropout, Pretr, SceneBatch};
use crate::numerics::layers::MhaParams;
use crate::numerics::{AttnMask, Graph, Tensor, Var};
use crate::scalar::Scalar;

pub use crate::model::DecodeMode;

/// Joint self-attention of `[S, T, n, D]` over all `T·n` tokens of each scene.
///
/// Token order in the flattened sequence is time-major (`t * n + agent`).
pub fn merged_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &MhaParams,
    x: Var,
    mask: &Arc<AttnMask>,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (s, t, n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = g.reshape(x, &[s, t * n, 1, d])?;
    let (out, _) = p.forward(g, flat, flat, heads, Some(mask))?;
    g.reshape(out, &shape)
}

/// Merged attention block with residual and norm, used for layout comparisons.
pub fn merged_attention_block<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &MhaParams,
    norm: &crate::numerics::layers::Norm,
    x: Var,
    mask: &Arc<AttnMask>,
    heads: usize,
) -> Result<Var> {
    let a = merged_attention(g, p, x, mask, heads)?;
    let r = g.add(x, a)?;
    norm.forward(g, r)
}

/// State token `[S, 1, n, 4]` from a fed-back position and its predecessor.
fn state_token<T: Scalar>(g: &mut Graph<'_, T>, pos: Var, prev: Var) -> Result<Var> {
    let vel = g.sub(pos, prev)?;
    g.concat(&[pos, vel], 3)
}

/// One autoregressive step: given the outputs already produced
/// (`history[j]` is step `j`, `[S, 1, n, 2]`), predicts step `history.len()`.
///
/// The whole prefix is re-run through the decoder under a causal mask, so a
/// horizon of `T` costs `Σ_{t=1..T} t²` in temporal attention.
pub fn ar_step<T: Scalar>(
    model: &Pretr<T>,
    g: &mut Graph<'_, T>,
    memory: Var,
    batch: &SceneBatch<T>,
    history: &[Var],
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let len = history.len() + 1;
    let last = g.constant(batch.last_observed.clone());
    let mut tokens = Vec::with_capacity(len);
    tokens.push(g.constant(batch.last_state.clone()));
    for (j, &pos) in history.iter().enumerate() {
        let prev = if j == 0 { last } else { history[j - 1] };
        tokens.push(state_token(g, pos, prev)?);
    }
    let seq = if tokens.len() == 1 { tokens[0] } else { g.concat(&tokens, 1)? };
    let agent = model.agent_encoding(g, batch)?;
    let x = model.embed_states(g, seq, model.handles.dec_time, agent)?;
    let x = drop(g, x, dropout)?;
    let masks = batch.decoder_masks(len, true)?;
    let (hidden, _) = model.decoder_stack(g, x, memory, &masks, dropout)?;
    let tail = g.slice(hidden, 1, len - 1, 1)?;
    model.head(g, tail, batch)
}

/// Feeds each prediction back as the next input; `T_pred` decoder passes.
pub fn decode_autoregressive<T: Scalar>(
    model: &Pretr<T>,
    g: &mut Graph<'_, T>,
    memory: Var,
    batch: &SceneBatch<T>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let mut history = Vec::with_capacity(batch.t_pred);
    for _ in 0..batch.t_pred {
        let next = ar_step(model, g, memory, batch, &history, dropout)?;
        history.push(next);
    }
    g.concat(&history, 1)
}

/// Ground-truth step inputs for teacher forcing, `[S, T_pred, n, 4]`.
///
/// Missing targets carry the previous position forward with zero velocity.
fn teacher_inputs<T: Scalar>(batch: &SceneBatch<T>) -> Result<Tensor<T>> {
    let (s_count, tp, n) = (batch.scenes, batch.t_pred, batch.agents);
    let mut out = vec![T::zero(); s_count * tp * n * 4];
    for s in 0..s_count {
        for c in 0..n {
            let base = (s * n + c) * 4;
            out[(s * tp * n + c) * 4..(s * tp * n + c) * 4 + 4].copy_from_slice(&batch.last_state.data()[base..base + 4]);
            let mut prev = [batch.last_observed.data()[(s * n + c) * 2], batch.last_observed.data()[(s * n + c) * 2 + 1]];
            for t in 1..tp {
                let src = (s * tp + t - 1) * n + c;
                let pos = if batch.target_mask.data()[src] > T::zero() {
                    [batch.targets.data()[src * 2], batch.targets.data()[src * 2 + 1]]
                } else {
                    prev
                };
                let dst = ((s * tp + t) * n + c) * 4;
                out[dst..dst + 4].copy_from_slice(&[pos[0], pos[1], pos[0] - prev[0], pos[1] - prev[1]]);
                prev = pos;
            }
        }
    }
    Tensor::new(&[s_count, tp, n, 4], out)
}

/// Causal decoder over ground-truth step inputs: one pass, all steps.
pub fn decode_teacher_forced<T: Scalar>(
    model: &Pretr<T>,
    g: &mut Graph<'_, T>,
    memory: Var,
    batch: &SceneBatch<T>,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    let seq = g.constant(teacher_inputs(batch)?);
    let agent = model.agent_encoding(g, batch)?;
    let x = model.embed_states(g, seq, model.handles.dec_time, agent)?;
    let x = drop(g, x, dropout)?;
    let masks = batch.decoder_masks(batch.t_pred, true)?;
    let (hidden, _) = model.decoder_stack(g, x, memory, &masks, dropout)?;
    model.head(g, hidden, batch)
}

/// Multiply-accumulates of attention scores and weighted sums for one
/// divided self-attention layer over `t` steps and `n` agents.
pub fn divided_attention_macs(t: u64, n: u64, d: u64) -> u64 {
    2 * (t * t * n + n * n * t) * d
}

/// Same quantity for merged attention over the `t·n` flattened tokens.
pub fn merged_attention_macs(t: u64, n: u64, d: u64) -> u64 {
    2 * (t * n) * (t * n) * d
}
