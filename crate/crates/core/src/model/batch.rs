//! Scene batches compacted to their active agent slots, with attention masks.

use std::sync::Arc;

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::numerics::{AttnMask, Tensor};
use crate::scalar::Scalar;

/// Several normalized scenes stacked as `[S, T, n, ·]`, where `n` is the
/// largest number of active agents in any member scene.
///
/// Each compact column `c` of scene `s` maps back to `slots[s * n + c]` of the
/// original `n_max`-wide scene; columns beyond a scene's own agent count are
/// padding and are masked everywhere.
#[derive(Clone, Debug)]
pub struct SceneBatch<T> {
    pub scenes: usize,
    pub agents: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub slots: Vec<usize>,
    pub agent_valid: Vec<bool>,
    /// `[S, T_obs, n]` presence of every observed state.
    pub input_valid: Vec<bool>,
    /// `[S, T_obs, n, 4]`.
    pub inputs: Tensor<T>,
    /// `[S, 1, n, 4]` state at the last observed step.
    pub last_state: Tensor<T>,
    /// `[S, 1, n, 2]`.
    pub last_observed: Tensor<T>,
    /// `[S, T_pred, n, 2]`.
    pub targets: Tensor<T>,
    /// `[S, T_pred, n, 1]`.
    pub target_mask: Tensor<T>,
}

impl<T: Scalar> SceneBatch<T> {
    pub fn new(scenes: &[&Scene], n_max: usize) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::Data("empty scene batch".into()))?;
        let (t_obs, t_pred) = (first.t_obs(), first.t_pred());
        for s in scenes {
            if s.t_obs() != t_obs || s.t_pred() != t_pred || s.n_max() != n_max {
                return Err(Error::shape(
                    "scene_batch",
                    format!("scene [{}, {}, {}] vs model [{t_obs}, {t_pred}, {n_max}]", s.t_obs(), s.t_pred(), s.n_max()),
                ));
            }
        }
        let active: Vec<Vec<usize>> = scenes.iter().map(|s| s.active_slots()).collect();
        let n = active.iter().map(Vec::len).max().unwrap_or(0);
        if n == 0 {
            return Err(Error::Data("scene batch has no active agent".into()));
        }
        let s_count = scenes.len();
        let mut slots = Vec::with_capacity(s_count * n);
        let mut agent_valid = Vec::with_capacity(s_count * n);
        for act in &active {
            let mut unused = (0..n_max).filter(|i| !act.contains(i));
            for c in 0..n {
                match act.get(c) {
                    Some(&slot) => {
                        slots.push(slot);
                        agent_valid.push(true);
                    }
                    None => {
                        slots.push(unused.next().expect("n <= n_max"));
                        agent_valid.push(false);
                    }
                }
            }
        }

        let mut inputs = vec![T::zero(); s_count * t_obs * n * 4];
        let mut input_valid = vec![false; s_count * t_obs * n];
        let mut last_state = vec![T::zero(); s_count * n * 4];
        let mut last_observed = vec![T::zero(); s_count * n * 2];
        let mut targets = vec![T::zero(); s_count * t_pred * n * 2];
        let mut target_mask = vec![T::zero(); s_count * t_pred * n];
        for (si, scene) in scenes.iter().enumerate() {
            for c in 0..n {
                if !agent_valid[si * n + c] {
                    continue;
                }
                let slot = slots[si * n + c];
                for t in 0..t_obs {
                    if scene.input_mask.at(&[t, slot]) > 0.5 {
                        let dst = ((si * t_obs + t) * n + c) * 4;
                        let src = (t * n_max + slot) * 4;
                        for k in 0..4 {
                            inputs[dst + k] = T::lit(scene.inputs.data()[src + k]);
                        }
                        input_valid[(si * t_obs + t) * n + c] = true;
                    }
                }
                let src = ((t_obs - 1) * n_max + slot) * 4;
                for k in 0..4 {
                    last_state[(si * n + c) * 4 + k] = T::lit(scene.inputs.data()[src + k]);
                }
                for k in 0..2 {
                    last_observed[(si * n + c) * 2 + k] = T::lit(scene.last_observed.data()[slot * 2 + k]);
                }
                for t in 0..t_pred {
                    if scene.target_mask.at(&[t, slot]) > 0.5 {
                        let dst = ((si * t_pred + t) * n + c) * 2;
                        let src = (t * n_max + slot) * 2;
                        targets[dst] = T::lit(scene.targets.data()[src]);
                        targets[dst + 1] = T::lit(scene.targets.data()[src + 1]);
                        target_mask[(si * t_pred + t) * n + c] = T::one();
                    }
                }
            }
        }
        Ok(Self {
            scenes: s_count,
            agents: n,
            t_obs,
            t_pred,
            slots,
            agent_valid,
            input_valid,
            inputs: Tensor::new(&[s_count, t_obs, n, 4], inputs)?,
            last_state: Tensor::new(&[s_count, 1, n, 4], last_state)?,
            last_observed: Tensor::new(&[s_count, 1, n, 2], last_observed)?,
            targets: Tensor::new(&[s_count, t_pred, n, 2], targets)?,
            target_mask: Tensor::new(&[s_count, t_pred, n, 1], target_mask)?,
        })
    }

    /// Validity of a `[S, len, n]` grid where every step of an active agent counts.
    fn agent_grid(&self, len: usize) -> Vec<bool> {
        let n = self.agents;
        let mut out = Vec::with_capacity(self.scenes * len * n);
        for s in 0..self.scenes {
            for _ in 0..len {
                out.extend_from_slice(&self.agent_valid[s * n..(s + 1) * n]);
            }
        }
        out
    }

    /// Transposes a `[S, L, n]` grid to `[S, n, L]` (temporal attention batches).
    fn per_agent(&self, grid: &[bool], len: usize) -> Vec<bool> {
        let n = self.agents;
        let mut out = Vec::with_capacity(grid.len());
        for s in 0..self.scenes {
            for c in 0..n {
                for t in 0..len {
                    out.push(grid[(s * len + t) * n + c]);
                }
            }
        }
        out
    }

    /// Observed-sequence masks.
    pub fn encoder_masks(&self) -> Result<EncoderMasks> {
        let n = self.agents;
        let temporal_valid = self.per_agent(&self.input_valid, self.t_obs);
        Ok(EncoderMasks {
            temporal: Arc::new(AttnMask::from_validity(self.scenes * n, &temporal_valid, &temporal_valid)?),
            spatial: Arc::new(AttnMask::from_validity(self.scenes * self.t_obs, &self.input_valid, &self.input_valid)?),
            merged: Arc::new(AttnMask::from_validity(self.scenes, &self.input_valid, &self.input_valid)?),
        })
    }

    /// Decoder masks for `len` future steps; `causal` restricts every step to its prefix.
    pub fn decoder_masks(&self, len: usize, causal: bool) -> Result<DecoderMasks> {
        let n = self.agents;
        let grid = self.agent_grid(len);
        let per_agent = self.per_agent(&grid, len);
        let mut temporal = AttnMask::from_validity(self.scenes * n, &per_agent, &per_agent)?;
        let mut merged = AttnMask::from_validity(self.scenes, &grid, &grid)?;
        if causal {
            temporal = temporal.with_causal();
            merged = merged.restrict(|i, j| j / n <= i / n);
        }
        let memory_valid = self.per_agent(&self.input_valid, self.t_obs);
        Ok(DecoderMasks {
            temporal: Arc::new(temporal),
            spatial: Arc::new(AttnMask::from_validity(self.scenes * len, &grid, &grid)?),
            merged: Arc::new(merged),
            cross: Arc::new(AttnMask::from_validity(self.scenes * n, &per_agent, &memory_valid)?),
        })
    }

    /// Number of valid target entries.
    pub fn target_count(&self) -> usize {
        self.target_mask.data().iter().filter(|&&v| v > T::zero()).count()
    }

    /// Spreads compact `[S, T_pred, n, 2]` predictions back into per-scene
    /// `[T_pred, n_max, 2]` arrays (inactive slots zero).
    pub fn scatter(&self, pred: &Tensor<T>, n_max: usize) -> Result<Vec<Tensor<f64>>> {
        let (s_count, tp, n) = (self.scenes, self.t_pred, self.agents);
        if pred.shape() != [s_count, tp, n, 2] {
            return Err(Error::shape("scatter", format!("{:?} vs [{s_count}, {tp}, {n}, 2]", pred.shape())));
        }
        let mut out = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let mut t_out = Tensor::zeros(&[tp, n_max, 2]);
            for c in 0..n {
                if !self.agent_valid[s * n + c] {
                    continue;
                }
                let slot = self.slots[s * n + c];
                for t in 0..tp {
                    for k in 0..2 {
                        let v = pred.data()[((s * tp + t) * n + c) * 2 + k].to_f64_lossy();
                        t_out.data_mut()[(t * n_max + slot) * 2 + k] = v;
                    }
                }
            }
            out.push(t_out);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderMasks {
    pub temporal: Arc<AttnMask>,
    pub spatial: Arc<AttnMask>,
    pub merged: Arc<AttnMask>,
}

#[derive(Clone, Debug)]
pub struct DecoderMasks {
    pub temporal: Arc<AttnMask>,
    pub spatial: Arc<AttnMask>,
    pub merged: Arc<AttnMask>,
    pub cross: Arc<AttnMask>,
}
