use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::numerics::AttnMask;

use super::quantize::{scene_positions, Quantizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskFlag {
    Source,
    TargetVisible,
    TargetMasked,
}

/// A tokenized scene laid out `[T_obs + T_pred] × n_max`, row-major by step.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenScene {
    pub t_obs: usize,
    pub t_pred: usize,
    pub n_max: usize,
    pub tokens: Vec<usize>,
    pub present: Vec<bool>,
    /// Step-level flag, identical for every slot of a step.
    pub flags: Vec<MaskFlag>,
    /// Original token of every masked present entry.
    pub labels: Vec<Option<usize>>,
    pub mask_token: usize,
    pub pad_token: usize,
}

impl TokenScene {
    pub fn from_scene(scene: &Scene, q: &Quantizer) -> Self {
        let grid = scene_positions(scene);
        let (t_obs, t_pred, n_max) = (scene.t_obs(), scene.t_pred(), scene.n_max());
        let total = t_obs + t_pred;
        let mut tokens = Vec::with_capacity(total * n_max);
        let mut present = Vec::with_capacity(total * n_max);
        for row in &grid {
            for p in row {
                present.push(p.is_some());
                tokens.push(p.map_or(q.pad_token(), |(x, y)| q.quantize_point(x, y)));
            }
        }
        let flags = (0..total)
            .flat_map(|t| std::iter::repeat_n(if t < t_obs { MaskFlag::Source } else { MaskFlag::TargetVisible }, n_max))
            .collect();
        Self {
            t_obs,
            t_pred,
            n_max,
            tokens,
            present,
            flags,
            labels: vec![None; total * n_max],
            mask_token: q.mask_token(),
            pad_token: q.pad_token(),
        }
    }

    pub fn t_total(&self) -> usize {
        self.t_obs + self.t_pred
    }

    pub fn step_present(&self, t: usize) -> bool {
        self.present[t * self.n_max..(t + 1) * self.n_max].iter().any(|&p| p)
    }

    /// Target steps holding at least one present agent.
    pub fn eligible_steps(&self) -> Vec<usize> {
        (self.t_obs..self.t_total()).filter(|&t| self.step_present(t)).collect()
    }

    pub fn masked_steps(&self) -> Vec<usize> {
        (self.t_obs..self.t_total()).filter(|&t| self.flags[t * self.n_max] == MaskFlag::TargetMasked).collect()
    }

    /// Slots present at any step.
    pub fn agents(&self) -> Vec<usize> {
        (0..self.n_max).filter(|&a| (0..self.t_total()).any(|t| self.present[t * self.n_max + a])).collect()
    }

    /// Masks `steps` for every present agent.
    pub fn with_masked_steps(&self, steps: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for &t in steps {
            if t < self.t_obs || t >= self.t_total() {
                return Err(Error::Config(format!("step {t} is not a target step")));
            }
            for a in 0..self.n_max {
                let i = t * self.n_max + a;
                out.flags[i] = MaskFlag::TargetMasked;
                if self.present[i] {
                    out.labels[i] = Some(self.tokens[i]);
                    out.tokens[i] = self.mask_token;
                }
            }
        }
        Ok(out)
    }
}

/// Masks each eligible target step with probability `p`, conditioned on at
/// least one masked step.
///
/// The conditioning is sampled directly (first masked step from the truncated
/// geometric law, later steps independently), which is equivalent to
/// redrawing until something is masked but terminates for any `p`.
pub fn mask_scene<R: Rng>(scene: &TokenScene, p: f64, rng: &mut R) -> Result<TokenScene> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("masking probability {p} outside (0, 1]")));
    }
    let eligible = scene.eligible_steps();
    if eligible.is_empty() {
        return Err(Error::Data("scene has no target step to mask".into()));
    }
    let k = eligible.len();
    // P(first = i | at least one) = p (1-p)^i / (1 - (1-p)^k).
    let log_q = (-p).ln_1p();
    let none = (k as f64 * log_q).exp();
    let u: f64 = rng.random();
    let first = if p >= 1.0 {
        0
    } else {
        let target = u * (1.0 - none);
        // Smallest i with 1 - (1-p)^(i+1) >= target.
        let i = ((1.0 - target).ln() / log_q).ceil() as isize - 1;
        i.clamp(0, k as isize - 1) as usize
    };
    let mut steps = vec![eligible[first]];
    for &t in &eligible[first + 1..] {
        if rng.random::<f64>() < p {
            steps.push(t);
        }
    }
    scene.with_masked_steps(&steps)
}

/// Token scenes stacked as `[S, T, n]` over the slots present in each scene.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub scenes: usize,
    pub agents: usize,
    pub t_obs: usize,
    pub t_total: usize,
    pub slots: Vec<usize>,
    pub tokens: Vec<usize>,
    pub present: Vec<bool>,
    pub labels: Vec<Option<usize>>,
}

impl TokenBatch {
    pub fn new(scenes: &[&TokenScene]) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::Data("empty token batch".into()))?;
        let (t_obs, t_total, n_max) = (first.t_obs, first.t_total(), first.n_max);
        if scenes.iter().any(|s| s.t_obs != t_obs || s.t_total() != t_total || s.n_max != n_max) {
            return Err(Error::shape("token_batch", "scenes disagree on geometry"));
        }
        let per: Vec<Vec<usize>> = scenes.iter().map(|s| s.agents()).collect();
        let n = per.iter().map(Vec::len).max().unwrap_or(0);
        if n == 0 {
            return Err(Error::Data("token batch without agents".into()));
        }
        let s_count = scenes.len();
        let mut slots = Vec::with_capacity(s_count * n);
        let mut tokens = Vec::with_capacity(s_count * t_total * n);
        let mut present = Vec::with_capacity(s_count * t_total * n);
        let mut labels = Vec::with_capacity(s_count * t_total * n);
        for (scene, act) in scenes.iter().zip(&per) {
            let mut unused = (0..n_max).filter(|i| !act.contains(i));
            let cols: Vec<Option<usize>> = (0..n).map(|c| act.get(c).copied()).collect();
            for c in &cols {
                slots.push(c.unwrap_or_else(|| unused.next().expect("n <= n_max")));
            }
            for t in 0..t_total {
                for c in &cols {
                    match c {
                        Some(a) => {
                            let i = t * n_max + a;
                            tokens.push(scene.tokens[i]);
                            present.push(scene.present[i]);
                            labels.push(scene.labels[i]);
                        }
                        None => {
                            tokens.push(scene.pad_token);
                            present.push(false);
                            labels.push(None);
                        }
                    }
                }
            }
        }
        Ok(Self { scenes: s_count, agents: n, t_obs, t_total, slots, tokens, present, labels })
    }

    /// Temporal mask: source rows see present source steps, target rows see every present step.
    pub fn temporal_mask(&self) -> Result<Arc<AttnMask>> {
        let (n, t_len) = (self.agents, self.t_total);
        let mut valid = Vec::with_capacity(self.present.len());
        for s in 0..self.scenes {
            for c in 0..n {
                for t in 0..t_len {
                    valid.push(self.present[(s * t_len + t) * n + c]);
                }
            }
        }
        let t_obs = self.t_obs;
        let mask = AttnMask::from_validity(self.scenes * n, &valid, &valid)?.restrict(|i, j| i >= t_obs || j < t_obs);
        Ok(Arc::new(mask))
    }

    pub fn spatial_mask(&self) -> Result<Arc<AttnMask>> {
        Ok(Arc::new(AttnMask::from_validity(self.scenes * self.t_total, &self.present, &self.present)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth::random_scene, SceneConfig};
    use crate::rng::substream;

    fn token_scene() -> TokenScene {
        let cfg = SceneConfig { t_obs: 4, t_pred: 6, n_max: 4, stride: 1 };
        let scene = random_scene(&cfg, 3, 1);
        let q = Quantizer::fit(std::slice::from_ref(&scene)).unwrap();
        TokenScene::from_scene(&scene, &q)
    }

    #[test]
    fn p_one_masks_every_target_step() {
        let ts = token_scene();
        let m = mask_scene(&ts, 1.0, &mut substream(0, "t")).unwrap();
        assert_eq!(m.masked_steps(), ts.eligible_steps());
        for t in m.masked_steps() {
            for a in 0..ts.n_max {
                let i = t * ts.n_max + a;
                assert_eq!(m.tokens[i], if ts.present[i] { ts.mask_token } else { ts.pad_token });
            }
        }
    }

    #[test]
    fn tiny_p_masks_exactly_one_step() {
        let ts = token_scene();
        let mut rng = substream(1, "t");
        for _ in 0..200 {
            assert_eq!(mask_scene(&ts, 1e-12, &mut rng).unwrap().masked_steps().len(), 1);
        }
    }

    #[test]
    fn masked_fraction_matches_conditional_rate() {
        let cfg = SceneConfig { t_obs: 8, t_pred: 12, n_max: 4, stride: 1 };
        let scene = random_scene(&cfg, 3, 1);
        let q = Quantizer::fit(std::slice::from_ref(&scene)).unwrap();
        let ts = TokenScene::from_scene(&scene, &q);
        let k = ts.eligible_steps().len() as f64;
        let mut rng = substream(2, "t");
        let draws = 10_000;
        let masked: usize = (0..draws).map(|_| mask_scene(&ts, 0.3, &mut rng).unwrap().masked_steps().len()).sum();
        let frac = masked as f64 / (draws as f64 * k);
        // Conditioning on a non-empty mask lifts the rate to p / (1 - (1-p)^k).
        let expect = 0.3 / (1.0 - 0.7f64.powf(k));
        assert!((frac - expect).abs() < 0.01, "{frac} vs {expect}");
        assert!((frac - 0.3).abs() < 0.02, "{frac}");
    }

    #[test]
    fn invalid_p_rejected() {
        let ts = token_scene();
        let mut rng = substream(0, "t");
        assert!(mask_scene(&ts, 0.0, &mut rng).is_err());
        assert!(mask_scene(&ts, 1.5, &mut rng).is_err());
    }

    #[test]
    fn source_rows_never_see_targets() {
        let ts = token_scene();
        let b = TokenBatch::new(&[&ts]).unwrap();
        let m = b.temporal_mask().unwrap();
        for bi in 0..m.batch() {
            for i in 0..ts.t_obs {
                for j in ts.t_obs..ts.t_total() {
                    assert!(!m.keeps(bi, i, j));
                }
            }
        }
    }
}
