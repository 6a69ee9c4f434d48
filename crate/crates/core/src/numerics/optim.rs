//! Adam with the inverse-square-root warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{Gradients, ParamStore};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Model width entering the `d^-0.5` factor of the schedule.
    pub d_model: usize,
    /// Multiplier on the scheduled rate.
    pub lr_scale: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn new(d_model: usize, warmup_steps: u64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps,
            d_model,
            lr_scale: 1.0,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }

    pub fn learning_rate(&self, step: u64) -> f64 {
        warmup_learning_rate(self.d_model, self.warmup_steps, step) * self.lr_scale
    }
}

/// `d^-0.5 · min(s^-0.5, s · w^-1.5)`; zero at step 0.
pub fn warmup_learning_rate(d_model: usize, warmup_steps: u64, step: u64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let s = step as f64;
    let w = warmup_steps.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Per-parameter moment estimates and the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Result<Self> {
        if config.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Self { config, step_count: 0, first_moment: zeros.clone(), second_moment: zeros })
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate(self.step_count)
    }
}

/// Applies one Adam update in place and returns the learning rate used.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<f64> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::shape("adam_step", "parameter, gradient and moment counts differ"));
    }
    for id in params.ids() {
        let p = params.get(id).shape();
        if grads.get(id).shape() != p || state.first_moment[id.index()].shape() != p {
            return Err(Error::shape("adam_step", format!("parameter {}", params.name(id))));
        }
    }
    let cfg = state.config;
    let clip = match cfg.clip_norm {
        Some(max) => {
            let norm = grads.global_norm().to_f64_lossy();
            if norm > max && norm > 0.0 { max / norm } else { 1.0 }
        }
        None => 1.0,
    };

    state.step_count += 1;
    let step = state.step_count;
    let lr = cfg.learning_rate(step);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bias1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let bias2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let (lr_t, eps, clip, decay) = (T::lit(lr), T::lit(cfg.eps), T::lit(clip), T::lit(cfg.weight_decay));
    let one = T::one();

    for id in params.ids() {
        let g = grads.get(id).data();
        let m = state.first_moment[id.index()].data_mut();
        let v = state.second_moment[id.index()].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            let gi = g[i] * clip + decay * p[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            p[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_f64(&[1], &[value]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = one_param(0.7);
        let grads = Gradients::zeros_like(&s);
        let mut st = OptimizerState::new(&s, AdamConfig::new(16, 10)).unwrap();
        for _ in 0..5 {
            adam_step(&mut s, &grads, &mut st).unwrap();
        }
        assert_eq!(s.by_name("x").unwrap().data(), &[0.7]);
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let (d, w) = (256, 2500);
        let peak = warmup_learning_rate(d, w, w);
        for s in 1..w {
            assert!(warmup_learning_rate(d, w, s) < warmup_learning_rate(d, w, s + 1));
        }
        for s in w..w + 3000 {
            assert!(warmup_learning_rate(d, w, s) >= warmup_learning_rate(d, w, s + 1));
            assert!(warmup_learning_rate(d, w, s + 1) > 0.0);
        }
        assert!((peak - (256f64).powf(-0.5) * (2500f64).powf(-0.5)).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_arithmetic() {
        let mut s = one_param(1.0);
        let mut grads = Gradients::zeros_like(&s);
        grads.get_mut(s.id("x").unwrap()).data_mut()[0] = 1.0;
        let cfg = AdamConfig::new(4, 2);
        let mut st = OptimizerState::new(&s, cfg).unwrap();
        adam_step(&mut s, &grads, &mut st).unwrap();
        adam_step(&mut s, &grads, &mut st).unwrap();

        // Hand computation with g = 1 at both steps.
        let lr1 = 0.5 * f64::min(1.0, 1.0 * 2f64.powf(-1.5));
        let lr2 = 0.5 * f64::min(2f64.powf(-0.5), 2.0 * 2f64.powf(-1.5));
        let (m1, v1) = (0.1, 0.02);
        let x1 = 1.0 - lr1 * (m1 / 0.1) / ((v1 / 0.02f64).sqrt() + 1e-9);
        let (m2, v2) = (0.9 * m1 + 0.1, 0.98 * v1 + 0.02);
        let (c1, c2) = (1.0 - 0.81, 1.0 - 0.98f64 * 0.98);
        let x2 = x1 - lr2 * (m2 / c1) / ((v2 / c2).sqrt() + 1e-9);
        assert!((s.by_name("x").unwrap().data()[0] - x2).abs() < 1e-14);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut s = one_param(1.0);
        let other = {
            let mut o = ParamStore::new();
            o.insert("x", Tensor::<f64>::zeros(&[2])).unwrap();
            o
        };
        let grads = Gradients::zeros_like(&other);
        let mut st = OptimizerState::new(&s, AdamConfig::new(4, 2)).unwrap();
        assert!(adam_step(&mut s, &grads, &mut st).is_err());
    }
}
