//! Masked-MSE optimization with warmup Adam, augmentation and early stopping.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::decode_teacher_forced;
use crate::data::{augment_rotate, shuffle_agents, Fold, RotationPolicy, Scene};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_scenes, Weighting};
use crate::model::{save_checkpoint, DecodeMode, Dropout, ModelConfig, Pretr, SceneBatch};
use crate::numerics::{adam_step, AdamConfig, Graph, OptimizerState, Var};
use crate::rng::substream;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    pub shuffle_agents: bool,
    pub rotation: RotationPolicy,
    pub early_stop_patience: usize,
    pub lr_scale: f64,
    pub clip_norm: Option<f64>,
    pub weight_decay: f64,
    /// Autoregressive models only: feed ground truth instead of own outputs.
    pub teacher_forcing: bool,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub eval_batch: usize,
    pub weighting: Weighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            warmup_steps: 2500,
            seed: 0,
            shuffle_agents: true,
            rotation: RotationPolicy::QuarterTurns,
            early_stop_patience: 20,
            lr_scale: 1.0,
            clip_norm: None,
            weight_decay: 0.0,
            teacher_forcing: false,
            max_steps: None,
            eval_batch: 64,
            weighting: Weighting::PerPedestrian,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch_size, max_epochs and eval_batch must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(self.lr_scale > 0.0) || self.weight_decay < 0.0 || self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("lr_scale and clip_norm must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self, d_model: usize) -> AdamConfig {
        AdamConfig {
            lr_scale: self.lr_scale,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            ..AdamConfig::new(d_model, self.warmup_steps)
        }
    }
}

/// Squared Euclidean error summed over coordinates, averaged over valid `(t, n)` pairs.
pub fn masked_mse_loss<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, batch: &SceneBatch<T>) -> Result<Var> {
    let count = batch.target_count();
    if count == 0 {
        return Err(Error::Data("loss over an all-zero target mask".into()));
    }
    let target = g.constant(batch.targets.clone());
    let mask = g.constant(batch.target_mask.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let masked = g.mul(sq, mask)?;
    let total = g.sum(masked)?;
    g.scale(total, T::lit(1.0 / count as f64))
}

/// Predictions under the training-time decoding path.
pub fn training_forward<T: Scalar>(
    model: &Pretr<T>,
    g: &mut Graph<'_, T>,
    batch: &SceneBatch<T>,
    teacher_forcing: bool,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Var> {
    if teacher_forcing && model.config.decode == DecodeMode::Autoregressive {
        let memory = model.encode(g, batch, dropout)?;
        decode_teacher_forced(model, g, memory, batch, dropout)
    } else {
        model.forward(g, batch, dropout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub decoder_forwards: u64,
}

/// Model, optimizer state and the random streams of one training run.
pub struct Trainer<T> {
    pub model: Pretr<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    augment_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Pretr<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(&model.params, config.adam(model.config.d_model))?;
        Ok(Self {
            model,
            optimizer,
            augment_rng: substream(config.seed, "augment"),
            dropout_rng: substream(config.seed, "dropout"),
            config,
        })
    }

    pub fn steps(&self) -> u64 {
        self.optimizer.step_count
    }

    /// Rotation and agent-slot shuffling per the configured policy.
    pub fn augment(&mut self, scene: &Scene) -> Scene {
        let theta = self.config.rotation.sample(&mut self.augment_rng);
        let rotated = augment_rotate(scene, theta);
        if self.config.shuffle_agents {
            shuffle_agents(&rotated, &mut self.augment_rng).0
        } else {
            rotated
        }
    }

    /// One forward, backward and Adam update on `scenes` as given.
    pub fn step(&mut self, scenes: &[&Scene]) -> Result<StepStats> {
        let batch = self.model.batch(scenes)?;
        let p = self.model.config.dropout;
        let (loss, grads, decoder_forwards) = {
            let mut g = Graph::new(&self.model.params);
            let mut dropout = Some(Dropout { p, rng: &mut self.dropout_rng });
            let pred = training_forward(&self.model, &mut g, &batch, self.config.teacher_forcing, &mut dropout)?;
            let loss = masked_mse_loss(&mut g, pred, &batch)?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "loss" });
            }
            (value, g.backward(loss)?, g.counters().decoder_forwards)
        };
        let lr = adam_step(&mut self.model.params, &grads, &mut self.optimizer)?;
        if self.model.params.iter().any(|(_, _, t)| !t.is_finite()) {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        Ok(StepStats { loss, lr, decoder_forwards })
    }
}

/// Mean masked loss over `scenes` without parameter updates.
pub fn evaluate_loss<T: Scalar>(model: &Pretr<T>, scenes: &[Scene], batch_size: usize) -> Result<f64> {
    let (mut weighted, mut count) = (0.0, 0usize);
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let batch = model.batch(&refs)?;
        let n = batch.target_count();
        if n == 0 {
            continue;
        }
        let mut g = Graph::inference(&model.params);
        let pred = model.forward(&mut g, &batch, &mut None)?;
        let loss = masked_mse_loss(&mut g, pred, &batch)?;
        weighted += g.value(loss).data()[0].to_f64_lossy() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Data("no valid targets for loss evaluation".into()));
    }
    Ok(weighted / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ade: f64,
    pub val_fde: f64,
    pub lr: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

pub fn write_log_csv<W: Write>(rows: &[EpochLog], out: W, manifest: Option<&str>) -> Result<()> {
    let mut out = out;
    if let Some(m) = manifest {
        writeln!(out, "# manifest={m}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub struct TrainOutcome<T> {
    /// Parameters of the epoch with the lowest validation ADE.
    pub model: Pretr<T>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Where a training run leaves its artifacts.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutputs<'a> {
    pub dir: &'a Path,
    pub manifest: Option<&'a str>,
}

impl TrainOutputs<'_> {
    fn log(&self, rows: &[EpochLog]) -> Result<()> {
        let path = self.dir.join("train_log.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_log_csv(rows, std::io::BufWriter::new(f), self.manifest)
    }
}

fn checkpoint_meta(fold: &Fold, cfg: &TrainConfig, epoch: usize, val_ade: f64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("fold".to_string(), fold.test_dataset.name().to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("val_ade".to_string(), format!("{val_ade}")),
        ("seed".to_string(), cfg.seed.to_string()),
    ])
}

/// Trains on `fold.train`, selecting the epoch with the best validation ADE.
///
/// With `outputs`, writes `train_log.csv` after every epoch and `best.ckpt`
/// whenever validation ADE improves. On divergence the best parameters so far
/// are saved as `last_good.ckpt` and [`Error::Diverged`] is returned.
pub fn train<T: Scalar>(
    fold: &Fold,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    outputs: Option<TrainOutputs<'_>>,
) -> Result<TrainOutcome<T>> {
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(Error::Data(format!("fold {} needs training and validation scenes", fold.test_dataset)));
    }
    let model = Pretr::<T>::new(model_cfg, cfg.seed)?;
    let mut trainer = Trainer::new(model, *cfg)?;
    let mut order_rng = substream(cfg.seed, "data.shuffle");
    let mut order: Vec<usize> = (0..fold.train.len()).collect();
    let start = Instant::now();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Pretr<T>)> = None;
    let mut since_best = 0usize;

    let diverged = |step: u64, e: Error, best: &Option<(f64, usize, Pretr<T>)>| -> Error {
        if let (Some(out), Some((ade, epoch, m))) = (outputs, best) {
            let _ = save_checkpoint(out.dir.join("last_good.ckpt"), m, checkpoint_meta(fold, cfg, *epoch, *ade));
        }
        Error::Diverged { step: step as usize, msg: e.to_string() }
    };

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
                break;
            }
            let scenes: Vec<Scene> = chunk.iter().map(|&i| trainer.augment(&fold.train[i])).collect();
            let refs: Vec<&Scene> = scenes.iter().collect();
            match trainer.step(&refs) {
                Ok(s) => {
                    loss_sum += s.loss;
                    lr = s.lr;
                    batches += 1;
                }
                Err(e @ (Error::NonFinite { .. } | Error::FullyMasked { .. })) => {
                    return Err(diverged(trainer.steps(), e, &best));
                }
                Err(e) => return Err(e),
            }
        }
        if batches == 0 {
            break;
        }
        let val_loss = evaluate_loss(&trainer.model, &fold.val, cfg.eval_batch);
        let val = evaluate_scenes(&trainer.model, fold.test_dataset, &fold.val, cfg.eval_batch, cfg.weighting);
        let (val_loss, val) = match (val_loss, val) {
            (Ok(l), Ok(v)) => (l, v),
            (Err(e @ Error::NonFinite { .. }), _) | (_, Err(e @ Error::NonFinite { .. })) => {
                return Err(diverged(trainer.steps(), e, &best));
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_ade: val.ade,
            val_fde: val.fde,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|b| val.ade < b.0) {
            if let Some(out) = outputs {
                save_checkpoint(out.dir.join("best.ckpt"), &trainer.model, checkpoint_meta(fold, cfg, epoch, val.ade))?;
            }
            best = Some((val.ade, epoch, trainer.model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(out) = outputs {
            out.log(&log)?;
        }
        if since_best >= cfg.early_stop_patience {
            break 'epochs;
        }
    }
    let steps = trainer.steps();
    let (_, best_epoch, model) = best.ok_or_else(|| Error::Data("training ran zero steps".into()))?;
    Ok(TrainOutcome { model, log, best_epoch, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DecodeMode;
    use crate::numerics::Tensor;
    use crate::test_support::{random_scene, tiny_config};

    fn loss_of(pred: Tensor<f64>, batch: &SceneBatch<f64>) -> f64 {
        let store = crate::numerics::ParamStore::new();
        let mut g = Graph::inference(&store);
        let p = g.constant(pred);
        let l = masked_mse_loss(&mut g, p, batch).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn loss_hand_values() {
        let cfg = tiny_config();
        let mut scene = random_scene(&cfg, 1, 3);
        scene.target_mask.data_mut().fill(0.0);
        scene.targets.data_mut().fill(0.0);
        scene.target_mask.set(&[0, 0], 1.0);
        scene.targets.set(&[0, 0, 0], 0.5);
        scene.targets.set(&[0, 0, 1], 0.25);
        let batch = SceneBatch::<f64>::new(&[&scene], cfg.n_max).unwrap();
        assert_eq!(loss_of(batch.targets.clone(), &batch), 0.0);
        let off = batch.targets.map(|v| v + 1.0);
        assert_eq!(loss_of(off, &batch), 2.0);
    }

    #[test]
    fn all_zero_mask_errors() {
        let cfg = tiny_config();
        let mut scene = random_scene(&cfg, 1, 3);
        scene.target_mask.data_mut().fill(0.0);
        scene.targets.data_mut().fill(0.0);
        let batch = SceneBatch::<f64>::new(&[&scene], cfg.n_max).unwrap();
        let store = crate::numerics::ParamStore::new();
        let mut g = Graph::inference(&store);
        let p = g.constant(batch.targets.clone());
        assert!(masked_mse_loss(&mut g, p, &batch).is_err());
    }

    #[test]
    fn loss_invariant_to_slot_permutation() {
        let cfg = tiny_config();
        let scene = random_scene(&cfg, 3, 3);
        let perm = [3, 1, 0, 2];
        let moved = crate::data::permute_agents(&scene, &perm).unwrap();
        let model = Pretr::<f64>::new(cfg, 1).unwrap();
        let a = evaluate_loss(&model, &[scene], 4).unwrap();
        let b = evaluate_loss(&model, &[moved], 4).unwrap();
        // Compaction follows slot order, so only agent encodings differ; the
        // loss of a fixed prediction is permutation invariant.
        let batch_a = SceneBatch::<f64>::new(&[&random_scene(&cfg, 3, 3)], cfg.n_max).unwrap();
        let off = batch_a.targets.map(|v| v * 0.5);
        let l1 = loss_of(off.clone(), &batch_a);
        let perm_cols = [1usize, 0, 2];
        let mut b2 = batch_a.clone();
        let mut p2 = off.clone();
        for t in 0..cfg.t_pred {
            for (i, &src) in perm_cols.iter().enumerate() {
                for k in 0..2 {
                    b2.targets.set(&[0, t, i, k], batch_a.targets.at(&[0, t, src, k]));
                    p2.set(&[0, t, i, k], off.at(&[0, t, src, k]));
                }
                b2.target_mask.set(&[0, t, i, 0], batch_a.target_mask.at(&[0, t, src, 0]));
            }
        }
        assert!((loss_of(p2, &b2) - l1).abs() < 1e-15);
        assert!(a.is_finite() && b.is_finite());
    }

    #[test]
    fn gradients_reach_queries_encodings_and_embedding() {
        let cfg = tiny_config();
        let model = Pretr::<f64>::new(cfg, 1).unwrap();
        let scene = random_scene(&cfg, 3, 2);
        let batch = model.batch(&[&scene]).unwrap();
        let mut g = Graph::new(&model.params);
        let pred = model.forward(&mut g, &batch, &mut None).unwrap();
        let loss = masked_mse_loss(&mut g, pred, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        let h = &model.handles;
        for id in [h.queries, h.enc_time, h.dec_time, h.agent, h.embed.w] {
            let n: f64 = grads.get(id).data().iter().map(|v| v * v).sum();
            assert!(n > 0.0, "{} has zero gradient", model.params.name(id));
        }
    }

    #[test]
    fn decoder_passes_per_training_step() {
        let cfg = tiny_config();
        let scene = random_scene(&cfg, 2, 2);
        let tc = TrainConfig { shuffle_agents: false, rotation: RotationPolicy::None, ..TrainConfig::default() };
        let mut par = Trainer::new(Pretr::<f64>::new(cfg, 1).unwrap(), tc).unwrap();
        assert_eq!(par.step(&[&scene]).unwrap().decoder_forwards, 1);
        let ar_cfg = ModelConfig { decode: DecodeMode::Autoregressive, ..cfg };
        let mut ar = Trainer::new(Pretr::<f64>::new(ar_cfg, 1).unwrap(), tc).unwrap();
        assert_eq!(ar.step(&[&scene]).unwrap().decoder_forwards, cfg.t_pred as u64);
        let mut tf = Trainer::new(Pretr::<f64>::new(ar_cfg, 1).unwrap(), TrainConfig { teacher_forcing: true, ..tc }).unwrap();
        assert_eq!(tf.step(&[&scene]).unwrap().decoder_forwards, 1);
    }

    #[test]
    fn zero_warmup_rejected() {
        let cfg = TrainConfig { warmup_steps: 0, ..TrainConfig::default() };
        assert!(Trainer::new(Pretr::<f64>::new(tiny_config(), 0).unwrap(), cfg).is_err());
    }
}
