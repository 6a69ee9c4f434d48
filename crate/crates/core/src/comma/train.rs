use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{decode_archive, encode_archive};
use crate::model::Dropout;
use crate::numerics::{adam_step, AdamConfig, Graph, OptimizerState};
use crate::rng::substream;
use crate::scalar::Scalar;

use super::model::{CommaConfig, StComma};
use super::quantize::Quantizer;
use super::tokens::{mask_scene, TokenBatch, TokenScene};

const MAGIC: &[u8; 8] = b"PRETRCM1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommaTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for CommaTrainConfig {
    fn default() -> Self {
        Self { batch_size: 32, epochs: 50, max_steps: None, warmup_steps: 4000, lr_scale: 1.0, dropout: 0.1, seed: 0 }
    }
}

impl CommaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.warmup_steps == 0 {
            return Err(Error::Config("batch_size, epochs and warmup_steps must be positive".into()));
        }
        if !(self.lr_scale > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lr_scale must be positive and dropout in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommaEpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

pub fn write_comma_log_csv<W: Write>(rows: &[CommaEpochLog], mut out: W, manifest: Option<&str>) -> Result<()> {
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

/// Masked-token training where every batch draws its own rate `p ~ U(0, 1]`.
pub fn train_comma<T: Scalar>(
    model: StComma<T>,
    scenes: &[TokenScene],
    cfg: &CommaTrainConfig,
) -> Result<(StComma<T>, Vec<CommaEpochLog>)> {
    cfg.validate()?;
    let pool: Vec<&TokenScene> = scenes.iter().filter(|s| !s.eligible_steps().is_empty()).collect();
    if pool.is_empty() {
        return Err(Error::Data("no token scene with a present target step".into()));
    }
    let mut model = model;
    let adam = AdamConfig { lr_scale: cfg.lr_scale, ..AdamConfig::new(model.config.d_model, cfg.warmup_steps) };
    let mut opt = OptimizerState::new(&model.params, adam)?;
    let mut order_rng = substream(cfg.seed, "data.shuffle");
    let mut mask_rng = substream(cfg.seed, "masking");
    let mut drop_rng = substream(cfg.seed, "dropout");
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut log = Vec::new();
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut acc_sum, mut batches, mut lr) = (0.0, 0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| opt.step_count >= m) {
                break;
            }
            let p = 1.0 - mask_rng.random::<f64>();
            let masked: Vec<TokenScene> =
                chunk.iter().map(|&i| mask_scene(pool[i], p, &mut mask_rng)).collect::<Result<_>>()?;
            let refs: Vec<&TokenScene> = masked.iter().collect();
            let batch = TokenBatch::new(&refs)?;
            let (loss, acc, grads) = {
                let mut g = Graph::new(&model.params);
                let mut dropout = Some(Dropout { p: cfg.dropout, rng: &mut drop_rng });
                let (loss, acc) = model.loss(&mut g, &batch, &mut dropout)?;
                let value = g.value(loss).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::Diverged { step: opt.step_count as usize, msg: "non-finite token loss".into() });
                }
                (value, acc, g.backward(loss)?)
            };
            lr = adam_step(&mut model.params, &grads, &mut opt)?;
            loss_sum += loss;
            acc_sum += acc;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        log.push(CommaEpochLog {
            epoch,
            steps: opt.step_count,
            loss: loss_sum / batches as f64,
            accuracy: acc_sum / batches as f64,
            lr,
        });
    }
    Ok((model, log))
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: CommaConfig,
    quantizer: Quantizer,
    dtype: String,
}

/// Token model plus the quantizer that defines its vocabulary.
#[derive(Clone, Debug)]
pub struct CommaCheckpoint<T> {
    pub model: StComma<T>,
    pub quantizer: Quantizer,
}

impl<T: Scalar> CommaCheckpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header { config: self.model.config, quantizer: self.quantizer.clone(), dtype: T::DTYPE.into() };
        encode_archive(MAGIC, &header, &self.model.params.cast())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params): (Header, _) = decode_archive(MAGIC, bytes)?;
        if header.quantizer.vocab_size() != header.config.vocab {
            return Err(Error::Checkpoint(format!(
                "quantizer vocabulary {} differs from model vocabulary {}",
                header.quantizer.vocab_size(),
                header.config.vocab
            )));
        }
        Ok(Self { model: StComma::from_params(header.config, params.cast())?, quantizer: header.quantizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
