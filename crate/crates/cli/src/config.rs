//! Run configuration: built-in defaults, then a key-value file, then `--set` flags.
//!
//! File format: one `key = value` per line, `#` starts a comment. Keys are
//! dotted paths into [`RunConfig`], e.g. `model.d_model = 64` or
//! `train.max_steps = 500`. Values parse as JSON when possible and as a bare
//! string otherwise, so `model.variant = ts` and `train.clip_norm = null` both work.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use pretr::comma::{CommaConfig, CommaTrainConfig, LayerChoice};
use pretr::data::{DatasetId, NormSource, SceneConfig, SplitConfig};
use pretr::evaluation::Weighting;
use pretr::model::ModelConfig;
use pretr::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSettings {
    pub stride: usize,
    /// `null` means one full window.
    pub test_stride: Option<usize>,
    pub val_fraction: f64,
    pub norm_source: NormSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub weighting: Weighting,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub reps: usize,
    pub agents: usize,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensitySettings {
    pub ps: Vec<f64>,
    pub layers: LayerChoice,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    /// Generate the synthetic corpus instead of reading annotation files.
    pub enabled: bool,
    pub frames: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSettings,
    pub eval: EvalSettings,
    pub bench: BenchSettings,
    pub synthetic: SynthSettings,
    /// `vocab` is fixed by the quantizer at training time.
    pub comma: CommaConfig,
    pub comma_train: CommaTrainConfig,
    pub density: DensitySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitConfig::default();
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSettings {
                stride: split.scene.stride,
                test_stride: None,
                val_fraction: split.val_fraction,
                norm_source: split.norm_source,
            },
            eval: EvalSettings { weighting: Weighting::PerPedestrian, batch: 64 },
            bench: BenchSettings { reps: 30, agents: 5, scenes: 1 },
            synthetic: SynthSettings { enabled: false, frames: None },
            comma: CommaConfig::new(0),
            comma_train: CommaTrainConfig::default(),
            density: DensitySettings { ps: vec![0.1, 0.2, 0.3, 0.4, 0.5], layers: LayerChoice::First, batch: 32 },
        }
    }
}

/// A resolved configuration and the keys that were set explicitly.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

impl Resolved {
    /// Model configuration for one fold; an unset `model.layers` follows the per-fold default.
    pub fn model_for(&self, fold: DatasetId) -> ModelConfig {
        let mut m = self.config.model;
        if !self.explicit.contains("model.layers") {
            m.layers = ModelConfig::for_fold(fold).layers;
        }
        m
    }

    pub fn split(&self) -> SplitConfig {
        let c = &self.config;
        let scene = SceneConfig { t_obs: c.model.t_obs, t_pred: c.model.t_pred, n_max: c.model.n_max, stride: c.split.stride };
        SplitConfig {
            scene,
            test_stride: c.split.test_stride.unwrap_or(scene.t_total()),
            val_fraction: c.split.val_fraction,
            norm_source: c.split.norm_source,
        }
    }
}

/// `key = value` pairs of a config file, with their line numbers.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(String, String)>, UsageError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value(raw: &str, current: &Value) -> Value {
    match serde_json::from_str::<Value>(raw) {
        Ok(v) if !matches!(current, Value::String(_)) || v.is_string() => v,
        _ => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), UsageError> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| UsageError(format!("unknown config key '{key}'")))?;
    }
    if node.is_object() {
        return Err(UsageError(format!("config key '{key}' names a section, not a value")));
    }
    *node = parse_value(raw, node);
    Ok(())
}

/// Applies `pairs` in order on top of `base`.
pub fn apply(base: &RunConfig, pairs: &[(String, String)]) -> Result<Resolved, UsageError> {
    let mut value = serde_json::to_value(base).expect("config serialises");
    let mut explicit = BTreeSet::new();
    for (k, v) in pairs {
        set_path(&mut value, k, v)?;
        explicit.insert(k.clone());
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| UsageError(format!("invalid config value: {e}")))?;
    Ok(Resolved { config, explicit })
}

/// Defaults, then `file`, then `sets` (each `key=value`).
pub fn resolve(file: Option<&PathBuf>, sets: &[String]) -> Result<Resolved, UsageError> {
    let mut pairs = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        pairs.extend(parse_kv(&text, path)?);
    }
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| UsageError(format!("--set expects key=value, got '{s}'")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let resolved = apply(&RunConfig::default(), &pairs)?;
    let c = &resolved.config;
    c.model.validate().map_err(|e| UsageError(e.to_string()))?;
    c.train.validate().map_err(|e| UsageError(e.to_string()))?;
    c.comma_train.validate().map_err(|e| UsageError(e.to_string()))?;
    if !(0.0..1.0).contains(&c.split.val_fraction) {
        return Err(UsageError(format!("split.val_fraction {} outside [0, 1)", c.split.val_fraction)));
    }
    if c.density.ps.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return Err(UsageError("density.ps entries must lie in (0, 1]".into()));
    }
    Ok(resolved)
}
