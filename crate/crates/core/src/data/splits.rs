//! Leave-one-out folds over the five benchmark sources.

use serde::{Deserialize, Serialize};

use crate::data::raw::{Dataset, DatasetId};
use crate::data::scene::{build_scenes, normalize, NormParams, Scene, SceneConfig};
use crate::error::{Error, Result};

/// Where min/max normalization constants are measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    /// Training portion of each source (held-out sources use their full extent).
    TrainOnly,
    /// Every annotation of the source.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub scene: SceneConfig,
    /// Window stride for test scenes; defaults to one full window.
    pub test_stride: usize,
    /// Tail fraction of each training source kept for validation.
    pub val_fraction: f64,
    pub norm_source: NormSource,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self { scene, test_stride: scene.t_total(), val_fraction: 0.1, norm_source: NormSource::TrainOnly }
    }
}

/// Train/validation/test scenes of one held-out source, all normalized.
#[derive(Clone, Debug)]
pub struct Fold {
    pub test_dataset: DatasetId,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

fn raw_scenes(dataset: &Dataset, cfg: &SceneConfig) -> Vec<Scene> {
    dataset
        .recordings
        .iter()
        .enumerate()
        .flat_map(|(i, r)| build_scenes(&r.tracks, dataset.id, i, cfg))
        .collect()
}

fn normalize_all(scenes: &[Scene], params: NormParams) -> Result<Vec<Scene>> {
    scenes.iter().map(|s| normalize(s, params)).collect()
}

/// Training and validation scenes of one source, normalized.
pub fn train_val_scenes(dataset: &Dataset, cfg: &SplitConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let raw = raw_scenes(dataset, &cfg.scene);
    if raw.is_empty() {
        return Err(Error::Data(format!("{} yields no scenes", dataset.id)));
    }
    let n_val = ((raw.len() as f64) * cfg.val_fraction).round() as usize;
    let split = raw.len() - n_val.min(raw.len().saturating_sub(1));
    let params = match cfg.norm_source {
        NormSource::TrainOnly => NormParams::from_scenes(&raw[..split])?,
        NormSource::Full => NormParams::from_tracks(dataset.recordings.iter().flat_map(|r| &r.tracks))?,
    };
    Ok((normalize_all(&raw[..split], params)?, normalize_all(&raw[split..], params)?))
}

/// Test scenes of a held-out source, normalized by its own extent.
pub fn test_scenes(dataset: &Dataset, cfg: &SplitConfig) -> Result<Vec<Scene>> {
    let scene_cfg = SceneConfig { stride: cfg.test_stride, ..cfg.scene };
    let raw = raw_scenes(dataset, &scene_cfg);
    if raw.is_empty() {
        return Err(Error::Data(format!("{} yields no test scenes", dataset.id)));
    }
    let params = NormParams::from_tracks(dataset.recordings.iter().flat_map(|r| &r.tracks))?;
    normalize_all(&raw, params)
}

/// Builds the fold that holds out `test`.
pub fn fold(datasets: &[Dataset], test: DatasetId, cfg: &SplitConfig) -> Result<Fold> {
    let held_out = datasets
        .iter()
        .find(|d| d.id == test)
        .ok_or_else(|| Error::Data(format!("dataset {test} not loaded")))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for d in datasets.iter().filter(|d| d.id != test) {
        let (t, v) = train_val_scenes(d, cfg)?;
        train.extend(t);
        val.extend(v);
    }
    if train.is_empty() {
        return Err(Error::Data(format!("fold {test} has no training scenes")));
    }
    Ok(Fold { test_dataset: test, train, val, test: test_scenes(held_out, cfg)? })
}

/// All five folds, in [`DatasetId::ALL`] order.
pub fn leave_one_out_splits(datasets: &[Dataset], cfg: &SplitConfig) -> Result<Vec<Fold>> {
    for id in DatasetId::ALL {
        if !datasets.iter().any(|d| d.id == id) {
            return Err(Error::Data(format!("dataset {id} missing from the corpus")));
        }
    }
    DatasetId::ALL.iter().map(|&id| fold(datasets, id, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::raw::{RawTrack, Recording, TrackPoint};
    use crate::data::synth::generate_corpus;

    /// One pedestrian walking for `frames` frames.
    fn line_dataset(id: DatasetId, frames: i64) -> Dataset {
        let points = (0..frames).map(|f| TrackPoint { frame_id: f * 10, x: f as f64 * 0.5, y: 2.0 + f as f64 * 0.1 }).collect();
        Dataset { id, recordings: vec![Recording { name: id.name().into(), tracks: vec![RawTrack { ped_id: 1, points }] }] }
    }

    #[test]
    fn window_counts_follow_stride() {
        // 39 frames give 20 windows at stride 1 and 1 window at stride 20.
        let d = line_dataset(DatasetId::Eth, 39);
        let cfg = SplitConfig::default();
        let (train, val) = train_val_scenes(&d, &cfg).unwrap();
        assert_eq!((train.len(), val.len()), (18, 2));
        assert_eq!(test_scenes(&d, &cfg).unwrap().len(), 1);
        // val is the tail of the recording
        assert!(train.iter().all(|t| val.iter().all(|v| t.start_frame < v.start_frame)));
    }

    #[test]
    fn held_out_source_never_trains() {
        let corpus = generate_corpus(3, Some(80));
        let folds = leave_one_out_splits(&corpus, &SplitConfig::default()).unwrap();
        assert_eq!(folds.len(), 5);
        for f in &folds {
            assert!(f.train.iter().chain(&f.val).all(|s| s.dataset != f.test_dataset));
            assert!(f.test.iter().all(|s| s.dataset == f.test_dataset));
            for s in f.train.iter().chain(&f.val).chain(&f.test) {
                s.validate().unwrap();
            }
        }
    }

    #[test]
    fn missing_source_is_an_error() {
        let corpus = generate_corpus(3, Some(60));
        assert!(leave_one_out_splits(&corpus[1..], &SplitConfig::default()).is_err());
        assert!(fold(&corpus[1..], DatasetId::Eth, &SplitConfig::default()).is_err());
    }

    #[test]
    fn train_only_norm_spans_training_extent() {
        let d = line_dataset(DatasetId::Hotel, 39);
        let (train, _) = train_val_scenes(&d, &SplitConfig::default()).unwrap();
        let xs: Vec<f64> = train.iter().flat_map(|s| s.valid_positions().map(|p| p.0).collect::<Vec<_>>()).collect();
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }
}
