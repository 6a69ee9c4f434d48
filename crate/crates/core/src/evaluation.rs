//! Displacement metrics in meters, per-dataset reports and the attention-variant ablation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{denormalize, DatasetId, Fold, Scene};
use crate::error::{Error, Result};
use crate::model::{AttnVariant, Checkpoint, ModelConfig, Pretr};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Build identifier recorded in reports.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), option_env!("PRETR_GIT_HASH").unwrap_or("unknown"))
}

fn check_shapes(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &Tensor<f64>) -> Result<(usize, usize)> {
    let s = target.shape();
    if pred.shape() != s || s.len() != 3 || s[2] != 2 || mask.shape() != &s[..2] {
        return Err(Error::shape(
            "metrics",
            format!("pred {:?}, target {:?}, mask {:?}", pred.shape(), s, mask.shape()),
        ));
    }
    Ok((s[0], s[1]))
}

fn dist(pred: &Tensor<f64>, target: &Tensor<f64>, i: usize) -> f64 {
    let (p, q) = (&pred.data()[i * 2..i * 2 + 2], &target.data()[i * 2..i * 2 + 2]);
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Mean Euclidean error over the valid `(t, n)` entries of `[T, N, 2]` arrays.
pub fn ade(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &m) in mask.data().iter().enumerate() {
        if m > 0.0 {
            sum += dist(pred, target, i);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("ade over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Mean over agents of the error at each agent's last valid step.
pub fn fde(pred: &Tensor<f64>, target: &Tensor<f64>, mask: &Tensor<f64>) -> Result<f64> {
    let (t_len, n) = check_shapes(pred, target, mask)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for a in 0..n {
        if let Some(t) = (0..t_len).rev().find(|&t| mask.data()[t * n + a] > 0.0) {
            sum += dist(pred, target, t * n + a);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("fde with no agent holding a valid target".into()));
    }
    Ok(sum / count as f64)
}

/// Agents of a scene that have at least one valid target step.
pub fn scored_agents(mask: &Tensor<f64>) -> usize {
    let n = mask.shape()[1];
    (0..n).filter(|&a| mask.data().iter().skip(a).step_by(n).any(|&m| m > 0.0)).count()
}

/// How per-scene metrics are pooled within a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Scenes weighted by their scored agent count.
    PerPedestrian,
    PerScene,
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::PerPedestrian => "per_pedestrian",
            Weighting::PerScene => "per_scene",
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "per_pedestrian" | "pedestrian" => Ok(Self::PerPedestrian),
            "per_scene" | "scene" => Ok(Self::PerScene),
            other => Err(Error::Config(format!("unknown weighting '{other}'"))),
        }
    }
}

/// Pooled metrics of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: DatasetId,
    pub ade: f64,
    pub fde: f64,
    pub scenes: usize,
    pub agents: usize,
}

/// Predicts `scenes` in batches of `batch_size`; normalized `[T_pred, n_max, 2]` per scene.
pub fn predict_scenes<T: Scalar>(model: &Pretr<T>, scenes: &[Scene], batch_size: usize) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        out.extend(model.predict(&refs)?);
    }
    Ok(out)
}

/// Scene metrics in meters from a normalized prediction.
pub fn scene_metrics(pred: &Tensor<f64>, scene: &Scene) -> Result<(f64, f64, usize)> {
    let norm = scene.norm.as_ref().ok_or_else(|| Error::Data("scene must be normalized before scoring".into()))?;
    let p = denormalize(pred, norm);
    let t = denormalize(&scene.targets, norm);
    Ok((ade(&p, &t, &scene.target_mask)?, fde(&p, &t, &scene.target_mask)?, scored_agents(&scene.target_mask)))
}

/// Pools scene metrics of `predictions` against `scenes`.
pub fn pool_metrics(
    dataset: DatasetId,
    scenes: &[Scene],
    predictions: &[Tensor<f64>],
    weighting: Weighting,
) -> Result<DatasetMetrics> {
    let (mut a_sum, mut f_sum, mut w_sum, mut agents, mut used) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for (scene, pred) in scenes.iter().zip(predictions) {
        if scored_agents(&scene.target_mask) == 0 {
            continue;
        }
        let (a, f, n) = scene_metrics(pred, scene)?;
        let w = match weighting {
            Weighting::PerPedestrian => n as f64,
            Weighting::PerScene => 1.0,
        };
        a_sum += w * a;
        f_sum += w * f;
        w_sum += w;
        agents += n;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data(format!("no scorable scene for {dataset}")));
    }
    Ok(DatasetMetrics { dataset, ade: a_sum / w_sum, fde: f_sum / w_sum, scenes: used, agents })
}

pub fn evaluate_scenes<T: Scalar>(
    model: &Pretr<T>,
    dataset: DatasetId,
    scenes: &[Scene],
    batch_size: usize,
    weighting: Weighting,
) -> Result<DatasetMetrics> {
    let preds = predict_scenes(model, scenes, batch_size)?;
    pool_metrics(dataset, scenes, &preds, weighting)
}

/// Scores a checkpoint on the held-out set of `fold`.
pub fn evaluate_fold(checkpoint: &Checkpoint, fold: &Fold, weighting: Weighting) -> Result<DatasetMetrics> {
    let first = fold.test.first().ok_or_else(|| Error::Data(format!("fold {} has no test scene", fold.test_dataset)))?;
    let cfg = &checkpoint.config;
    if first.t_obs() != cfg.t_obs || first.t_pred() != cfg.t_pred || first.n_max() != cfg.n_max {
        return Err(Error::Config(format!(
            "checkpoint expects [{}, {}, {}] scenes, fold has [{}, {}, {}]",
            cfg.t_obs,
            cfg.t_pred,
            cfg.n_max,
            first.t_obs(),
            first.t_pred(),
            first.n_max()
        )));
    }
    if let Some(f) = checkpoint.metadata.get("fold") {
        if f != fold.test_dataset.name() {
            return Err(Error::Config(format!("checkpoint trained for fold {f}, evaluating fold {}", fold.test_dataset)));
        }
    }
    let model: Pretr<f64> = checkpoint.clone().into_model()?;
    evaluate_scenes(&model, fold.test_dataset, &fold.test, 64, weighting)
}

/// Per-dataset metrics plus the unweighted cross-dataset average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub fingerprint: String,
    pub build: String,
    pub weighting: Weighting,
    pub rows: Vec<DatasetMetrics>,
    pub average_ade: f64,
    pub average_fde: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    dataset: String,
    ade: f64,
    fde: f64,
    scenes: usize,
    agents: usize,
}

impl MetricsReport {
    pub fn new(label: &str, config: &ModelConfig, weighting: Weighting, rows: Vec<DatasetMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("metrics report without rows".into()));
        }
        let k = rows.len() as f64;
        let average_ade = rows.iter().map(|r| r.ade).sum::<f64>() / k;
        let average_fde = rows.iter().map(|r| r.fde).sum::<f64>() / k;
        Ok(Self {
            label: label.to_string(),
            fingerprint: config.fingerprint(),
            build: build_id(),
            weighting,
            rows,
            average_ade,
            average_fde,
        })
    }

    /// CSV with one row per dataset and a final `average` row.
    pub fn write_csv<W: Write>(&self, out: W, manifest: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(m) = manifest {
            writeln!(out, "# manifest={m}").map_err(|e| Error::io("<csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvRow { dataset: r.dataset.name().into(), ade: r.ade, fde: r.fde, scenes: r.scenes, agents: r.agents })?;
        }
        w.serialize(CsvRow {
            dataset: "average".into(),
            ade: self.average_ade,
            fde: self.average_fde,
            scenes: self.rows.iter().map(|r| r.scenes).sum(),
            agents: self.rows.iter().map(|r| r.agents).sum(),
        })?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Parses the dataset rows of a CSV written by [`MetricsReport::write_csv`].
    pub fn read_csv_rows(text: &str) -> Result<(Vec<DatasetMetrics>, f64, f64)> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        let mut avg = None;
        for rec in r.deserialize::<CsvRow>() {
            let rec = rec?;
            if rec.dataset == "average" {
                avg = Some((rec.ade, rec.fde));
            } else {
                rows.push(DatasetMetrics {
                    dataset: rec.dataset.parse()?,
                    ade: rec.ade,
                    fde: rec.fde,
                    scenes: rec.scenes,
                    agents: rec.agents,
                });
            }
        }
        let (a, f) = avg.ok_or_else(|| Error::Data("metrics CSV lacks an average row".into()))?;
        Ok((rows, a, f))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, manifest: Option<&str>) -> Result<()> {
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f), manifest)?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }
}

/// Variant × dataset results of the attention-order ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub entries: Vec<(AttnVariant, MetricsReport)>,
}

#[derive(Serialize, Deserialize)]
struct AblationRow {
    variant: String,
    dataset: String,
    ade: f64,
    fde: f64,
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, out: W, manifest: Option<&str>) -> Result<()> {
        let mut out = out;
        if let Some(m) = manifest {
            writeln!(out, "# manifest={m}").map_err(|e| Error::io("<csv>", e))?;
        }
        let mut w = csv::Writer::from_writer(out);
        for (variant, report) in &self.entries {
            for r in &report.rows {
                w.serialize(AblationRow { variant: variant.name().into(), dataset: r.dataset.name().into(), ade: r.ade, fde: r.fde })?;
            }
            w.serialize(AblationRow {
                variant: variant.name().into(),
                dataset: "average".into(),
                ade: report.average_ade,
                fde: report.average_fde,
            })?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// `(variant, dataset, ade, fde)` rows from a CSV written by [`AblationTable::write_csv`].
    pub fn read_csv(text: &str) -> Result<Vec<(AttnVariant, String, f64, f64)>> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        r.deserialize::<AblationRow>()
            .map(|rec| {
                let rec = rec?;
                Ok((rec.variant.parse()?, rec.dataset, rec.ade, rec.fde))
            })
            .collect()
    }
}

/// Trains and scores every variant on every fold with otherwise identical settings.
pub fn run_ablation(
    folds: &[Fold],
    variants: &[AttnVariant],
    base: &ModelConfig,
    train_cfg: &crate::training::TrainConfig,
    weighting: Weighting,
) -> Result<AblationTable> {
    let mut entries = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut rows = Vec::with_capacity(folds.len());
        for fold in folds {
            let cfg = ModelConfig { variant, layers: ModelConfig::for_fold(fold.test_dataset).layers.max(base.layers), ..*base };
            let outcome = crate::training::train::<f32>(fold, cfg, train_cfg, None)?;
            rows.push(evaluate_scenes(&outcome.model, fold.test_dataset, &fold.test, 64, weighting)?);
        }
        entries.push((variant, MetricsReport::new(&format!("ablation_{variant}"), base, weighting, rows)?));
    }
    Ok(AblationTable { entries })
}
