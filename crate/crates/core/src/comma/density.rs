use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::rng::substream;
use crate::scalar::Scalar;

use super::model::StComma;
use super::tokens::{mask_scene, TokenBatch, TokenScene};

/// Share of a row's per-segment mean attention that falls on the target segment.
///
/// `row` holds one query's weights over `t_obs + t_pred` keys, source first.
pub fn alpha(row: &[f64], t_obs: usize, t_pred: usize) -> f64 {
    let src = row[..t_obs].iter().sum::<f64>() / t_obs as f64;
    let tgt = row[t_obs..t_obs + t_pred].iter().sum::<f64>() / t_pred as f64;
    if src + tgt == 0.0 {
        0.0
    } else {
        tgt / (src + tgt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlphaStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

impl AlphaStats {
    fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub p: f64,
    pub r: f64,
    /// Masked steps contributing to `r`.
    pub n_tokens: usize,
    pub scenes: usize,
    /// Statistics of the per-scene mean α.
    pub scene_alpha: AlphaStats,
}

/// Which temporal attention maps enter α.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerChoice {
    #[default]
    First,
    /// Head-averaged maps are further averaged over layers.
    All,
}

/// Head- and layer-averaged temporal rows, `[S·n][T][T]` flattened.
fn averaged_rows<T: Scalar>(g: &Graph<'_, T>, nodes: &[crate::numerics::Var]) -> Result<(usize, usize, Vec<f64>)> {
    let mut acc: Vec<f64> = Vec::new();
    let (mut batch, mut len) = (0, 0);
    for &node in nodes {
        let (geo, w) = g.attention_weights(node).ok_or_else(|| Error::shape("density", "not an attention node"))?;
        let (b, h, lq, lk) = (geo.batch(), geo.heads, geo.lq, geo.lk);
        if acc.is_empty() {
            acc = vec![0.0; b * lq * lk];
            (batch, len) = (b, lq);
        }
        let scale = 1.0 / (h * nodes.len()) as f64;
        for bi in 0..b {
            for hi in 0..h {
                let src = &w[(bi * h + hi) * lq * lk..(bi * h + hi + 1) * lq * lk];
                let dst = &mut acc[bi * lq * lk..(bi + 1) * lq * lk];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s.to_f64_lossy() * scale;
                }
            }
        }
    }
    Ok((batch, len, acc))
}

/// α of every masked step, one list per scene in `chunk` order.
fn batch_alphas<T: Scalar>(model: &StComma<T>, chunk: &[&TokenScene], layers: LayerChoice) -> Result<Vec<Vec<f64>>> {
    let batch = TokenBatch::new(chunk)?;
    let mut g = Graph::inference(&model.params);
    let out = model.forward(&mut g, &batch, &mut None)?;
    let nodes = match layers {
        LayerChoice::First => &out.temporal_attention[..1],
        LayerChoice::All => &out.temporal_attention[..],
    };
    let (_, t_len, rows) = averaged_rows(&g, nodes)?;
    let (n, t_obs, t_pred) = (batch.agents, batch.t_obs, t_len - batch.t_obs);
    let mut per_scene = Vec::with_capacity(chunk.len());
    for (s, scene) in chunk.iter().enumerate() {
        let mut alphas = Vec::new();
        for t in scene.masked_steps() {
            let mut sum = 0.0;
            let mut count = 0usize;
            for c in 0..n {
                if !batch.present[(s * t_len + t) * n + c] {
                    continue;
                }
                let off = ((s * n + c) * t_len + t) * t_len;
                sum += alpha(&rows[off..off + t_len], t_obs, t_pred);
                count += 1;
            }
            if count > 0 {
                alphas.push(sum / count as f64);
            }
        }
        per_scene.push(alphas);
    }
    Ok(per_scene)
}

/// Masks every scene at rate `p` and pools α over all masked steps.
///
/// Masking draws come from the `"density"` substream of `seed`, so a fixed
/// seed evaluates the same masked steps at every call.
pub fn attention_density_ratio<T: Scalar>(
    model: &StComma<T>,
    scenes: &[TokenScene],
    p: f64,
    seed: u64,
    layers: LayerChoice,
    batch_size: usize,
) -> Result<DensityReport> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("masking probability {p} outside (0, 1]")));
    }
    let mut rng = substream(seed, "density");
    let masked: Vec<TokenScene> = scenes
        .iter()
        .filter(|s| !s.eligible_steps().is_empty())
        .map(|s| mask_scene(s, p, &mut rng))
        .collect::<Result<_>>()?;
    density_of_masked(model, &masked, p, layers, batch_size)
}

/// Pools α over scenes that already carry their masked steps.
pub fn density_of_masked<T: Scalar>(
    model: &StComma<T>,
    masked: &[TokenScene],
    p: f64,
    layers: LayerChoice,
    batch_size: usize,
) -> Result<DensityReport> {
    if masked.is_empty() {
        return Err(Error::Data("no scene with a present target step".into()));
    }
    let (mut total, mut n_tokens) = (0.0, 0usize);
    let mut scene_means = Vec::with_capacity(masked.len());
    for chunk in masked.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenScene> = chunk.iter().collect();
        for alphas in batch_alphas(model, &refs, layers)? {
            if alphas.is_empty() {
                continue;
            }
            total += alphas.iter().sum::<f64>();
            n_tokens += alphas.len();
            scene_means.push(alphas.iter().sum::<f64>() / alphas.len() as f64);
        }
    }
    if n_tokens == 0 {
        return Err(Error::Data("no masked token with a present agent".into()));
    }
    Ok(DensityReport {
        p,
        r: total / n_tokens as f64,
        n_tokens,
        scenes: scene_means.len(),
        scene_alpha: AlphaStats::of(&scene_means),
    })
}

pub fn write_density_csv<W: Write>(reports: &[DensityReport], out: W, manifest: Option<&str>) -> Result<()> {
    let mut out = out;
    if let Some(m) = manifest {
        writeln!(out, "# manifest={m}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["p", "R", "n_tokens"])?;
    for r in reports {
        w.write_record([format!("{:.2}", r.p), format!("{:.6}", r.r), r.n_tokens.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Published density-ratio curves for trajectory, speech-synthesis,
/// translation and speech-recognition tasks at p = 0.1 .. 0.5.
pub const REFERENCE_CURVES: [(&str, [f64; 5]); 4] = [
    ("trajectory", [0.4335, 0.4326, 0.4317, 0.4306, 0.4277]),
    ("tts", [0.48, 0.475, 0.471, 0.47, 0.465]),
    ("nmt", [0.64, 0.62, 0.608, 0.595, 0.591]),
    ("asr", [0.68, 0.675, 0.672, 0.671, 0.669]),
];

pub const REFERENCE_P: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

pub fn write_reference_csv<W: Write>(mut out: W) -> Result<()> {
    writeln!(out, "# published reference values read from the original density-ratio plot; not recomputed")
        .map_err(|e| Error::io("<csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["task", "p", "R"])?;
    for (task, values) in REFERENCE_CURVES {
        for (p, r) in REFERENCE_P.iter().zip(values) {
            w.write_record([task.to_string(), format!("{p:.1}"), format!("{r}")])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
