//! Latency and operation-count measurements of decoding modes and attention layouts.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{divided_attention_macs, merged_attention_macs};
use crate::data::{synth::random_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::model::{AttnLayout, DecodeMode, ModelConfig, Pretr};
use crate::numerics::{AttnMask, Counters, Graph, ParamStore, Tensor};
use crate::rng::substream;
use crate::training::{masked_mse_loss, training_forward};

pub const MIN_REPS: usize = 30;
/// Samples shorter than this are batched into an inner loop.
const MIN_SAMPLE_SECS: f64 = 2e-3;
const WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    /// Encoder plus decoder forward.
    Inference,
    /// Forward, loss and backward.
    Training,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub label: String,
    pub t: usize,
    pub n: usize,
    pub d: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    /// Multiply-accumulates of one call (attention plus projections).
    pub macs: u64,
    pub reps: usize,
    /// Calls averaged inside each timed sample.
    pub inner: usize,
    pub speedup_vs_anchor: Option<f64>,
}

/// Latency distribution of `f` in milliseconds per call: (median, p10, p90, inner).
pub fn time_calls(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, f64, usize)> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("at least {MIN_REPS} repetitions required, got {reps}")));
    }
    for _ in 0..WARMUP {
        f()?;
    }
    let probe = Instant::now();
    f()?;
    let once = probe.elapsed().as_secs_f64();
    let inner = if once >= MIN_SAMPLE_SECS { 1 } else { (MIN_SAMPLE_SECS / once.max(1e-9)).ceil() as usize };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(t0.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok((quantile(&samples, 0.5), quantile(&samples, 0.1), quantile(&samples, 0.9), inner))
}

/// Linear-interpolated quantile of sorted samples.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// What one decode benchmark measures.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeBench {
    pub mode: DecodeMode,
    pub layout: AttnLayout,
    pub kind: BenchKind,
    pub t_pred: usize,
    pub agents: usize,
    pub scenes: usize,
}

impl DecodeBench {
    pub fn label(&self) -> String {
        let kind = match self.kind {
            BenchKind::Inference => "infer",
            BenchKind::Training => "train",
        };
        format!("{kind}_{}_{}", self.mode, self.layout)
    }
}

/// Times full-model inference (or one training step) of a fixed random batch.
///
/// Parameters come from `seed` only, so every mode and layout runs with the
/// same weights.
pub fn bench_decode(bench: &DecodeBench, base: &ModelConfig, reps: usize, seed: u64) -> Result<(BenchResult, Counters)> {
    let cfg = ModelConfig {
        decode: bench.mode,
        layout: bench.layout,
        t_pred: bench.t_pred,
        n_max: base.n_max.max(bench.agents),
        ..*base
    };
    let model = Pretr::<f32>::new(cfg, seed)?;
    let scene_cfg = SceneConfig { t_obs: cfg.t_obs, t_pred: cfg.t_pred, n_max: cfg.n_max, stride: 1 };
    let scenes: Vec<_> = (0..bench.scenes.max(1)).map(|i| random_scene(&scene_cfg, bench.agents, seed + i as u64)).collect();
    let refs: Vec<_> = scenes.iter().collect();
    let batch = model.batch(&refs)?;
    let run = |counters: &mut Counters| -> Result<()> {
        match bench.kind {
            BenchKind::Inference => {
                let mut g = Graph::inference(&model.params);
                model.forward(&mut g, &batch, &mut None)?;
                *counters = g.counters();
            }
            BenchKind::Training => {
                let mut g = Graph::new(&model.params);
                let pred = training_forward(&model, &mut g, &batch, false, &mut None)?;
                let loss = masked_mse_loss(&mut g, pred, &batch)?;
                g.backward(loss)?;
                *counters = g.counters();
            }
        }
        Ok(())
    };
    let mut counters = Counters::default();
    run(&mut counters)?;
    let (median_ms, p10_ms, p90_ms, inner) = time_calls(reps, || run(&mut Counters::default()))?;
    Ok((
        BenchResult {
            label: bench.label(),
            t: bench.t_pred,
            n: bench.agents,
            d: cfg.d_model,
            median_ms,
            p10_ms,
            p90_ms,
            macs: counters.attn_macs + counters.proj_macs,
            reps,
            inner,
            speedup_vs_anchor: None,
        },
        counters,
    ))
}

/// Fills `speedup_vs_anchor` of every result with `anchor.median / result.median`
/// among results sharing the anchor's `t`, `n` and label prefix.
pub fn apply_anchor(results: &mut [BenchResult], anchor_label: &str) {
    let anchors: Vec<(usize, usize, String, f64)> = results
        .iter()
        .filter(|r| r.label == anchor_label)
        .map(|r| (r.t, r.n, r.label.clone(), r.median_ms))
        .collect();
    for r in results.iter_mut() {
        if let Some(a) = anchors.iter().find(|a| a.0 == r.t && a.1 == r.n) {
            r.speedup_vs_anchor = Some(a.3 / r.median_ms);
        }
    }
}

/// Attention layout swept by [`bench_attention_scaling`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingLayout {
    Divided,
    Merged,
}

/// Times the attention kernel alone (pre-projected Q, K, V) on one `T × N × D` grid.
pub fn bench_attention(layout: ScalingLayout, t: usize, n: usize, d: usize, heads: usize, reps: usize, seed: u64) -> Result<BenchResult> {
    let mut rng = substream(seed, "bench.attention");
    let mut rand = |shape: &[usize]| {
        let numel: usize = shape.iter().product();
        Tensor::<f32>::new(shape, (0..numel).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("shape")
    };
    let store = ParamStore::<f32>::new();
    let (q, k, v) = (rand(&[1, t, n, d]), rand(&[1, t, n, d]), rand(&[1, t, n, d]));
    let temporal = Arc::new(AttnMask::dense(n, t, t));
    let spatial = Arc::new(AttnMask::dense(t, n, n));
    let merged = Arc::new(AttnMask::dense(1, t * n, t * n));
    let run = || -> Result<u64> {
        let mut g = Graph::inference(&store);
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        match layout {
            ScalingLayout::Divided => {
                g.attention(qv, kv, vv, heads, Some(&temporal))?;
                let (qs, ks, vs) = (g.reshape(qv, &[t, n, 1, d])?, g.reshape(kv, &[t, n, 1, d])?, g.reshape(vv, &[t, n, 1, d])?);
                g.attention(qs, ks, vs, heads, Some(&spatial))?;
            }
            ScalingLayout::Merged => {
                let (qm, km, vm) = (g.reshape(qv, &[1, t * n, 1, d])?, g.reshape(kv, &[1, t * n, 1, d])?, g.reshape(vv, &[1, t * n, 1, d])?);
                g.attention(qm, km, vm, heads, Some(&merged))?;
            }
        }
        Ok(g.counters().attn_macs)
    };
    let macs = run()?;
    let expected = match layout {
        ScalingLayout::Divided => divided_attention_macs(t as u64, n as u64, d as u64),
        ScalingLayout::Merged => merged_attention_macs(t as u64, n as u64, d as u64),
    };
    debug_assert_eq!(macs, expected);
    let (median_ms, p10_ms, p90_ms, inner) = time_calls(reps, || run().map(|_| ()))?;
    let label = match layout {
        ScalingLayout::Divided => "attn_divided",
        ScalingLayout::Merged => "attn_merged",
    };
    Ok(BenchResult { label: label.into(), t, n, d, median_ms, p10_ms, p90_ms, macs, reps, inner, speedup_vs_anchor: None })
}

/// Attention sweep over `ns` at fixed `t_fixed` and over `ts` at fixed `n_fixed`.
pub struct ScalingSweep {
    pub over_n: Vec<BenchResult>,
    pub over_t: Vec<BenchResult>,
    pub slope_n: f64,
    pub slope_t: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn bench_attention_scaling(
    layout: ScalingLayout,
    ns: &[usize],
    t_fixed: usize,
    ts: &[usize],
    n_fixed: usize,
    d: usize,
    heads: usize,
    reps: usize,
    seed: u64,
) -> Result<ScalingSweep> {
    let over_n = ns.iter().map(|&n| bench_attention(layout, t_fixed, n, d, heads, reps, seed)).collect::<Result<Vec<_>>>()?;
    let over_t = ts.iter().map(|&t| bench_attention(layout, t, n_fixed, d, heads, reps, seed)).collect::<Result<Vec<_>>>()?;
    let slope_n = log_log_slope(&over_n.iter().map(|r| (r.n as f64, r.median_ms)).collect::<Vec<_>>());
    let slope_t = log_log_slope(&over_t.iter().map(|r| (r.t as f64, r.median_ms)).collect::<Vec<_>>());
    Ok(ScalingSweep { over_n, over_t, slope_n, slope_t })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    label: &'a str,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D")]
    d: usize,
    median_ms: f64,
    p10: f64,
    p90: f64,
    macs: u64,
    speedup_vs_anchor: String,
}

/// Columns: label, T, N, D, median_ms, p10, p90, macs, speedup_vs_anchor.
pub fn write_bench_csv<W: Write>(results: &[BenchResult], out: W, manifest: Option<&str>) -> Result<()> {
    let mut out = out;
    if let Some(m) = manifest {
        writeln!(out, "# manifest={m}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(CsvRow {
            label: &r.label,
            t: r.t,
            n: r.n,
            d: r.d,
            median_ms: r.median_ms,
            p10: r.p10_ms,
            p90: r.p90_ms,
            macs: r.macs,
            speedup_vs_anchor: r.speedup_vs_anchor.map(|s| format!("{s}")).unwrap_or_default(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [5.0, 10.0, 20.0, 40.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.7))).collect();
        assert!((log_log_slope(&pts) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert!((quantile(&s, 0.1) - 1.4).abs() < 1e-12);
    }

    #[test]
    fn too_few_reps_rejected() {
        assert!(time_calls(5, || Ok(())).is_err());
    }

    #[test]
    fn kernel_macs_match_closed_form() {
        for layout in [ScalingLayout::Divided, ScalingLayout::Merged] {
            let r = bench_attention(layout, 3, 4, 8, 2, MIN_REPS, 1).unwrap();
            let expect = match layout {
                ScalingLayout::Divided => 2 * (9 * 4 + 16 * 3) * 8,
                ScalingLayout::Merged => 2 * 144 * 8,
            };
            assert_eq!(r.macs, expect);
        }
    }

    #[test]
    fn decode_counters() {
        let base = ModelConfig { d_model: 8, d_ff: 16, heads: 2, n_max: 4, t_obs: 4, ..ModelConfig::default() };
        for (mode, passes) in [(DecodeMode::Parallel, 1), (DecodeMode::Autoregressive, 5)] {
            let b = DecodeBench { mode, layout: AttnLayout::Divided, kind: BenchKind::Inference, t_pred: 5, agents: 3, scenes: 1 };
            let (_, c) = bench_decode(&b, &base, MIN_REPS, 0).unwrap();
            assert_eq!(c.decoder_forwards, passes);
        }
        let one = |mode| {
            let b = DecodeBench { mode, layout: AttnLayout::Divided, kind: BenchKind::Inference, t_pred: 1, agents: 3, scenes: 1 };
            bench_decode(&b, &base, MIN_REPS, 0).unwrap().1.decoder_forwards
        };
        assert_eq!(one(DecodeMode::Parallel), one(DecodeMode::Autoregressive));
    }
}
