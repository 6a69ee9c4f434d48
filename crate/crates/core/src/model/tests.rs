use super::*;
use crate::numerics::layers::{Linear, Norm};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::test_support::{random_scene, tiny_config};

/// Naive multi-head attention over row lists, keys restricted to `key_ok`.
fn loop_mha(store: &ParamStore<f64>, p: &crate::numerics::layers::MhaParams, xq: &[Vec<f64>], xkv: &[Vec<f64>], heads: usize, key_ok: &[bool]) -> Vec<Vec<f64>> {
    let proj = |l: Linear, x: &[f64]| -> Vec<f64> {
        let (w, b) = (store.get(l.w), store.get(l.b));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout).map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.data()[i * dout + j]).sum::<f64>()).collect()
    };
    let q: Vec<Vec<f64>> = xq.iter().map(|x| proj(p.q, x)).collect();
    let k: Vec<Vec<f64>> = xkv.iter().map(|x| proj(p.k, x)).collect();
    let v: Vec<Vec<f64>> = xkv.iter().map(|x| proj(p.v, x)).collect();
    let d = q[0].len();
    let dh = d / heads;
    q.iter()
        .map(|qi| {
            let mut cat = vec![0.0; d];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().zip(key_ok).filter(|p| *p.1).map(|p| *p.0).fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().zip(key_ok).map(|(s, &ok)| if ok { (s - m).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for (j, vj) in v.iter().enumerate() {
                    for c in r.clone() {
                        cat[c] += e[j] / z * vj[c];
                    }
                }
            }
            proj(p.o, &cat)
        })
        .collect()
}

fn loop_ln(store: &ParamStore<f64>, n: Norm, x: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + crate::numerics::LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * store.get(n.gain).data()[i] + store.get(n.bias).data()[i])
        .collect()
}

type Grid = Vec<Vec<Vec<f64>>>; // [t][n][d]

fn loop_temporal(store: &ParamStore<f64>, sa: &SelfAttention, x: &Grid, heads: usize) -> Grid {
    let (t, n) = (x.len(), x[0].len());
    let mut out = x.clone();
    for a in 0..n {
        let seq: Vec<Vec<f64>> = (0..t).map(|i| x[i][a].clone()).collect();
        let att = loop_mha(store, &sa.temporal, &seq, &seq, heads, &vec![true; t]);
        for i in 0..t {
            let r: Vec<f64> = x[i][a].iter().zip(&att[i]).map(|(p, q)| p + q).collect();
            out[i][a] = loop_ln(store, sa.norm_t, &r);
        }
    }
    out
}

fn loop_spatial(store: &ParamStore<f64>, sa: &SelfAttention, x: &Grid, heads: usize) -> Grid {
    let mut out = x.clone();
    for (i, row) in x.iter().enumerate() {
        let att = loop_mha(store, &sa.spatial, row, row, heads, &vec![true; row.len()]);
        for a in 0..row.len() {
            let r: Vec<f64> = row[a].iter().zip(&att[a]).map(|(p, q)| p + q).collect();
            out[i][a] = loop_ln(store, sa.norm_s, &r);
        }
    }
    out
}

#[test]
fn divided_block_matches_axis_loops() {
    let cfg = ModelConfig { n_max: 3, ..tiny_config() };
    let model = Pretr::<f64>::new(cfg, 9).unwrap();
    let sa = model.handles.encoder[0].attn;
    let (t, n, d) = (4, 3, 8);
    let data: Vec<f64> = (0..t * n * d).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let grid: Grid = (0..t).map(|i| (0..n).map(|a| data[(i * n + a) * d..(i * n + a + 1) * d].to_vec()).collect()).collect();
    let scene = random_scene(&cfg, 3, 1);
    let mut full = scene.clone();
    full.input_mask.data_mut().fill(1.0);
    let batch = SceneBatch::<f64>::new(&[&full], cfg.n_max).unwrap();
    let masks = batch.encoder_masks().unwrap();
    for variant in AttnVariant::ALL {
        let mut g = Graph::inference(&model.params);
        let x = g.constant(Tensor::new(&[1, t, n, d], data.clone()).unwrap());
        let out = divided_attention_block(&mut g, &sa, x, (&masks).into(), variant, 2, &mut None).unwrap();
        let expect = match variant {
            AttnVariant::Ts => loop_spatial(&model.params, &sa, &loop_temporal(&model.params, &sa, &grid, 2), 2),
            AttnVariant::St => loop_temporal(&model.params, &sa, &loop_spatial(&model.params, &sa, &grid, 2), 2),
            AttnVariant::AggTs => {
                let a = loop_temporal(&model.params, &sa, &grid, 2);
                let b = loop_spatial(&model.params, &sa, &grid, 2);
                a.iter().zip(&b).map(|(ra, rb)| ra.iter().zip(rb).map(|(u, v)| u.iter().zip(v).map(|(p, q)| p + q).collect()).collect()).collect()
            }
        };
        let flat: Vec<f64> = expect.into_iter().flatten().flatten().collect();
        let diff = g.value(out).data().iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "{variant}: {diff}");
    }
}

#[test]
fn encoder_output_shape_default_dims() {
    let cfg = ModelConfig::default();
    let model = Pretr::<f32>::new(cfg, 0).unwrap();
    let scene = random_scene(&cfg, 20, 3);
    let batch = model.batch(&[&scene]).unwrap();
    let mut g = Graph::inference(&model.params);
    let e = model.encode(&mut g, &batch, &mut None).unwrap();
    assert_eq!(g.shape(e), &[1, 8, 20, 256]);
}

#[test]
fn param_count_matches_config_arithmetic() {
    for cfg in [tiny_config(), ModelConfig::default(), ModelConfig { layers: 2, ..ModelConfig::default() }] {
        let model = Pretr::<f32>::new(cfg, 0).unwrap();
        assert_eq!(model.params.numel(), cfg.param_count());
    }
}

#[test]
fn zero_head_predicts_last_position() {
    let cfg = tiny_config();
    let mut model = Pretr::<f64>::new(cfg, 4).unwrap();
    model.zero_head();
    let scene = random_scene(&cfg, 3, 5);
    let pred = model.predict(&[&scene]).unwrap().remove(0);
    for t in 0..cfg.t_pred {
        for a in 0..3 {
            for k in 0..2 {
                assert_eq!(pred.at(&[t, a, k]), scene.last_observed.at(&[a, k]));
            }
        }
    }
}

#[test]
fn parallel_decoding_is_single_pass_with_dense_self_attention() {
    let cfg = tiny_config();
    let model = Pretr::<f64>::new(cfg, 4).unwrap();
    let scene = random_scene(&cfg, 3, 5);
    let batch = model.batch(&[&scene]).unwrap();
    let masks = batch.decoder_masks(cfg.t_pred, false).unwrap();
    for b in 0..masks.temporal.batch() {
        for i in 0..cfg.t_pred {
            for j in 0..cfg.t_pred {
                assert!(masks.temporal.keeps(b, i, j));
            }
        }
    }
    let mut g = Graph::inference(&model.params);
    let memory = model.encode(&mut g, &batch, &mut None).unwrap();
    let trace = model.decode_parallel_traced(&mut g, memory, &batch, &mut None).unwrap();
    assert_eq!(g.counters().decoder_forwards, 1);
    let (geo, w) = g.attention_weights(trace.cross_attention[0]).unwrap();
    assert_eq!((geo.batch(), geo.heads, geo.lq, geo.lk), (batch.agents, cfg.heads, cfg.t_pred, cfg.t_obs));
    assert_eq!(w.len(), batch.agents * cfg.heads * cfg.t_pred * cfg.t_obs);
    // Agent 1 misses its first two observations: no weight may land there.
    let per_row = cfg.t_obs;
    for h in 0..cfg.heads {
        for q in 0..cfg.t_pred {
            let row = &w[((cfg.heads + h) * cfg.t_pred + q) * per_row..][..per_row];
            assert_eq!(row[0], 0.0);
            assert_eq!(row[1], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_and_masked_garbage_do_not_leak() {
    let cfg = tiny_config();
    let model = Pretr::<f64>::new(cfg, 6).unwrap();
    let small = random_scene(&cfg, 2, 7);
    let big = random_scene(&cfg, 4, 8);
    let alone = model.predict(&[&small]).unwrap().remove(0);
    let together = model.predict(&[&small, &big]).unwrap().remove(0);
    assert!(alone.max_abs_diff(&together) < 1e-12);

    let batch = model.batch(&[&big]).unwrap();
    let mut dirty = batch.clone();
    for (i, ok) in batch.input_valid.iter().enumerate() {
        if !ok {
            dirty.inputs.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&[9.0, -7.0, 3.0, 5.0]);
        }
    }
    let run = |b: &SceneBatch<f64>| {
        let mut g = Graph::inference(&model.params);
        let out = model.forward(&mut g, b, &mut None).unwrap();
        g.value(out).clone()
    };
    assert_eq!(run(&batch), run(&dirty));
}

#[test]
fn permutation_equivariant_with_constant_agent_codes() {
    let cfg = tiny_config();
    let mut model = Pretr::<f64>::new(cfg, 2).unwrap();
    let d = cfg.d_model;
    let agent = model.params.get_mut(model.handles.agent);
    let row = agent.data()[..d].to_vec();
    for a in 1..cfg.n_max {
        agent.data_mut()[a * d..(a + 1) * d].copy_from_slice(&row);
    }
    let queries = model.params.get_mut(model.handles.queries);
    for t in 0..cfg.t_pred {
        let row = queries.data()[t * cfg.n_max * d..][..d].to_vec();
        for a in 1..cfg.n_max {
            queries.data_mut()[(t * cfg.n_max + a) * d..][..d].copy_from_slice(&row);
        }
    }
    let scene = random_scene(&cfg, 3, 13);
    let perm = vec![2, 3, 0, 1];
    let permuted = crate::data::permute_agents(&scene, &perm).unwrap();
    let base = model.predict(&[&scene]).unwrap().remove(0);
    let moved = model.predict(&[&permuted]).unwrap().remove(0);
    for t in 0..cfg.t_pred {
        for (i, &src) in perm.iter().enumerate() {
            for k in 0..2 {
                assert!((moved.at(&[t, i, k]) - base.at(&[t, src, k])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn agent_codes_separate_identical_states() {
    let cfg = tiny_config();
    let model = Pretr::<f64>::new(cfg, 2).unwrap();
    let mut scene = random_scene(&cfg, 2, 1);
    for t in 0..cfg.t_obs {
        for k in 0..4 {
            let v = scene.inputs.at(&[t, 0, k]);
            scene.inputs.set(&[t, 1, k], v);
        }
        scene.input_mask.set(&[t, 1], 1.0);
    }
    let last = [scene.last_observed.at(&[0, 0]), scene.last_observed.at(&[0, 1])];
    scene.last_observed.data_mut()[2..4].copy_from_slice(&last);
    let pred = model.predict(&[&scene]).unwrap().remove(0);
    assert_ne!(pred.at(&[0, 0, 0]), pred.at(&[0, 1, 0]));
}

#[test]
fn rejects_mismatched_scene_geometry() {
    let cfg = tiny_config();
    let model = Pretr::<f64>::new(cfg, 2).unwrap();
    let other = ModelConfig { t_obs: 5, ..cfg };
    let scene = random_scene(&other, 2, 1);
    assert!(matches!(model.predict(&[&scene]), Err(crate::Error::Shape { .. })));
}
