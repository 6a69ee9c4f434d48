use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::numerics::Graph;
use crate::rng::substream;

fn tiny(vocab: usize) -> CommaConfig {
    CommaConfig { d_model: 8, d_ff: 16, heads: 2, layers: 2, t_obs: 3, t_pred: 4, n_max: 4, vocab }
}

/// Uniform random tokens; agent `a` is present at step `t` with probability 0.8.
fn random_tokens(cfg: &CommaConfig, seed: u64) -> TokenScene {
    let mut rng = substream(seed, "test.tokens");
    let (t_total, n_max) = (cfg.t_total(), cfg.n_max);
    let coords = cfg.vocab - 2;
    let mut present: Vec<bool> = (0..t_total * n_max).map(|_| rng.random::<f64>() < 0.8).collect();
    present[0] = true;
    present[cfg.t_obs * n_max] = true;
    let tokens = present.iter().map(|&p| if p { rng.random_range(0..coords) } else { coords + 1 }).collect();
    let flags = (0..t_total * n_max)
        .map(|i| if i / n_max < cfg.t_obs { MaskFlag::Source } else { MaskFlag::TargetVisible })
        .collect();
    TokenScene {
        t_obs: cfg.t_obs,
        t_pred: cfg.t_pred,
        n_max,
        tokens,
        present,
        flags,
        labels: vec![None; t_total * n_max],
        mask_token: coords,
        pad_token: coords + 1,
    }
}

fn masked_batch(cfg: &CommaConfig, scenes: usize, p: f64, seed: u64) -> (Vec<TokenScene>, TokenBatch) {
    let mut rng = substream(seed, "test.mask");
    let masked: Vec<TokenScene> =
        (0..scenes).map(|i| mask_scene(&random_tokens(cfg, seed * 1000 + i as u64), p, &mut rng).unwrap()).collect();
    let batch = TokenBatch::new(&masked.iter().collect::<Vec<_>>()).unwrap();
    (masked, batch)
}

#[test]
fn source_rows_ignore_targets_and_rows_are_distributions() {
    let cfg = tiny(12);
    let model = StComma::<f64>::new(cfg, 3).unwrap();
    let (_, batch) = masked_batch(&cfg, 3, 0.5, 1);
    let mut g = Graph::inference(&model.params);
    let out = model.forward(&mut g, &batch, &mut None).unwrap();
    let t_len = cfg.t_total();
    let n = batch.agents;
    for node in &out.temporal_attention {
        let (geo, w) = g.attention_weights(*node).unwrap();
        for b in 0..geo.batch() {
            let (s, c) = (b / n, b % n);
            for h in 0..geo.heads {
                for i in 0..t_len {
                    if !batch.present[(s * t_len + i) * n + c] {
                        continue;
                    }
                    let row = &w[((b * geo.heads + h) * t_len + i) * t_len..][..t_len];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    if i < cfg.t_obs {
                        assert!(row[cfg.t_obs..].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn untrained_accuracy_is_chance() {
    // Masked labels are uniform and independent of every visible token, so any
    // predictor scores 1/V in expectation; binomial 4-sigma band.
    let cfg = tiny(22);
    let model = StComma::<f64>::new(cfg, 9).unwrap();
    let (mut hits, mut total) = (0.0, 0usize);
    for seed in 0..40 {
        let (_, batch) = masked_batch(&cfg, 8, 1.0, seed);
        let mut g = Graph::inference(&model.params);
        let out = model.forward(&mut g, &batch, &mut None).unwrap();
        let m = out.labels.len();
        hits += accuracy(g.value(out.logits), &out.labels) * m as f64;
        total += m;
    }
    let chance = 1.0 / (cfg.vocab - 2) as f64;
    let acc = hits / total as f64;
    let sigma = (chance * (1.0 - chance) / total as f64).sqrt();
    assert!((acc - chance).abs() < 4.0 * sigma, "accuracy {acc} vs chance {chance} over {total}");
}

#[test]
fn alpha_limits() {
    let uniform = vec![1.0 / 20.0; 20];
    assert_eq!(alpha(&uniform, 8, 12), 0.5);
    let uneven = vec![1.0 / 7.0; 7];
    assert_eq!(alpha(&uneven, 3, 4), 0.5);
    let mut src = vec![0.0; 20];
    src[..8].fill(1.0 / 8.0);
    assert_eq!(alpha(&src, 8, 12), 0.0);
    let mut tgt = vec![0.0; 20];
    tgt[8..].fill(1.0 / 12.0);
    assert_eq!(alpha(&tgt, 8, 12), 1.0);
}

/// Independent scalar reference: one scene at a time, explicit head loops.
fn reference_r(model: &StComma<f64>, masked: &[TokenScene], layers: &[usize]) -> f64 {
    let cfg = model.config;
    let (t_obs, t_pred, t_len) = (cfg.t_obs, cfg.t_pred, cfg.t_total());
    let (mut sum, mut count) = (0.0, 0usize);
    for scene in masked {
        let batch = TokenBatch::new(&[scene]).unwrap();
        let mut g = Graph::inference(&model.params);
        let out = model.forward(&mut g, &batch, &mut None).unwrap();
        let n = batch.agents;
        for t in t_obs..t_len {
            if scene.flags[t * scene.n_max] != MaskFlag::TargetMasked {
                continue;
            }
            let mut agent_sum = 0.0;
            let mut agents = 0usize;
            for c in 0..n {
                if !batch.present[t * n + c] {
                    continue;
                }
                let mut a = vec![0.0; t_len];
                for &l in layers {
                    let (geo, w) = g.attention_weights(out.temporal_attention[l]).unwrap();
                    for h in 0..geo.heads {
                        for j in 0..t_len {
                            a[j] += w[((c * geo.heads + h) * t_len + t) * t_len + j]
                                / (geo.heads * layers.len()) as f64;
                        }
                    }
                }
                let mut src = 0.0;
                for j in 0..t_obs {
                    src += a[j] / t_obs as f64;
                }
                let mut tgt = 0.0;
                for j in t_obs..t_len {
                    tgt += a[j] / t_pred as f64;
                }
                agent_sum += tgt / (src + tgt);
                agents += 1;
            }
            if agents > 0 {
                sum += agent_sum / agents as f64;
                count += 1;
            }
        }
    }
    sum / count as f64
}

#[test]
fn density_ratio_matches_loop_reference() {
    let cfg = tiny(30);
    let model = StComma::<f64>::new(cfg, 4).unwrap();
    for (p, layers, which) in [(0.3, LayerChoice::First, vec![0]), (0.8, LayerChoice::All, vec![0, 1])] {
        let (masked, _) = masked_batch(&cfg, 9, p, 7);
        let report = density_of_masked(&model, &masked, p, layers, 4).unwrap();
        let expect = reference_r(&model, &masked, &which);
        assert!((report.r - expect).abs() < 1e-9, "{} vs {expect}", report.r);
        assert!((0.0..=1.0).contains(&report.r));
        assert_eq!(report.scenes, 9);
    }
}

#[test]
fn density_ratio_is_reproducible_and_validates_p() {
    let cfg = tiny(30);
    let model = StComma::<f64>::new(cfg, 4).unwrap();
    let scenes: Vec<TokenScene> = (0..5).map(|i| random_tokens(&cfg, i)).collect();
    let a = attention_density_ratio(&model, &scenes, 0.4, 1, LayerChoice::First, 2).unwrap();
    let b = attention_density_ratio(&model, &scenes, 0.4, 1, LayerChoice::First, 5).unwrap();
    assert!((a.r - b.r).abs() < 1e-12);
    assert_eq!(a.n_tokens, b.n_tokens);
    assert!(attention_density_ratio(&model, &scenes, 0.0, 1, LayerChoice::First, 2).is_err());
    assert!(attention_density_ratio(&model, &scenes, 1.5, 1, LayerChoice::First, 2).is_err());
}

#[test]
fn training_lowers_masked_loss() {
    let cfg = tiny(12);
    // Each agent keeps one token, so masked entries are recoverable from its visible steps.
    let scenes: Vec<TokenScene> = (0..4)
        .map(|i| {
            let mut s = random_tokens(&cfg, i);
            for (k, tok) in s.tokens.iter_mut().enumerate() {
                if s.present[k] {
                    *tok = (k % cfg.n_max + 2 * i as usize) % 10;
                }
            }
            s
        })
        .collect();
    let model = StComma::<f64>::new(cfg, 2).unwrap();
    let tc = CommaTrainConfig { batch_size: 4, epochs: 200, warmup_steps: 20, lr_scale: 0.5, dropout: 0.0, ..Default::default() };
    let (_, log) = train_comma(model, &scenes, &tc).unwrap();
    let first = log.first().unwrap().loss;
    let last = log.iter().rev().take(10).map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip() {
    let scene = crate::data::synth::random_scene(&crate::data::SceneConfig { t_obs: 3, t_pred: 4, n_max: 4, stride: 1 }, 3, 5);
    let q = Quantizer::fit(std::slice::from_ref(&scene)).unwrap();
    let cfg = CommaConfig { vocab: q.vocab_size(), ..tiny(3) };
    let ck = CommaCheckpoint { model: StComma::<f32>::new(cfg, 1).unwrap(), quantizer: q };
    let bytes = ck.to_bytes().unwrap();
    let back = CommaCheckpoint::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back.quantizer, ck.quantizer);
    assert_eq!(back.model.config, cfg);
    for (_, name, t) in ck.model.params.iter() {
        assert_eq!(back.model.params.by_name(name).unwrap(), t);
    }
    let mut wrong = bytes.clone();
    wrong[..8].copy_from_slice(b"PRETRCK1");
    assert!(CommaCheckpoint::<f32>::from_bytes(&wrong).is_err());
}

#[test]
fn reference_csv_has_every_curve() {
    let mut out = Vec::new();
    write_reference_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with('#'));
    assert_eq!(text.lines().count(), 2 + 4 * 5);
    assert!(text.contains("trajectory,0.3,0.4317"));
}

proptest! {
    #[test]
    fn alpha_in_unit_interval(row in prop::collection::vec(0.0f64..1.0, 5..24), split in 1usize..4) {
        let t_obs = split.min(row.len() - 1);
        let a = alpha(&row, t_obs, row.len() - t_obs);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny(12);
    let model = StComma::<f64>::new(cfg, 6).unwrap();
    let (_, batch) = masked_batch(&cfg, 2, 0.6, 3);
    let loss_of = |params: &crate::numerics::ParamStore<f64>| {
        let m = StComma { params: params.clone(), ..model.clone() };
        let mut g = Graph::inference(&m.params);
        let (l, _) = m.loss(&mut g, &batch, &mut None).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new(&model.params);
    let (l, _) = model.loss(&mut g, &batch, &mut None).unwrap();
    let grads = g.backward(l).unwrap();
    // Layer norm over near-zero embeddings is sharply curved at this width; 1e-4 overshoots.
    let h = 1e-5;
    for (id, name, t) in model.params.iter() {
        for k in (0..t.numel()).step_by(t.numel().div_ceil(5)) {
            let mut p = model.params.clone();
            p.get_mut(id).data_mut()[k] += h;
            let up = loss_of(&p);
            p.get_mut(id).data_mut()[k] -= 2.0 * h;
            let down = loss_of(&p);
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id).data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-8, "{name}[{k}]: fd {fd} vs analytic {an}");
        }
    }
}
