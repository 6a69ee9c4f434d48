//! End-to-end library runs on the synthetic corpus.

use pretr::data::archive::{read_scenes, write_scenes};
use pretr::data::synth::{generate_corpus, write_corpus};
use pretr::data::{fold, raw, DatasetId, SplitConfig};
use pretr::evaluation::{evaluate_fold, MetricsReport, Weighting};
use pretr::model::{load_checkpoint, ModelConfig};
use pretr::training::{train, TrainConfig, TrainOutputs};

fn small() -> ModelConfig {
    ModelConfig { d_model: 16, d_ff: 32, heads: 2, ..ModelConfig::for_fold(DatasetId::Zara1) }
}

#[test]
fn train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(5, Some(100));
    let f = fold(&corpus, DatasetId::Zara1, &SplitConfig::default()).unwrap();
    let tc = TrainConfig { max_epochs: 2, max_steps: Some(10), warmup_steps: 5, ..TrainConfig::default() };
    let out = train::<f32>(&f, small(), &tc, Some(TrainOutputs { dir: dir.path(), manifest: Some("abc") })).unwrap();
    assert!(out.steps <= 10 && !out.log.is_empty());

    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(log.lines().any(|l| l.contains("abc")));
    assert!(log.lines().nth(1).unwrap().ends_with("wall_time"));

    let ck = load_checkpoint(dir.path().join("best.ckpt")).unwrap();
    let row = evaluate_fold(&ck, &f, Weighting::PerPedestrian).unwrap();
    assert!(row.ade.is_finite() && row.fde >= 0.0);

    let report = MetricsReport::new("run", &small(), Weighting::PerPedestrian, vec![row.clone()]).unwrap();
    let mut csv = Vec::new();
    report.write_csv(&mut csv, None).unwrap();
    let (rows, ade, _) = MetricsReport::read_csv_rows(std::str::from_utf8(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!((ade - row.ade).abs() < 1e-6);
}

#[test]
fn synthetic_corpus_survives_text_and_archive_formats() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(8, Some(70));
    write_corpus(dir.path(), &corpus).unwrap();
    let loaded = raw::load_all(dir.path()).unwrap();
    let split = SplitConfig::default();
    let a = fold(&corpus, DatasetId::Hotel, &split).unwrap();
    let b = fold(&loaded, DatasetId::Hotel, &split).unwrap();
    assert_eq!(a.train.len(), b.train.len());
    for (x, y) in a.train.iter().zip(&b.train) {
        assert!(x.inputs.max_abs_diff(&y.inputs) < 1e-6);
    }

    let path = dir.path().join("test.scenes");
    write_scenes(&path, &a.test, &split.scene).unwrap();
    let (cfg, back) = read_scenes(&path).unwrap();
    assert_eq!(cfg.t_pred, split.scene.t_pred);
    assert_eq!(back, a.test);
}
