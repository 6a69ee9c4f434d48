use std::path::Path;
use std::process::{Command, Output};

fn pretr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pretr")).args(args).env_remove("PRETR_ETH_UCY_ROOT").output().expect("binary runs")
}

const TINY: &[&str] = &[
    "--synthetic",
    "--set",
    "synthetic.frames=100",
    "--set",
    "model.d_model=8",
    "--set",
    "model.d_ff=16",
    "--set",
    "model.heads=2",
    "--set",
    "train.max_epochs=1",
    "--set",
    "train.max_steps=6",
];

fn run_tiny(out: &Path, tail: &[&str]) -> Output {
    let mut args: Vec<&str> = TINY.to_vec();
    let out = out.to_str().unwrap();
    args.extend(["--out", out]);
    args.extend(tail);
    pretr(&args)
}

/// Drops the trailing timing column of a training log.
fn without_wall_time(text: &str) -> String {
    text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["--out", out, "frobnicate"],
        vec!["--out", out, "--set", "model.nope=1", "prepare"],
        vec!["--out", out, "prepare"],
        vec!["--out", out, "--synthetic", "train", "--fold", "mars"],
        vec!["--out", out, "--synthetic", "--data", "/x", "prepare"],
    ] {
        let o = pretr(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error[usage]: "), "{err}");
    }
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_tiny(dir.path(), &["eval", "--fold", "eth", "--checkpoint", "/nonexistent/best.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8(o.stderr).unwrap().starts_with("error[io]: "));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny\nseed = 5\nmodel.d_model = 12\nbench.agents = 3\n").unwrap();
    let out = dir.path().join("o");
    let o = pretr(&[
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "model.d_model=16",
        "--synthetic",
        "--out",
        out.to_str().unwrap(),
        "prepare",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 5);
    assert_eq!(manifest["config"]["model"]["d_model"], 16);
    assert_eq!(manifest["config"]["bench"]["agents"], 3);
    let id = manifest["id"].as_str().unwrap();
    let stats = std::fs::read_to_string(out.join("corpus_stats.csv")).unwrap();
    assert_eq!(stats.lines().next().unwrap(), format!("# manifest={id}"));
}

#[test]
fn identical_runs_write_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_tiny(out, &["train", "--fold", "hotel"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for file in ["hotel/metrics.csv", "hotel/metrics.json", "manifest.json"] {
        let (x, y) = (std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap());
        assert_eq!(x, y, "{file} differs");
    }
    let log = |p: &Path| without_wall_time(&std::fs::read_to_string(p.join("hotel/train_log.csv")).unwrap());
    assert_eq!(log(&a), log(&b));
    assert_eq!(std::fs::read(a.join("hotel/best.ckpt")).unwrap(), std::fs::read(b.join("hotel/best.ckpt")).unwrap());
}

#[test]
fn prepared_archives_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let prep = dir.path().join("prep");
    assert!(run_tiny(&prep, &["prepare"]).status.success());
    let scenes = prep.join("scenes");
    let out = dir.path().join("t");
    let mut args: Vec<&str> = TINY[1..].to_vec();
    args.extend(["--scenes", scenes.to_str().unwrap(), "--out", out.to_str().unwrap(), "train", "--fold", "zara1"]);
    let o = pretr(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let direct = dir.path().join("d");
    assert!(run_tiny(&direct, &["train", "--fold", "zara1"]).status.success());
    let metrics = |p: &Path| {
        let t = std::fs::read_to_string(p.join("zara1/metrics.csv")).unwrap();
        t.lines().skip(1).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(metrics(&out), metrics(&direct));
}

#[test]
fn density_study_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--set",
        "comma.d_model=8",
        "--set",
        "comma.d_ff=16",
        "--set",
        "comma.heads=2",
        "--set",
        "comma.layers=1",
        "--set",
        "comma_train.epochs=1",
        "--set",
        "comma_train.max_steps=2",
        "--set",
        "comma_train.batch_size=8",
    ];
    let ck_dir = dir.path().join("c");
    let mut args = TINY.to_vec();
    args.extend(small);
    args.extend(["--out", ck_dir.to_str().unwrap(), "comma-train"]);
    let o = pretr(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ck = ck_dir.join("comma.ckpt");
    let mut runs = Vec::new();
    for name in ["r1", "r2"] {
        let out = dir.path().join(name);
        let mut args = TINY.to_vec();
        args.extend(["--out", out.to_str().unwrap(), "comma-r", "--checkpoint", ck.to_str().unwrap()]);
        let o = pretr(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(std::fs::read_to_string(out.join("density.csv")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    let rows: Vec<&str> = runs[0].lines().skip(2).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let r: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}
