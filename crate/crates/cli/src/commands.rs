use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use pretr::benchmark::{
    apply_anchor, bench_attention_scaling, bench_decode, write_bench_csv, BenchKind, BenchResult, DecodeBench,
    ScalingLayout,
};
use pretr::comma::{
    attention_density_ratio, train_comma, write_comma_log_csv, write_density_csv, write_reference_csv, CommaCheckpoint,
    CommaConfig, Quantizer, StComma, TokenScene,
};
use pretr::data::archive::{read_scenes, write_scenes};
use pretr::data::raw::load_all;
use pretr::data::splits::train_val_scenes;
use pretr::data::synth::generate_corpus;
use pretr::data::{fold, Dataset, DatasetId, Fold, Scene};
use pretr::evaluation::{evaluate_fold, evaluate_scenes, run_ablation, AblationTable, MetricsReport};
use pretr::model::{load_checkpoint, AttnLayout, AttnVariant, DecodeMode};
use pretr::training::{train, TrainOutputs};
use serde::Serialize;

use crate::config::{resolve, Resolved};
use crate::manifest::{io, Manifest};
use crate::{Cli, CliError, Command, Global, UsageError, DATA_ROOT_ENV};

type Out<T = ()> = Result<T, CliError>;

/// Published vocabulary size of the token grid on the full corpus.
const REFERENCE_VOCAB: usize = 6827;

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Prepare => "prepare",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Ablate { .. } => "ablate",
        Command::Bench { .. } => "bench",
        Command::CommaTrain => "comma-train",
        Command::CommaR { .. } => "comma-r",
    }
}

pub fn dispatch(cli: &Cli) -> Out {
    let g = &cli.global;
    let mut sets = g.sets.clone();
    if let Some(seed) = g.seed {
        sets.push(format!("seed={seed}"));
    }
    if g.synthetic {
        sets.push("synthetic.enabled=true".into());
    }
    let mut resolved = resolve(g.config.as_ref(), &sets)?;
    let seed = resolved.config.seed;
    if !resolved.explicit.contains("train.seed") {
        resolved.config.train.seed = seed;
    }
    if !resolved.explicit.contains("comma_train.seed") {
        resolved.config.comma_train.seed = seed;
    }
    let source = data_source(g, &resolved)?;
    let name = command_name(&cli.command);
    let manifest = Manifest::new(name, source.describe(), &resolved.config);
    manifest.write(&g.out)?;
    let ctx = Ctx { g, r: &resolved, source, manifest: manifest.id.clone() };
    match &cli.command {
        Command::Prepare => ctx.prepare(),
        Command::Train { fold } => ctx.train(&parse_folds(fold)?),
        Command::Eval { fold, checkpoint } => ctx.eval(&parse_folds(fold)?, checkpoint),
        Command::Ablate { folds, variants, seeds } => ctx.ablate(&parse_folds(folds)?, &parse_list(variants)?, seeds),
        Command::Bench { modes, horizons, layouts, kinds, scaling } => {
            ctx.bench(&parse_list(modes)?, horizons, &parse_list(layouts)?, &parse_kinds(kinds)?, *scaling)
        }
        Command::CommaTrain => ctx.comma_train(),
        Command::CommaR { checkpoint } => ctx.comma_r(checkpoint),
    }
}

fn parse_list<T: std::str::FromStr<Err = pretr::Error>>(s: &str) -> Out<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.parse().map_err(|e: pretr::Error| UsageError(e.to_string()).into()))
        .collect()
}

fn parse_folds(s: &str) -> Out<Vec<DatasetId>> {
    if s.trim() == "all" {
        Ok(DatasetId::ALL.to_vec())
    } else {
        parse_list(s)
    }
}

fn parse_kinds(s: &str) -> Out<Vec<BenchKind>> {
    s.split(',')
        .map(|k| match k.trim() {
            "infer" | "inference" => Ok(BenchKind::Inference),
            "train" | "training" => Ok(BenchKind::Training),
            other => Err(UsageError(format!("unknown bench kind '{other}'")).into()),
        })
        .collect()
}

enum Source {
    Synthetic { seed: u64, frames: Option<usize> },
    Root(PathBuf),
    Archives(PathBuf),
    None,
}

impl Source {
    fn describe(&self) -> String {
        match self {
            Source::Synthetic { seed, frames } => format!("synthetic(seed={seed}, frames={frames:?})"),
            Source::Root(p) => format!("annotations:{}", p.display()),
            Source::Archives(p) => format!("archives:{}", p.display()),
            Source::None => "none".into(),
        }
    }
}

fn data_source(g: &Global, r: &Resolved) -> Out<Source> {
    let synth = r.config.synthetic.enabled;
    let root = g.data.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
    match (&g.scenes, synth, g.data.is_some()) {
        (Some(_), true, _) | (Some(_), _, true) => {
            Err(UsageError("--scenes conflicts with --data and --synthetic".into()).into())
        }
        (_, true, true) => Err(UsageError("--data conflicts with --synthetic".into()).into()),
        (Some(dir), false, false) => Ok(Source::Archives(dir.clone())),
        (None, true, _) => Ok(Source::Synthetic { seed: r.config.seed, frames: r.config.synthetic.frames }),
        (None, false, _) => Ok(root.map_or(Source::None, Source::Root)),
    }
}

struct Ctx<'a> {
    g: &'a Global,
    r: &'a Resolved,
    source: Source,
    manifest: String,
}

#[derive(Serialize)]
struct CorpusRow {
    dataset: String,
    recordings: usize,
    pedestrians: usize,
    train_scenes: usize,
    val_scenes: usize,
    test_scenes: usize,
}

impl Ctx<'_> {
    fn m(&self) -> Option<&str> {
        Some(&self.manifest)
    }

    fn out(&self, rel: &str) -> Out<PathBuf> {
        let p = self.g.out.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        Ok(p)
    }

    fn create(&self, rel: &str) -> Out<BufWriter<File>> {
        let p = self.out(rel)?;
        Ok(BufWriter::new(File::create(&p).map_err(|e| io(&p, e))?))
    }

    fn corpus(&self) -> Out<Vec<Dataset>> {
        match &self.source {
            Source::Synthetic { seed, frames } => Ok(generate_corpus(*seed, *frames)),
            Source::Root(root) => Ok(load_all(root)?),
            Source::Archives(_) => Err(UsageError("this command reads annotations; pass --data or --synthetic".into()).into()),
            Source::None => Err(UsageError(format!(
                "no data source: pass --data <root>, set {DATA_ROOT_ENV}, or use --synthetic"
            ))
            .into()),
        }
    }

    fn folds(&self, ids: &[DatasetId]) -> Out<Vec<Fold>> {
        if let Source::Archives(dir) = &self.source {
            return ids.iter().map(|&id| read_fold(dir, id)).collect();
        }
        let corpus = self.corpus()?;
        let split = self.r.split();
        Ok(ids.iter().map(|&id| fold(&corpus, id, &split)).collect::<pretr::Result<_>>()?)
    }

    fn prepare(&self) -> Out {
        let corpus = self.corpus()?;
        let split = self.r.split();
        let mut rows = Vec::new();
        for d in &corpus {
            let (train, val) = train_val_scenes(d, &split)?;
            let f = fold(&corpus, d.id, &split)?;
            let dir = format!("scenes/{}", d.id.name());
            write_scenes(&self.out(&format!("{dir}/train.scenes"))?, &f.train, &split.scene)?;
            write_scenes(&self.out(&format!("{dir}/val.scenes"))?, &f.val, &split.scene)?;
            write_scenes(&self.out(&format!("{dir}/test.scenes"))?, &f.test, &split.scene)?;
            rows.push(CorpusRow {
                dataset: d.id.name().into(),
                recordings: d.recordings.len(),
                pedestrians: d.pedestrian_count(),
                train_scenes: train.len(),
                val_scenes: val.len(),
                test_scenes: f.test.len(),
            });
        }
        let total = CorpusRow {
            dataset: "total".into(),
            recordings: rows.iter().map(|r| r.recordings).sum(),
            pedestrians: rows.iter().map(|r| r.pedestrians).sum(),
            train_scenes: rows.iter().map(|r| r.train_scenes).sum(),
            val_scenes: rows.iter().map(|r| r.val_scenes).sum(),
            test_scenes: rows.iter().map(|r| r.test_scenes).sum(),
        };
        rows.push(total);
        write_rows(self.create("corpus_stats.csv")?, &rows, self.m())?;
        println!("prepared {} folds under {}", corpus.len(), self.g.out.display());
        Ok(())
    }

    fn train(&self, ids: &[DatasetId]) -> Out {
        let folds = self.folds(ids)?;
        let mut rows = Vec::new();
        for f in &folds {
            let name = f.test_dataset.name();
            let dir = self.out(&format!("{name}/x"))?.parent().map(Path::to_path_buf).expect("fold dir");
            let cfg = self.r.model_for(f.test_dataset);
            let outputs = TrainOutputs { dir: &dir, manifest: self.m() };
            let outcome = train::<f32>(f, cfg, &self.r.config.train, Some(outputs))?;
            let e = &self.r.config.eval;
            let metrics = evaluate_scenes(&outcome.model, f.test_dataset, &f.test, e.batch, e.weighting)?;
            println!(
                "{name}: best epoch {} after {} steps, test ADE {:.4} FDE {:.4}",
                outcome.best_epoch, outcome.steps, metrics.ade, metrics.fde
            );
            MetricsReport::new(&format!("train_{name}"), &cfg, e.weighting, vec![metrics.clone()])?
                .write(&dir, "metrics", self.m())?;
            rows.push(metrics);
        }
        if folds.len() > 1 {
            MetricsReport::new("train", &self.r.config.model, self.r.config.eval.weighting, rows)?
                .write(&self.g.out, "metrics", self.m())?;
        }
        Ok(())
    }

    fn eval(&self, ids: &[DatasetId], checkpoint: &Path) -> Out {
        let folds = self.folds(ids)?;
        let mut rows = Vec::new();
        for f in &folds {
            let path = if ids.len() > 1 || checkpoint.is_dir() {
                checkpoint.join(f.test_dataset.name()).join("best.ckpt")
            } else {
                checkpoint.to_path_buf()
            };
            let ck = load_checkpoint(&path)?;
            rows.push(evaluate_fold(&ck, f, self.r.config.eval.weighting)?);
        }
        let report = MetricsReport::new("eval", &self.r.config.model, self.r.config.eval.weighting, rows)?;
        for r in &report.rows {
            println!("{}: ADE {:.4} FDE {:.4}", r.dataset, r.ade, r.fde);
        }
        report.write(&self.g.out, "eval", self.m())?;
        Ok(())
    }

    fn ablate(&self, ids: &[DatasetId], variants: &[AttnVariant], seeds: &[u64]) -> Out {
        let folds = self.folds(ids)?;
        let seeds = if seeds.is_empty() { vec![self.r.config.train.seed] } else { seeds.to_vec() };
        let mut tables = Vec::new();
        for &seed in &seeds {
            let tc = pretr::training::TrainConfig { seed, ..self.r.config.train };
            let table = run_ablation(&folds, variants, &self.r.config.model, &tc, self.r.config.eval.weighting)?;
            table.write_csv(self.create(&format!("ablation_seed{seed}.csv"))?, self.m())?;
            tables.push(table);
        }
        let summary = ablation_summary(variants, &tables);
        for row in &summary {
            println!("{}: mean ADE {:.4} FDE {:.4} over {} seeds", row.variant, row.ade_mean, row.fde_mean, row.seeds);
        }
        write_rows(self.create("ablation.csv")?, &summary, self.m())
    }

    fn bench(
        &self,
        modes: &[DecodeMode],
        horizons: &[usize],
        layouts: &[AttnLayout],
        kinds: &[BenchKind],
        scaling: bool,
    ) -> Out {
        let b = &self.r.config.bench;
        let base = &self.r.config.model;
        let mut results: Vec<BenchResult> = Vec::new();
        for &kind in kinds {
            for &layout in layouts {
                let start = results.len();
                for &t_pred in horizons {
                    for &mode in modes {
                        let run = DecodeBench { mode, layout, kind, t_pred, agents: b.agents, scenes: b.scenes };
                        let (res, _) = bench_decode(&run, base, b.reps, self.r.config.seed)?;
                        println!("{} T={} N={}: {:.3} ms", res.label, res.t, res.n, res.median_ms);
                        results.push(res);
                    }
                }
                let anchor = DecodeBench {
                    mode: DecodeMode::Autoregressive,
                    layout,
                    kind,
                    t_pred: 0,
                    agents: 0,
                    scenes: 0,
                }
                .label();
                apply_anchor(&mut results[start..], &anchor);
            }
        }
        write_bench_csv(&results, self.create("bench.csv")?, self.m())?;
        if scaling {
            let mut all = Vec::new();
            let mut slopes = Vec::new();
            for layout in [ScalingLayout::Divided, ScalingLayout::Merged] {
                let s = bench_attention_scaling(
                    layout,
                    &[4, 8, 16, 32],
                    base.t_obs + base.t_pred,
                    &[5, 10, 20, 40],
                    8,
                    base.d_model,
                    base.heads,
                    b.reps,
                    self.r.config.seed,
                )?;
                println!("{layout:?}: latency slope over N {:.2}, over T {:.2}", s.slope_n, s.slope_t);
                slopes.push(serde_json::json!({ "layout": layout, "slope_n": s.slope_n, "slope_t": s.slope_t }));
                all.extend(s.over_n);
                all.extend(s.over_t);
            }
            write_bench_csv(&all, self.create("bench_scaling.csv")?, self.m())?;
            let path = self.out("bench_scaling.json")?;
            let text = serde_json::to_string_pretty(&serde_json::json!({ "manifest": self.manifest, "slopes": slopes }))
                .map_err(pretr::Error::from)?;
            std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }

    /// Training and validation scenes of every source.
    fn comma_scenes(&self) -> Out<(Vec<Scene>, Vec<Scene>)> {
        let corpus = self.corpus()?;
        let split = self.r.split();
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for d in &corpus {
            let (t, v) = train_val_scenes(d, &split)?;
            train.extend(t);
            val.extend(v);
        }
        Ok((train, val))
    }

    fn comma_train(&self) -> Out {
        let (train, _) = self.comma_scenes()?;
        let q = Quantizer::fit(&train)?;
        let vocab = q.vocab_size();
        let c = &self.r.config;
        let m = &c.model;
        let cfg = CommaConfig { vocab, t_obs: m.t_obs, t_pred: m.t_pred, n_max: m.n_max, ..c.comma };
        let tokens: Vec<TokenScene> = train.iter().map(|s| TokenScene::from_scene(s, &q)).collect();
        let model = StComma::<f32>::new(cfg, c.seed)?;
        let (model, log) = train_comma(model, &tokens, &c.comma_train)?;
        write_comma_log_csv(&log, self.create("comma_log.csv")?, self.m())?;
        let coords = vocab - 2;
        let info = serde_json::json!({
            "manifest": self.manifest,
            "cell_m": q.cell,
            "coordinate_tokens": coords,
            "reference_tokens": REFERENCE_VOCAB,
            "relative_difference": (coords as f64 - REFERENCE_VOCAB as f64) / REFERENCE_VOCAB as f64,
        });
        let path = self.out("vocab.json")?;
        std::fs::write(&path, serde_json::to_string_pretty(&info).map_err(pretr::Error::from)?).map_err(|e| io(&path, e))?;
        CommaCheckpoint { model, quantizer: q }.save(self.out("comma.ckpt")?)?;
        if let Some(last) = log.last() {
            println!("token model: {coords} coordinate tokens, final loss {:.4}, accuracy {:.3}", last.loss, last.accuracy);
        }
        Ok(())
    }

    fn comma_r(&self, checkpoint: &Path) -> Out {
        let ck = CommaCheckpoint::<f32>::load(checkpoint)?;
        let (_, val) = self.comma_scenes()?;
        let tokens: Vec<TokenScene> = val.iter().map(|s| TokenScene::from_scene(s, &ck.quantizer)).collect();
        let d = &self.r.config.density;
        let reports = d
            .ps
            .iter()
            .map(|&p| attention_density_ratio(&ck.model, &tokens, p, self.r.config.seed, d.layers, d.batch))
            .collect::<pretr::Result<Vec<_>>>()?;
        for r in &reports {
            println!("p={:.2}: R={:.4} over {} masked steps", r.p, r.r, r.n_tokens);
        }
        write_density_csv(&reports, self.create("density.csv")?, self.m())?;
        write_reference_csv(self.create("density_reference.csv")?)?;
        let path = self.out("density.json")?;
        let text = serde_json::to_string_pretty(&serde_json::json!({ "manifest": self.manifest, "reports": reports }))
            .map_err(pretr::Error::from)?;
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
        Ok(())
    }
}

fn read_fold(dir: &Path, id: DatasetId) -> Out<Fold> {
    let base = dir.join(id.name());
    let read = |part: &str| -> Out<Vec<Scene>> { Ok(read_scenes(&base.join(format!("{part}.scenes")))?.1) };
    Ok(Fold { test_dataset: id, train: read("train")?, val: read("val")?, test: read("test")? })
}

#[derive(Serialize)]
struct AblationSummary {
    variant: String,
    ade_mean: f64,
    fde_mean: f64,
    seeds: usize,
}

fn ablation_summary(variants: &[AttnVariant], tables: &[AblationTable]) -> Vec<AblationSummary> {
    variants
        .iter()
        .map(|&v| {
            let reports: Vec<&MetricsReport> =
                tables.iter().flat_map(|t| t.entries.iter().filter(|e| e.0 == v).map(|e| &e.1)).collect();
            let n = reports.len().max(1) as f64;
            AblationSummary {
                variant: v.name().into(),
                ade_mean: reports.iter().map(|r| r.average_ade).sum::<f64>() / n,
                fde_mean: reports.iter().map(|r| r.average_fde).sum::<f64>() / n,
                seeds: reports.len(),
            }
        })
        .collect()
}

fn write_rows<W: std::io::Write, R: Serialize>(mut out: W, rows: &[R], manifest: Option<&str>) -> Out {
    let err = |e: std::io::Error| CliError::Runtime(io(Path::new("<csv>"), e));
    if let Some(m) = manifest {
        writeln!(out, "# manifest={m}").map_err(err)?;
    }
    let mut w = csv_writer(out);
    for r in rows {
        w.serialize(r).map_err(pretr::Error::from)?;
    }
    w.flush().map_err(err)?;
    Ok(())
}

fn csv_writer<W: std::io::Write>(out: W) -> csv::Writer<W> {
    csv::Writer::from_writer(out)
}
