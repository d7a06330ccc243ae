use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use minet::config::RunConfig;
use minet::data::dataset::resize_short_side;
use minet::data::synth::write_image_tree;
use minet::data::{
    kfold_split, kfold_split_stratified, load_manifest, synthetic_shapes, DatasetManifest, FoldPlan, ImageSet,
    Pipeline, RawImage,
};
use minet::metrics::{cv_aggregate, MetricsReport};
use minet::nn::checkpoint::TOOL_VERSION;
use minet::nn::{Checkpoint, Model};
use minet::optim::softmax;
use minet::tensor::Tensor;
use minet::train::{evaluate, find_lr, predict_logits, render_log, train_fold, FoldStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::{Overrides, Subset, TrainMode};

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

fn scan_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let manifest = load_manifest(Path::new(&cfg.data)).with_context(|| format!("scanning {}", cfg.data))?;
    for s in &manifest.skipped {
        eprintln!("warning: skipped {}: {}", s.path.display(), s.reason);
    }
    for c in manifest.empty_classes() {
        eprintln!("warning: class {c:?} has no images");
    }
    Ok(manifest)
}

fn load_data(cfg: &RunConfig) -> Result<(DatasetManifest, ImageSet)> {
    let manifest = scan_data(cfg)?;
    ensure!(
        manifest.num_classes() == cfg.classes,
        "dataset has {} classes but the configuration says classes = {}",
        manifest.num_classes(),
        cfg.classes
    );
    let set = ImageSet::load(&manifest, cfg.resize)?;
    Ok((manifest, set))
}

fn fold_plan(cfg: &RunConfig, set: &ImageSet) -> Result<FoldPlan> {
    let plan = if cfg.stratified {
        kfold_split_stratified(&set.labels, cfg.k, cfg.seed)?
    } else {
        kfold_split(set.len(), cfg.k, cfg.seed)?
    };
    Ok(plan)
}

fn config_comment(cfg: &RunConfig) -> Result<String> {
    let mut out = format!("# tool_version {TOOL_VERSION}\n");
    for line in cfg.to_toml()?.lines() {
        let _ = writeln!(out, "# {line}");
    }
    Ok(out)
}

pub fn scan(opts: &Overrides) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let manifest = scan_data(&cfg)?;
    let dir = out_dir(&cfg)?;
    let mut table = String::from("class\tcount\n");
    for (name, n) in manifest.class_names.iter().zip(&manifest.counts) {
        let _ = writeln!(table, "{name}\t{n}");
    }
    print!("{table}");
    println!("total\t{}", manifest.len());
    write(&dir.join("distribution.tsv"), &table)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn params(opts: &Overrides) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let spec = cfg.model_spec()?;
    for (name, n) in spec.parameter_breakdown() {
        if n > 0 {
            println!("{name:<32} {n:>12}");
        }
    }
    println!("{:<32} {:>12}", "total", spec.count_parameters());
    Ok(())
}

pub fn lr_find(opts: &Overrides) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let (_, set) = load_data(&cfg)?;
    // Sweep on fold 0's training part so its validation images stay unseen.
    let plan = fold_plan(&cfg, &set)?;
    let indices = plan.train_indices(0);
    let res = find_lr(&cfg.model_spec()?, &set, &indices, &cfg.train_config(), &cfg.lr_finder_config())?;
    let mut text = config_comment(&cfg)?;
    if let Some(lr) = res.stop_lr {
        let _ = writeln!(text, "# stopped_at {lr:.6e}");
    }
    if let Some(lr) = res.suggestion {
        let _ = writeln!(text, "# suggestion {lr:.6e}");
    }
    text.push_str("lr\tsmoothed_loss\n");
    for p in &res.points {
        let _ = writeln!(text, "{:.6e}\t{:.6}", p.lr, p.smoothed);
    }
    let path = out_dir(&cfg)?.join("lrfind.tsv");
    write(&path, &text)?;
    println!("{} points written to {}", res.points.len(), path.display());
    match res.suggestion {
        Some(lr) => println!("steepest descent at lr = {lr:.3e}"),
        None => println!("no descending region found"),
    }
    Ok(())
}

fn initial_model(cfg: &RunConfig) -> Result<Option<Model>> {
    if cfg.init_checkpoint.is_empty() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(Path::new(&cfg.init_checkpoint))?;
    ckpt.ensure_compatible(&cfg.arch.architecture(), cfg.classes, cfg.head)?;
    let spec = cfg.model_spec()?;
    Ok(Some(Model::from_parts(spec, ckpt.model.params().clone())?))
}

pub fn train(opts: &Overrides, mode: TrainMode) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let (manifest, set) = load_data(&cfg)?;
    let plan = fold_plan(&cfg, &set)?;
    let dir = out_dir(&cfg)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join("folds.json"), &plan)?;

    let spec = cfg.model_spec()?;
    let init = initial_model(&cfg)?;
    let train_cfg = cfg.train_config();
    let config_json = cfg.to_json()?;
    let folds: Vec<usize> = match mode {
        TrainMode::Cv => (0..cfg.k).collect(),
        TrainMode::Single => vec![0],
    };

    let mut reports = Vec::new();
    let mut fold_entries = Vec::new();
    let mut diverged = Vec::new();
    for &f in &folds {
        eprintln!("fold {f}: training on {} images", plan.train_indices(f).len());
        let res = train_fold(
            &spec,
            init.as_ref(),
            &set,
            &plan.train_indices(f),
            &plan.validation_indices(f),
            &train_cfg,
            f,
        )?;
        let header = json!({
            "tool_version": TOOL_VERSION,
            "fold": f,
            "status": res.status,
            "config": config_json,
        });
        write(&dir.join(format!("fold{f}_log.jsonl")), &render_log(&header, &res.records)?)?;
        if res.status == FoldStatus::Completed {
            let ckpt = Checkpoint::new(
                res.model,
                set.class_names.clone(),
                Some(res.stats),
                Some(f),
                Some(config_json.clone()),
            )?;
            ckpt.save(&dir.join(format!("fold{f}_ckpt.bin")))?;
        }
        match (&res.status, res.report) {
            (FoldStatus::Completed, Some(report)) => {
                eprintln!("fold {f}: error rate {:.4}", report.error_rate);
                write(&dir.join(format!("fold{f}_confusion.tsv")), &report.confusion.to_tsv())?;
                fold_entries.push(json!({ "fold": f, "status": res.status, "report": report }));
                reports.push(report);
            }
            (status, _) => {
                eprintln!("fold {f}: {status:?}");
                fold_entries.push(json!({ "fold": f, "status": status }));
                diverged.push(f);
            }
        }
    }

    if !reports.is_empty() {
        write_reports(&dir, &cfg, mode, &fold_entries, &reports)?;
    }
    if !diverged.is_empty() {
        bail!("training diverged on fold(s) {diverged:?}; those folds are excluded from the metrics");
    }
    Ok(())
}

fn write_reports(
    dir: &Path,
    cfg: &RunConfig,
    mode: TrainMode,
    fold_entries: &[serde_json::Value],
    reports: &[MetricsReport],
) -> Result<()> {
    let mut doc = json!({
        "tool_version": TOOL_VERSION,
        "config": cfg.to_json()?,
        "folds": fold_entries,
    });
    let text = match mode {
        TrainMode::Cv => {
            let summary = cv_aggregate(reports)?;
            doc["mean"] = serde_json::to_value(&summary.mean)?;
            doc["pooled"] = serde_json::to_value(&summary.pooled)?;
            write(&dir.join("confusion.tsv"), &summary.pooled.confusion.to_tsv())?;
            format!(
                "mean over {} folds\n\n{}\npooled confusion matrix\n\n{}",
                summary.folds,
                summary.mean.to_text(),
                summary.pooled.to_text()
            )
        }
        TrainMode::Single => {
            doc["report"] = serde_json::to_value(&reports[0])?;
            write(&dir.join("confusion.tsv"), &reports[0].confusion.to_tsv())?;
            reports[0].to_text()
        }
    };
    write_json(&dir.join("metrics.json"), &doc)?;
    write(&dir.join("metrics.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// Loads a checkpoint and the configuration to use with it: the given file
/// (or the one embedded in the checkpoint) plus flag overrides.
fn open_checkpoint(opts: &Overrides, path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let embedded = match &ckpt.header.config {
        Some(v) => Some(serde_json::from_value::<RunConfig>(v.clone()).context("embedded configuration")?),
        None => None,
    };
    let cfg = opts.resolve(embedded)?;
    ckpt.ensure_compatible(&cfg.arch.architecture(), cfg.classes, cfg.head)?;
    ensure!(
        ckpt.header.stats.is_some(),
        "{} carries no standardization statistics",
        path.display()
    );
    Ok((ckpt, cfg))
}

pub fn eval(opts: &Overrides, path: &Path, subset: Subset) -> Result<()> {
    let (ckpt, cfg) = open_checkpoint(opts, path)?;
    let (_, set) = load_data(&cfg)?;
    ensure!(
        set.class_names == ckpt.header.class_names,
        "dataset classes {:?} differ from checkpoint classes {:?}",
        set.class_names,
        ckpt.header.class_names
    );
    let indices: Vec<usize> = match (subset, ckpt.header.fold) {
        (Subset::All, _) => (0..set.len()).collect(),
        (_, None) => bail!("checkpoint has no fold; use --subset all"),
        (Subset::Train, Some(f)) => fold_plan(&cfg, &set)?.train_indices(f),
        (Subset::Val, Some(f)) => fold_plan(&cfg, &set)?.validation_indices(f),
    };
    let crop = ckpt.header.input_shape.1;
    let stats = ckpt.header.stats.clone().unwrap_or_else(|| unreachable!());
    let pipe = Pipeline::validation(cfg.resize, crop, stats)?;
    let mut model = ckpt.model;
    let ev = evaluate(&mut model, &set, &indices, &pipe, cfg.batch)?;
    let report = ev.report(&set.class_names)?;
    let dir = out_dir(&cfg)?;
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "checkpoint": path,
        "samples": indices.len(),
        "loss": ev.loss,
        "report": report,
    });
    write_json(&dir.join("metrics.json"), &doc)?;
    write(&dir.join("metrics.txt"), &report.to_text())?;
    write(&dir.join("confusion.tsv"), &report.confusion.to_tsv())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn predict(opts: &Overrides, path: &Path, image: &Path) -> Result<()> {
    let (ckpt, cfg) = open_checkpoint(opts, path)?;
    let crop = ckpt.header.input_shape.1;
    let stats = ckpt.header.stats.clone().unwrap_or_else(|| unreachable!());
    let pipe = Pipeline::validation(cfg.resize, crop, stats)?;
    let img = resize_short_side(&RawImage::open(image)?, cfg.resize)?;
    let x = pipe.prepare(&img, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut model = ckpt.model;
    let logits = predict_logits(&mut model, Tensor::stack(&[x])?)?;
    let probs = softmax(&logits)?;
    let mut ranked: Vec<(&String, f64)> = ckpt.header.class_names.iter().zip(probs.data().iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (name, p) in ranked {
        println!("{name}\t{p:.6}");
    }
    Ok(())
}

pub fn synth(opts: &Overrides, count: usize, size: usize) -> Result<()> {
    let cfg = opts.resolve(None)?;
    let set = synthetic_shapes(count, size, cfg.seed)?;
    write_image_tree(&set, Path::new(&cfg.data))?;
    println!("wrote {} images in {} classes to {}", set.len(), set.num_classes(), cfg.data);
    Ok(())
}
