//! Stages of the cross-validated experiment: prepare, split, train,
//! evaluate and report.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::{CellRecord, CellStatus, RunManifest};
use super::overlay::render_overlay;
use super::pretrain::initial_weights;
use super::table::emit_table;
use super::Workspace;
use crate::catalog::{
    fold_files_exist, ingest_catalog, load_rgb, read_fold, resize_sample, stratified_folds, write_fold_files,
    DiagnosisClass, FoldSplit, NUM_FOLDS,
};
use crate::error::{Error, Result};
use crate::labels::{fuse_mask, read_label_png, write_label_png, LabelMap};
use crate::metrics::{aggregate_all, AggregateRow, AggregationMode, ImageConfusion, MetricSet, MetricsReport};
use crate::network::{forward_chw, predict_labels};
use crate::trainer::{image_to_input, load_checkpoint, save_checkpoint, train, write_training_log, CheckpointMeta, Sample};
use crate::weights::atomic_write;
use crate::zoo::{build_graph_with, ModelGraph, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSample {
    pub sample_id: String,
    pub diagnosis: DiagnosisClass,
    /// (height, width) before resizing.
    pub original_size: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedExclusion {
    pub sample_id: String,
    pub reason: String,
}

/// Index of the resized images and fused label maps under `prepared/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedCatalog {
    pub image_size: (u32, u32),
    pub samples: Vec<PreparedSample>,
    pub excluded: Vec<PreparedExclusion>,
}

impl PreparedCatalog {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let p = ws.catalog_path();
        let text = std::fs::read_to_string(&p)
            .map_err(|e| Error::Experiment(format!("dataset is not prepared ({}: {e})", p.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn diagnosis(&self, id: &str) -> Option<DiagnosisClass> {
        self.samples.iter().find(|s| s.sample_id == id).map(|s| s.diagnosis)
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Ingest `root`, resize every usable sample to `size` (height, width) and
/// write images, paletted label maps and `catalog.json`. An existing
/// preparation at the same size is reused.
pub fn prepare_dataset(ws: &Workspace, root: &Path, table: &Path, size: (u32, u32)) -> Result<PreparedCatalog> {
    if let Ok(existing) = PreparedCatalog::load(ws) {
        if existing.image_size == size {
            log::info!("prepare: reusing {} prepared samples", existing.samples.len());
            return Ok(existing);
        }
    }
    let catalog = ingest_catalog(root, table)?;
    for e in &catalog.excluded {
        log::warn!("excluded {}: {}", e.sample_id, e.reason);
    }
    mkdir(&ws.prepared_dir().join("images"))?;
    mkdir(&ws.prepared_dir().join("labels"))?;
    let (h, w) = size;
    let mut samples = Vec::with_capacity(catalog.records.len());
    for rec in &catalog.records {
        let (img, mask) = resize_sample(rec, (h, w))?;
        let p = ws.prepared_image(&rec.sample_id);
        img.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        write_label_png(&ws.prepared_label(&rec.sample_id), &fuse_mask(&mask, rec.diagnosis))?;
        samples.push(PreparedSample {
            sample_id: rec.sample_id.clone(),
            diagnosis: rec.diagnosis,
            original_size: rec.original_size,
        });
    }
    let prepared = PreparedCatalog {
        image_size: size,
        samples,
        excluded: catalog
            .excluded
            .iter()
            .map(|e| PreparedExclusion {
                sample_id: e.sample_id.clone(),
                reason: e.reason.clone(),
            })
            .collect(),
    };
    atomic_write(&ws.catalog_path(), serde_json::to_string_pretty(&prepared)?.as_bytes())?;
    log::info!("prepare: {} samples, {} excluded", prepared.samples.len(), prepared.excluded.len());
    Ok(prepared)
}

/// Generate (or reuse, for the same seed) the five stratified folds.
pub fn split_folds(ws: &Workspace, seed: u64) -> Result<Vec<FoldSplit>> {
    let dir = ws.folds_dir();
    let seed_file = dir.join("seed.txt");
    let same_seed = std::fs::read_to_string(&seed_file).is_ok_and(|s| s.trim() == seed.to_string());
    if same_seed && fold_files_exist(&dir) {
        return (0..NUM_FOLDS).map(|k| read_fold(&dir, k)).collect();
    }
    let prepared = PreparedCatalog::load(ws)?;
    let folds = stratified_folds(
        prepared.samples.iter().map(|s| (s.sample_id.as_str(), s.diagnosis)),
        seed,
    )?;
    write_fold_files(&dir, &folds)?;
    atomic_write(&seed_file, seed.to_string().as_bytes())?;
    Ok(folds)
}

/// Fails when any id is shared between the splits of one fold.
pub fn check_fold_isolation(fold: &FoldSplit) -> Result<()> {
    let sets = [
        ("train", &fold.train_ids),
        ("validation", &fold.validation_ids),
        ("test", &fold.test_ids),
    ];
    for i in 0..3 {
        for j in i + 1..3 {
            let a: BTreeSet<&String> = sets[i].1.iter().collect();
            let shared: Vec<&String> = sets[j].1.iter().filter(|id| a.contains(id)).collect();
            if !shared.is_empty() {
                return Err(Error::Experiment(format!(
                    "fold {}: {} and {} share {} ids, e.g. {}",
                    fold.fold_index,
                    sets[i].0,
                    sets[j].0,
                    shared.len(),
                    shared[0]
                )));
            }
        }
    }
    Ok(())
}

fn load_prepared(ws: &Workspace, id: &str) -> Result<(RgbImage, LabelMap)> {
    Ok((load_rgb(&ws.prepared_image(id))?, read_label_png(&ws.prepared_label(id))?))
}

fn load_samples(ws: &Workspace, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter()
        .map(|id| {
            let (img, label) = load_prepared(ws, id)?;
            Sample::new(id.clone(), img, label.into_inner())
        })
        .collect()
}

pub fn cell_graph(cfg: &ExperimentConfig, variant: Variant) -> Result<ModelGraph> {
    build_graph_with(variant, crate::labels::NUM_LABELS, cfg.widths.widths(variant.backbone()))
}

/// Seed of one cell, derived from the training seed, variant and fold.
pub fn cell_seed(cfg: &ExperimentConfig, variant: Variant, fold: usize) -> u64 {
    let v = Variant::ALL.iter().position(|x| *x == variant).unwrap_or(0) as u64;
    cfg.train.seed.wrapping_add(1000 * v + fold as u64)
}

const CHECKPOINT: &str = "best.safetensors";
const METRICS: &str = "metrics.csv";

/// Transplant into the cell's graph, train on the fold's training split
/// with validation-based checkpoint selection, and save the result.
pub fn train_cell(cfg: &ExperimentConfig, ws: &Workspace, variant: Variant, fold: usize) -> Result<PathBuf> {
    let split = read_fold(&ws.folds_dir(), fold)?;
    check_fold_isolation(&split)?;
    let graph = cell_graph(cfg, variant)?;
    let seed = cell_seed(cfg, variant, fold);
    let (init, report) = initial_weights(cfg, ws, &graph, seed)?;
    let dir = ws.cell_dir(variant, fold);
    mkdir(&dir)?;
    if let Some(r) = &report {
        r.save(&dir, "transplant")?;
    }
    let train_set = load_samples(ws, &split.train_ids)?;
    let val_set = load_samples(ws, &split.validation_ids)?;
    let tc = crate::trainer::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    log::info!("training {} fold {fold}: {} train, {} validation", variant.slug(), train_set.len(), val_set.len());
    let out = train(&graph, init, &train_set, &val_set, &tc)?;
    write_training_log(&dir.join("train_log.csv"), &out.state.history)?;
    let path = dir.join(CHECKPOINT);
    let meta = CheckpointMeta {
        graph: variant.slug().to_string(),
        num_classes: graph.num_classes,
        config: tc,
        epoch: out.best.epoch,
        val_loss: out.best.val_loss,
        val_mean_dice: out.best.val_mean_dice,
    };
    save_checkpoint(&path, &out.best_weights, &meta)?;
    Ok(path)
}

fn load_cell_model(cfg: &ExperimentConfig, ws: &Workspace, variant: Variant, fold: usize) -> Result<(ModelGraph, crate::weights::WeightBundle)> {
    let graph = cell_graph(cfg, variant)?;
    let (weights, _) = load_checkpoint(&ws.cell_dir(variant, fold).join(CHECKPOINT))?;
    weights.check_against(&graph)?;
    Ok((graph, weights))
}

fn predict(graph: &ModelGraph, weights: &crate::weights::WeightBundle, img: &RgbImage) -> Result<LabelMap> {
    predict_labels(&forward_chw(graph, weights, &image_to_input(img))?)
}

/// Score the cell's checkpoint on the fold's test split; writes per-image
/// counts, aggregated metrics and overlay panels.
pub fn evaluate_cell(cfg: &ExperimentConfig, ws: &Workspace, variant: Variant, fold: usize) -> Result<Vec<AggregateRow>> {
    let split = read_fold(&ws.folds_dir(), fold)?;
    check_fold_isolation(&split)?;
    let (graph, weights) = load_cell_model(cfg, ws, variant, fold)?;
    let dir = ws.cell_dir(variant, fold);
    let overlay_dir = dir.join("overlays");
    let mut per_image = Vec::with_capacity(split.test_ids.len());
    for (i, id) in split.test_ids.iter().enumerate() {
        let (img, truth) = load_prepared(ws, id)?;
        let pred = predict(&graph, &weights, &img)?;
        per_image.push(ImageConfusion::compute(id, &pred, &truth)?);
        if i < cfg.report.overlays {
            mkdir(&overlay_dir)?;
            let panel = render_overlay(&img, &truth, &pred)?;
            let p = overlay_dir.join(format!("{id}.png"));
            panel.save(&p).map_err(|e| Error::Image { path: p.clone(), source: e })?;
        }
    }
    let mut counts = String::from("sample_id,class,tp,fp,fn,tn\n");
    for ic in &per_image {
        for (class, c) in DiagnosisClass::ALL.iter().zip(&ic.counts) {
            counts.push_str(&format!("{},{},{},{},{},{}\n", ic.sample_id, class.slug(), c.tp, c.fp, c.fn_, c.tn));
        }
    }
    atomic_write(&dir.join("per_image.csv"), counts.as_bytes())?;
    let rows = aggregate_all(&per_image);
    atomic_write(&dir.join(METRICS), aggregate_csv(&rows).as_bytes())?;
    Ok(rows)
}

fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("class,mode,images,dice,sensitivity,specificity,mcc\n");
    for r in rows {
        let m = r.metrics.map_or_else(
            || ",,,".to_string(),
            |m| format!("{},{},{},{}", m.dice, m.sensitivity, m.specificity, m.mcc),
        );
        s.push_str(&format!("{},{},{},{m}\n", r.class.slug(), r.mode.as_str(), r.images));
    }
    s
}

pub fn read_aggregate_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Experiment(format!("{}: malformed line {line}", path.display()));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n + 1));
        }
        let metrics = if f[3].is_empty() {
            None
        } else {
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1));
            Some(MetricSet {
                dice: num(f[3])?,
                sensitivity: num(f[4])?,
                specificity: num(f[5])?,
                mcc: num(f[6])?,
            })
        };
        rows.push(AggregateRow {
            class: f[0].parse()?,
            mode: f[1].parse::<AggregationMode>()?,
            images: f[2].parse().map_err(|_| bad(n + 1))?,
            metrics,
        });
    }
    Ok(rows)
}

fn cell_is_done(ws: &Workspace, rec: &CellRecord, cell_hash: &str) -> bool {
    rec.status == CellStatus::Completed
        && rec.config_hash == cell_hash
        && ws.root().join(&rec.checkpoint).is_file()
        && ws.root().join(&rec.metrics_csv).is_file()
}

fn run_cell(cfg: &ExperimentConfig, ws: &Workspace, variant: Variant, fold: usize) -> CellRecord {
    let start = Instant::now();
    let rel = ws.cell_rel(variant, fold);
    let result = train_cell(cfg, ws, variant, fold).and_then(|_| evaluate_cell(cfg, ws, variant, fold));
    let (status, error) = match result {
        Ok(_) => (CellStatus::Completed, None),
        Err(e) => {
            log::error!("{} fold {fold} failed: {e}", variant.slug());
            (CellStatus::Failed, Some(e.to_string()))
        }
    };
    CellRecord {
        variant,
        fold,
        status,
        error,
        checkpoint: rel.join(CHECKPOINT),
        metrics_csv: rel.join(METRICS),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        seed: cell_seed(cfg, variant, fold),
        config_hash: cfg.cell_hash(),
    }
}

/// Mean ± sd across completed folds for every requested variant.
pub fn build_report(cfg: &ExperimentConfig, ws: &Workspace, manifest: &RunManifest) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for &v in &cfg.variants {
        let mut folds = Vec::new();
        for &k in &cfg.folds {
            if let Some(rec) = manifest.get(v, k).filter(|r| r.status == CellStatus::Completed) {
                folds.push(read_aggregate_csv(&ws.root().join(&rec.metrics_csv))?);
            }
        }
        if !folds.is_empty() {
            report.rows.extend(MetricsReport::from_folds(v.title(), &folds));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after training this many cells (simulates an interruption).
    pub max_cells: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub report: MetricsReport,
    pub trained: usize,
    pub skipped: usize,
    pub failed: usize,
    pub complete: bool,
}

/// Run every requested (variant, fold) cell that is not already complete,
/// then write the report. Failed cells are recorded and do not stop others.
pub fn run_experiment(cfg: &ExperimentConfig, ws: &Workspace, opts: RunOptions) -> Result<RunSummary> {
    let prepared_ok = PreparedCatalog::load(ws).is_ok_and(|p| p.image_size == cfg.image_size);
    if !prepared_ok {
        cfg.validate(ws.root())?;
        prepare_dataset(ws, &cfg.dataset_root(ws.root()), &cfg.diagnosis_table(ws.root()), cfg.image_size)?;
    } else {
        cfg.validate_values()?;
    }
    split_folds(ws, cfg.fold_seed)?;

    let mut manifest = RunManifest::load_or_default(&ws.manifest_path())?;
    manifest.config_hash = cfg.hash();
    let cell_hash = cfg.cell_hash();
    let mut pending = Vec::new();
    let mut skipped = 0;
    for &v in &cfg.variants {
        for &k in &cfg.folds {
            match manifest.get(v, k) {
                Some(rec) if cell_is_done(ws, rec, &cell_hash) => skipped += 1,
                _ => pending.push((v, k)),
            }
        }
    }
    if let Some(n) = opts.max_cells {
        pending.truncate(n);
    }

    let trained = pending.len();
    if cfg.parallel_cells && pending.len() > 1 {
        for &v in &cfg.variants {
            let g = cell_graph(cfg, v)?;
            if let Err(e) = initial_weights(cfg, ws, &g, 0) {
                log::warn!("pretraining for {} failed: {e}", v.slug());
            }
        }
        let queue = Mutex::new(pending.into_iter());
        let shared = Mutex::new(&mut manifest);
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").next();
                    let Some((v, k)) = next else { break };
                    let rec = run_cell(cfg, ws, v, k);
                    let mut m = shared.lock().expect("manifest lock");
                    m.upsert(rec);
                    if let Err(e) = m.save(&ws.manifest_path()) {
                        log::error!("could not save manifest: {e}");
                    }
                });
            }
        });
    } else {
        for (v, k) in pending {
            let rec = run_cell(cfg, ws, v, k);
            manifest.upsert(rec);
            manifest.save(&ws.manifest_path())?;
        }
    }
    manifest.save(&ws.manifest_path())?;

    let failed = cfg
        .variants
        .iter()
        .flat_map(|&v| cfg.folds.iter().map(move |&k| (v, k)))
        .filter(|&(v, k)| manifest.get(v, k).is_some_and(|r| r.status == CellStatus::Failed))
        .count();
    let report = build_report(cfg, ws, &manifest)?;
    if !report.rows.is_empty() {
        emit_table(&report, cfg.report.aggregation)?.save(&ws.report_dir())?;
    }
    let complete = manifest.is_complete(&cfg.variants, &cfg.folds);
    Ok(RunSummary {
        manifest,
        report,
        trained,
        skipped,
        failed,
        complete,
    })
}

/// Render the three-panel overlay of one sample with a cell's checkpoint.
pub fn overlay_sample(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    sample: &str,
    variant: Variant,
    fold: usize,
) -> Result<PathBuf> {
    let (graph, weights) = load_cell_model(cfg, ws, variant, fold)?;
    let (img, truth) = load_prepared(ws, sample)?;
    let pred = predict(&graph, &weights, &img)?;
    let dir = ws.root().join("overlays").join(variant.slug()).join(format!("fold{fold}"));
    mkdir(&dir)?;
    let p = dir.join(format!("{sample}.png"));
    render_overlay(&img, &truth, &pred)?
        .save(&p)
        .map_err(|e| Error::Image { path: p.clone(), source: e })?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolation_violation_is_reported() {
        let fold = FoldSplit {
            fold_index: 2,
            train_ids: vec!["a".into(), "b".into()],
            validation_ids: vec!["c".into()],
            test_ids: vec!["b".into()],
        };
        let err = check_fold_isolation(&fold).unwrap_err().to_string();
        assert!(err.contains("fold 2") && err.contains("train") && err.contains("test"), "{err}");
    }

    #[test]
    fn aggregate_csv_round_trip() {
        let rows = vec![
            AggregateRow {
                class: DiagnosisClass::Melanoma,
                mode: AggregationMode::Macro,
                images: 0,
                metrics: None,
            },
            AggregateRow {
                class: DiagnosisClass::Benign,
                mode: AggregationMode::Micro,
                images: 3,
                metrics: Some(MetricSet {
                    dice: 0.1,
                    sensitivity: 0.2,
                    specificity: 0.3,
                    mcc: -0.4,
                }),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, aggregate_csv(&rows)).unwrap();
        assert_eq!(read_aggregate_csv(&p).unwrap(), rows);
    }
}
