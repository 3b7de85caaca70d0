//! The two pretraining tiers that seed every experiment cell.

use super::config::ExperimentConfig;
use super::Workspace;
use crate::error::{Error, Result};
use crate::surgery::{apply_transplant, plan_transplant, TransplantReport};
use crate::synthetic::{blob_segmentation_set, shape_classification_set, SHAPE_CLASSES};
use crate::trainer::{save_checkpoint, train, CheckpointMeta, Sample};
use crate::weights::WeightBundle;
use crate::zoo::{build_classifier, build_graph_with, Backbone, ModelGraph, Variant};

fn out_channels(weights: &WeightBundle, layer: &str) -> Result<usize> {
    Ok(weights.param(layer)?.weight.shape()[0])
}

fn cached(path: &std::path::Path) -> Result<Option<WeightBundle>> {
    if path.is_file() {
        Ok(Some(WeightBundle::load(path)?))
    } else {
        Ok(None)
    }
}

/// Classification source for `backbone`: a supplied checkpoint, a cached one,
/// or a freshly trained tiny classifier on synthetic shapes.
pub fn tier1_source(cfg: &ExperimentConfig, ws: &Workspace, backbone: Backbone) -> Result<(ModelGraph, WeightBundle)> {
    let widths = cfg.widths.widths(backbone);
    if let Some(p) = &cfg.tier1.checkpoint {
        let weights = WeightBundle::load(&cfg.resolve(ws.root(), p))?;
        let graph = build_classifier(backbone, out_channels(&weights, "fc8")?, widths)?;
        weights.check_against(&graph)?;
        return Ok((graph, weights));
    }
    let graph = build_classifier(backbone, SHAPE_CLASSES, widths)?;
    let path = ws.tier1_checkpoint(backbone);
    if let Some(w) = cached(&path)? {
        w.check_against(&graph)?;
        return Ok((graph, w));
    }
    log::info!("tier 1: training {} classifier on synthetic shapes", backbone.slug());
    let size = backbone.classifier_input();
    let samples = shape_classification_set(cfg.tier1.images, size, cfg.tier1.seed)
        .into_iter()
        .enumerate()
        .map(|(i, (img, label))| Sample::classification(format!("shape{i}"), img, label))
        .collect::<Vec<_>>();
    let init = WeightBundle::init(&graph, cfg.tier1.seed)?;
    let out = train(&graph, init, &samples, &[], &cfg.tier1.train)?;
    let meta = CheckpointMeta {
        graph: format!("{}-classifier", backbone.slug()),
        num_classes: graph.num_classes,
        config: cfg.tier1.train.clone(),
        epoch: out.best.epoch,
        val_loss: out.best.val_loss,
        val_mean_dice: out.best.val_mean_dice,
    };
    save_checkpoint(&path, &out.best_weights, &meta)?;
    Ok((graph, out.best_weights))
}

/// Multi-class segmentation source for `variant`, itself initialised from
/// tier 1 when that tier is enabled.
pub fn tier2_source(cfg: &ExperimentConfig, ws: &Workspace, variant: Variant) -> Result<(ModelGraph, WeightBundle)> {
    let widths = cfg.widths.widths(variant.backbone());
    if let Some(p) = &cfg.tier2.checkpoint {
        let weights = WeightBundle::load(&cfg.resolve(ws.root(), p))?;
        let graph = build_graph_with(variant, out_channels(&weights, "score_fr")?, widths)?;
        weights.check_against(&graph)?;
        return Ok((graph, weights));
    }
    let graph = build_graph_with(variant, cfg.tier2.num_classes, widths)?;
    let path = ws.tier2_checkpoint(variant);
    if let Some(w) = cached(&path)? {
        w.check_against(&graph)?;
        return Ok((graph, w));
    }
    let init = if cfg.tier1.enabled {
        let (src_graph, src) = tier1_source(cfg, ws, variant.backbone())?;
        let plan = plan_transplant(&src_graph, &src, &graph, cfg.tier1.mode)?;
        apply_transplant(&plan, &src, cfg.tier2.seed)?
    } else {
        WeightBundle::init(&graph, cfg.tier2.seed)?
    };
    log::info!(
        "tier 2: training {} on {}-class synthetic blobs",
        variant.slug(),
        cfg.tier2.num_classes
    );
    let samples = blob_segmentation_set(
        cfg.tier2.images,
        cfg.tier2.image_size as usize,
        cfg.tier2.num_classes,
        cfg.tier2.seed,
    )
    .into_iter()
    .enumerate()
    .map(|(i, (img, labels))| Sample::new(format!("blob{i}"), img, labels))
    .collect::<Result<Vec<_>>>()?;
    let out = train(&graph, init, &samples, &[], &cfg.tier2.train)?;
    let meta = CheckpointMeta {
        graph: format!("{}-source", variant.slug()),
        num_classes: graph.num_classes,
        config: cfg.tier2.train.clone(),
        epoch: out.best.epoch,
        val_loss: out.best.val_loss,
        val_mean_dice: out.best.val_mean_dice,
    };
    save_checkpoint(&path, &out.best_weights, &meta)?;
    Ok((graph, out.best_weights))
}

/// Starting weights for a cell of `target`, with the transplant report of
/// the final tier (absent when both tiers are disabled).
pub fn initial_weights(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    target: &ModelGraph,
    seed: u64,
) -> Result<(WeightBundle, Option<TransplantReport>)> {
    let crate::zoo::GraphKind::Segmentation(variant) = target.kind else {
        return Err(Error::Experiment("experiment cells train segmentation graphs".into()));
    };
    let (source, mode) = if cfg.tier2.enabled {
        (Some(tier2_source(cfg, ws, variant)?), cfg.tier2.mode)
    } else if cfg.tier1.enabled {
        (Some(tier1_source(cfg, ws, variant.backbone())?), cfg.tier1.mode)
    } else {
        (None, cfg.tier2.mode)
    };
    match source {
        Some((src_graph, src)) => {
            let plan = plan_transplant(&src_graph, &src, target, mode)?;
            let weights = apply_transplant(&plan, &src, seed)?;
            Ok((weights, Some(plan.report())))
        }
        None => Ok((WeightBundle::init(target, seed)?, None)),
    }
}
