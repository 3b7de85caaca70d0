//! SGD training of segmentation graphs with per-pixel softmax cross-entropy.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{dice, ConfusionCounts};
use crate::network::{argmax_channels, backward, forward_chw, forward_train};
use crate::weights::{atomic_write, WeightBundle};
use crate::zoo::{ModelGraph, DEFAULT_DROPOUT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 60,
            dropout_rate: DEFAULT_DROPOUT,
            momentum: 0.9,
            batch_size: 1,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return bad(format!("class_weights must be finite and non-negative, got {w:?}"));
            }
        }
        Ok(())
    }
}

/// One training example: an 8-bit RGB image and its label indices.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub target: Array2<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: RgbImage, target: Array2<u8>) -> Result<Self> {
        let id = id.into();
        let (w, h) = image.dimensions();
        if target.dim() != (h as usize, w as usize) {
            return Err(Error::Training(format!(
                "sample {id}: image is {h}x{w} but labels are {}x{}",
                target.nrows(),
                target.ncols()
            )));
        }
        Ok(Sample { id, image, target })
    }

    /// Whole-image classification example with a `1×1` target.
    pub fn classification(id: impl Into<String>, image: RgbImage, label: u8) -> Self {
        Sample {
            id: id.into(),
            image,
            target: Array2::from_elem((1, 1), label),
        }
    }

    /// Normalised `(3, H, W)` network input.
    pub fn input(&self) -> Array3<f64> {
        image_to_input(&self.image)
    }
}

/// Divisor applied to centred 8-bit intensities.
pub const INPUT_SCALE: f64 = 32.0;

/// Centre 8-bit RGB on 127.5 and divide by [`INPUT_SCALE`], in `(3, H, W)` layout.
pub fn image_to_input(image: &RgbImage) -> Array3<f64> {
    let (w, h) = image.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        (image.get_pixel(x as u32, y as u32)[c] as f64 - 127.5) / INPUT_SCALE
    })
}

/// Mean weighted negative log-likelihood of the target labels under a
/// per-pixel softmax, and its gradient with respect to the logits.
pub fn pixel_loss(
    logits: &Array3<f64>,
    target: ArrayView2<'_, u8>,
    class_weights: Option<&[f64]>,
) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = logits.dim();
    if target.dim() != (h, w) {
        return Err(Error::Training(format!(
            "logits are {h}x{w} but target is {}x{}",
            target.nrows(),
            target.ncols()
        )));
    }
    if let Some(cw) = class_weights {
        if cw.len() != c {
            return Err(Error::Training(format!("{} class weights for {c} classes", cw.len())));
        }
    }
    let n = (h * w) as f64;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    let mut loss = 0.0;
    let mut probs = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]] as usize;
            if t >= c {
                return Err(Error::Training(format!(
                    "target index {t} at ({y}, {x}) is out of range for {c} classes"
                )));
            }
            let m = (0..c).map(|k| logits[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, p) in probs.iter_mut().enumerate() {
                *p = (logits[[k, y, x]] - m).exp();
                z += *p;
            }
            let wt = class_weights.map_or(1.0, |cw| cw[t]);
            loss += wt * (z.ln() - (logits[[t, y, x]] - m));
            for (k, p) in probs.iter().enumerate() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                grad[[k, y, x]] = wt * (p / z - onehot) / n;
            }
        }
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mean_dice: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: WeightBundle,
    pub velocity: WeightBundle,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(weights: WeightBundle) -> Self {
        TrainState {
            velocity: weights.zeros_like(),
            weights,
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// `v ← μ·v − lr·g`, `w ← w + v` for every tensor.
pub fn sgd_step(state: &mut TrainState, gradients: &WeightBundle, config: &TrainConfig) -> Result<()> {
    state.velocity.scale(config.momentum);
    state.velocity.add_scaled(-config.learning_rate, gradients)?;
    state.weights.add_scaled(1.0, &state.velocity)
}

/// Mean over classes `1..num_classes` present in the truth of the Dice of the
/// pooled pixel counts. NaN when no foreground class occurs.
pub fn mean_foreground_dice(preds: &[Array2<u8>], truths: &[Array2<u8>], num_classes: usize) -> f64 {
    let mut counts = vec![ConfusionCounts::default(); num_classes];
    let mut present = vec![false; num_classes];
    for (p, t) in preds.iter().zip(truths) {
        for (&pv, &tv) in p.iter().zip(t.iter()) {
            present[tv as usize] = true;
            for (k, c) in counts.iter_mut().enumerate().skip(1) {
                match (pv as usize == k, tv as usize == k) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
        }
    }
    let scores: Vec<f64> = (1..num_classes).filter(|&k| present[k]).map(|k| dice(&counts[k])).collect();
    if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Loss and mean foreground Dice of `weights` on `samples` without dropout.
pub fn evaluate(
    graph: &ModelGraph,
    weights: &WeightBundle,
    samples: &[Sample],
    class_weights: Option<&[f64]>,
) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = forward_chw(graph, weights, &s.input())?;
        loss += pixel_loss(&logits, s.target.view(), class_weights)?.0;
        preds.push(argmax_channels(&logits));
    }
    let truths: Vec<Array2<u8>> = samples.iter().map(|s| s.target.clone()).collect();
    Ok((
        loss / samples.len() as f64,
        mean_foreground_dice(&preds, &truths, graph.num_classes),
    ))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub best_weights: WeightBundle,
    pub best: EpochRecord,
}

/// Optimise `init` on `train`, keeping the epoch with the highest validation
/// mean foreground Dice (the last epoch when validation gives no score).
pub fn train(
    graph: &ModelGraph,
    init: WeightBundle,
    train: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    init.check_against(graph)?;
    let graph = graph.with_dropout(config.dropout_rate);
    let cw = config.class_weights.as_deref();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = TrainState::new(init);
    let mut best: Option<(EpochRecord, WeightBundle)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = state.weights.zeros_like();
            for &i in batch {
                let s = &train[i];
                let tape = forward_train(&graph, &state.weights, &s.input(), &mut rng)?;
                let (loss, dlogits) = pixel_loss(tape.output(), s.target.view(), cw)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        sample: s.id.clone(),
                        msg: format!("loss is {loss}"),
                    });
                }
                total += loss;
                let g = backward(&graph, &state.weights, &tape, dlogits)?;
                grads.add_scaled(1.0 / batch.len() as f64, &g)?;
            }
            sgd_step(&mut state, &grads, config)?;
            if !state.weights.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    sample: train[*batch.last().unwrap()].id.clone(),
                    msg: "weights became non-finite".into(),
                });
            }
        }
        state.epoch = epoch;
        let (val_loss, val_dice) = evaluate(&graph, &state.weights, validation, cw)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
            val_mean_dice: val_dice,
        };
        log::info!(
            "epoch {epoch}/{}: train loss {:.5}, val loss {:.5}, val dice {:.4}",
            config.epochs,
            record.train_loss,
            val_loss,
            val_dice
        );
        state.history.push(record);
        let improved = match &best {
            None => true,
            Some((b, _)) => {
                if val_dice.is_nan() {
                    b.val_mean_dice.is_nan()
                } else {
                    b.val_mean_dice.is_nan() || val_dice > b.val_mean_dice
                }
            }
        };
        if improved {
            best = Some((record, state.weights.clone()));
        }
    }
    let (best, best_weights) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        state,
        best_weights,
        best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub graph: String,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub val_mean_dice: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the weights and a JSON sidecar with the same stem.
pub fn save_checkpoint(path: &Path, weights: &WeightBundle, meta: &CheckpointMeta) -> Result<()> {
    let mut md = HashMap::new();
    md.insert("graph".to_string(), meta.graph.clone());
    md.insert("epoch".to_string(), meta.epoch.to_string());
    weights.save(path, Some(md))?;
    atomic_write(&sidecar_path(path), serde_json::to_string_pretty(meta)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(WeightBundle, CheckpointMeta)> {
    let weights = WeightBundle::load(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok((weights, serde_json::from_str(&text)?))
}

/// CSV with columns `epoch,train_loss,val_loss,val_mean_dice`.
pub fn write_training_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "epoch,train_loss,val_loss,val_mean_dice").expect("write to Vec");
    for r in history {
        writeln!(buf, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_mean_dice).expect("write to Vec");
    }
    atomic_write(path, &buf)
}
