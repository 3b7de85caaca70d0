//! Pixel-wise one-vs-rest confusion counts and the four overlap metrics.
//!
//! Conventions for degenerate denominators: Dice, sensitivity and specificity
//! are 1.0 when there is nothing to find (vacuous agreement); MCC is 0.0 when
//! any marginal is empty.

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::catalog::DiagnosisClass;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Pixels whose ground truth carries the class.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn metrics(&self) -> MetricSet {
        MetricSet {
            dice: dice(self),
            sensitivity: sensitivity(self),
            specificity: specificity(self),
            mcc: mcc(self),
        }
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, rhs: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
            tn: self.tn + rhs.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), Add::add)
    }
}

/// One-vs-rest counts for `class`; background and the other lesion classes
/// are all negatives.
pub fn confusion(pred: &LabelMap, truth: &LabelMap, class: DiagnosisClass) -> Result<ConfusionCounts> {
    if pred.view().dim() != truth.view().dim() {
        return Err(Error::Metrics(format!(
            "prediction is {:?} but ground truth is {:?}",
            pred.view().dim(),
            truth.view().dim()
        )));
    }
    let code = class.code();
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.view().iter().zip(truth.view().iter()) {
        match (p == code, t == code) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// TP / (TP + FN)
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// TN / (FP + TN)
pub fn specificity(c: &ConfusionCounts) -> f64 {
    let denom = c.fp + c.tn;
    if denom == 0 {
        1.0
    } else {
        c.tn as f64 / denom as f64
    }
}

/// 2TP / (2TP + FP + FN)
pub fn dice(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// (TP·TN − FP·FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))
///
/// The numerator is formed in 128-bit integers and the denominator as a
/// product of two square roots so that full-resolution pixel counts cannot
/// overflow.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let factors = [c.tp + c.fp, c.tp + c.fn_, c.tn + c.fp, c.tn + c.fn_];
    if factors.contains(&0) {
        return 0.0;
    }
    let num = c.tp as i128 * c.tn as i128 - c.fp as i128 * c.fn_ as i128;
    let left = (factors[0] as f64 * factors[1] as f64).sqrt();
    let right = (factors[2] as f64 * factors[3] as f64).sqrt();
    (num as f64 / left / right).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub mcc: f64,
}

impl MetricSet {
    pub const NAN: MetricSet = MetricSet {
        dice: f64::NAN,
        sensitivity: f64::NAN,
        specificity: f64::NAN,
        mcc: f64::NAN,
    };

    fn mean_of(sets: &[MetricSet]) -> Option<MetricSet> {
        if sets.is_empty() {
            return None;
        }
        let n = sets.len() as f64;
        Some(MetricSet {
            dice: sets.iter().map(|m| m.dice).sum::<f64>() / n,
            sensitivity: sets.iter().map(|m| m.sensitivity).sum::<f64>() / n,
            specificity: sets.iter().map(|m| m.specificity).sum::<f64>() / n,
            mcc: sets.iter().map(|m| m.mcc).sum::<f64>() / n,
        })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Dice => self.dice,
            Metric::Sensitivity => self.sensitivity,
            Metric::Specificity => self.specificity,
            Metric::Mcc => self.mcc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Dice,
    Specificity,
    Sensitivity,
    Mcc,
}

impl Metric {
    /// Column-group order of the comparison table.
    pub const TABLE_ORDER: [Metric; 4] = [
        Metric::Dice,
        Metric::Specificity,
        Metric::Sensitivity,
        Metric::Mcc,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Specificity => "Specificity",
            Metric::Sensitivity => "Sensitivity",
            Metric::Mcc => "MCC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Mean of per-image metrics over images whose ground truth contains the class.
    Macro,
    /// Metrics of the pooled counts.
    Micro,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 2] = [AggregationMode::Macro, AggregationMode::Micro];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Macro => "macro",
            AggregationMode::Micro => "micro",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(AggregationMode::Macro),
            "micro" => Ok(AggregationMode::Micro),
            other => Err(Error::Metrics(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// One aggregated (class, mode) entry. `metrics` is `None` when no image
/// qualified for macro averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub class: DiagnosisClass,
    pub mode: AggregationMode,
    pub images: usize,
    pub metrics: Option<MetricSet>,
}

pub fn aggregate(
    class: DiagnosisClass,
    per_image: &[ConfusionCounts],
    mode: AggregationMode,
) -> AggregateRow {
    match mode {
        AggregationMode::Macro => {
            let sets: Vec<MetricSet> = per_image
                .iter()
                .filter(|c| c.positives() > 0)
                .map(ConfusionCounts::metrics)
                .collect();
            AggregateRow {
                class,
                mode,
                images: sets.len(),
                metrics: MetricSet::mean_of(&sets),
            }
        }
        AggregationMode::Micro => AggregateRow {
            class,
            mode,
            images: per_image.len(),
            metrics: if per_image.is_empty() {
                None
            } else {
                Some(per_image.iter().copied().sum::<ConfusionCounts>().metrics())
            },
        },
    }
}

/// Per-image counts for all three lesion classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageConfusion {
    pub sample_id: String,
    pub counts: [ConfusionCounts; 3],
}

impl ImageConfusion {
    pub fn compute(sample_id: &str, pred: &LabelMap, truth: &LabelMap) -> Result<Self> {
        let mut counts = [ConfusionCounts::default(); 3];
        for (slot, class) in counts.iter_mut().zip(DiagnosisClass::ALL) {
            *slot = confusion(pred, truth, class)?;
        }
        Ok(ImageConfusion {
            sample_id: sample_id.to_string(),
            counts,
        })
    }
}

fn class_slot(class: DiagnosisClass) -> usize {
    class.code() as usize - 1
}

/// Aggregate a set of evaluated images into every (class, mode) row.
pub fn aggregate_all(images: &[ImageConfusion]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for class in DiagnosisClass::ALL {
        let per: Vec<ConfusionCounts> = images.iter().map(|i| i.counts[class_slot(class)]).collect();
        for mode in AggregationMode::ALL {
            rows.push(aggregate(class, &per, mode));
        }
    }
    rows
}

/// Mean over foreground classes present in the ground truth of the pooled
/// per-class Dice. Used for checkpoint selection.
pub fn mean_foreground_dice(images: &[ImageConfusion]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for class in DiagnosisClass::ALL {
        let pooled: ConfusionCounts = images.iter().map(|i| i.counts[class_slot(class)]).sum();
        if pooled.positives() > 0 {
            total += dice(&pooled);
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        total / n as f64
    }
}

/// Report row: a model, a class and an aggregation mode, with the mean and
/// standard deviation across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub class: DiagnosisClass,
    pub mode: AggregationMode,
    pub mean: MetricSet,
    pub sd: MetricSet,
    pub folds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn models(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model) {
                out.push(r.model.clone());
            }
        }
        out
    }

    pub fn find(&self, model: &str, class: DiagnosisClass, mode: AggregationMode) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.class == class && r.mode == mode)
    }

    /// Combine per-fold rows of one model into mean ± sample standard deviation.
    pub fn from_folds(model: &str, folds: &[Vec<AggregateRow>]) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for class in DiagnosisClass::ALL {
            for mode in AggregationMode::ALL {
                let sets: Vec<MetricSet> = folds
                    .iter()
                    .filter_map(|f| {
                        f.iter()
                            .find(|r| r.class == class && r.mode == mode)
                            .and_then(|r| r.metrics)
                    })
                    .collect();
                let mean = MetricSet::mean_of(&sets).unwrap_or(MetricSet::NAN);
                let sd = sample_sd(&sets, &mean);
                rows.push(ReportRow {
                    model: model.to_string(),
                    class,
                    mode,
                    mean,
                    sd,
                    folds: sets.len(),
                });
            }
        }
        rows
    }
}

fn sample_sd(sets: &[MetricSet], mean: &MetricSet) -> MetricSet {
    if sets.len() < 2 {
        return MetricSet {
            dice: 0.0,
            sensitivity: 0.0,
            specificity: 0.0,
            mcc: 0.0,
        };
    }
    let n = (sets.len() - 1) as f64;
    let sd = |f: fn(&MetricSet) -> f64| {
        (sets.iter().map(|m| (f(m) - f(mean)).powi(2)).sum::<f64>() / n).sqrt()
    };
    MetricSet {
        dice: sd(|m| m.dice),
        sensitivity: sd(|m| m.sensitivity),
        specificity: sd(|m| m.specificity),
        mcc: sd(|m| m.mcc),
    }
}
