//! Transfer of learned weights between graphs of the same backbone family.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::weights::{atomic_write, init_layer, InitRule, LayerParams, WeightBundle};
use crate::zoo::{ConvRole, LayerKind, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransplantMode {
    /// Backbone and classifier convolutions only; class heads start fresh.
    Partial,
    /// Every layer whose tensors fit; class heads of a different width are
    /// reinitialised.
    Full,
}

impl std::str::FromStr for TransplantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "partial" => Ok(TransplantMode::Partial),
            "full" => Ok(TransplantMode::Full),
            _ => Err(Error::Transplant(format!("unknown transplant mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Copy,
    /// Dense weights reshaped into an equivalent convolution.
    ReshapeCopy,
    Reinitialize,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Copy => "copy",
            Action::ReshapeCopy => "reshape-copy",
            Action::Reinitialize => "reinitialize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMatch {
    pub source: Option<String>,
    pub target: String,
    pub action: Action,
    pub source_shape: Option<Vec<usize>>,
    pub target_shape: Vec<usize>,
}

/// Outcome counts plus one entry per learnable target layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransplantReport {
    pub mode: TransplantMode,
    pub copied: usize,
    pub reshape_copied: usize,
    pub reinitialized: usize,
    pub layers: Vec<LayerMatch>,
}

impl TransplantReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<14} {:<22} {:<22}", "layer", "action", "source shape", "target shape");
        for m in &self.layers {
            let src = m
                .source_shape
                .as_ref()
                .map_or_else(|| "-".to_string(), |s| format!("{s:?}"));
            let _ = writeln!(
                out,
                "{:<16} {:<14} {:<22} {:<22}",
                m.target,
                m.action.as_str(),
                src,
                format!("{:?}", m.target_shape)
            );
        }
        let _ = writeln!(
            out,
            "copied {}, reshape-copied {}, reinitialized {}",
            self.copied, self.reshape_copied, self.reinitialized
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.txt` and `<stem>.json` next to each other.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        atomic_write(&dir.join(format!("{stem}.txt")), self.to_table().as_bytes())?;
        atomic_write(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransplantPlan {
    pub mode: TransplantMode,
    pub target: ModelGraph,
    pub layer_matches: Vec<LayerMatch>,
}

impl TransplantPlan {
    pub fn report(&self) -> TransplantReport {
        let count = |a: Action| self.layer_matches.iter().filter(|m| m.action == a).count();
        TransplantReport {
            mode: self.mode,
            copied: count(Action::Copy),
            reshape_copied: count(Action::ReshapeCopy),
            reinitialized: count(Action::Reinitialize),
            layers: self.layer_matches.clone(),
        }
    }
}

fn is_class_head(kind: &LayerKind) -> bool {
    matches!(kind, LayerKind::ScoreConv { .. } | LayerKind::TransposedConv { .. })
}

fn full_shape(p: &LayerParams) -> Vec<usize> {
    p.weight.shape().to_vec()
}

/// Match every learnable layer of `target` against `source`.
pub fn plan_transplant(
    source_graph: &ModelGraph,
    source: &WeightBundle,
    target: &ModelGraph,
    mode: TransplantMode,
) -> Result<TransplantPlan> {
    let (sb, tb) = (source_graph.kind.backbone(), target.kind.backbone());
    if sb != tb {
        return Err(Error::Transplant(format!(
            "backbone family mismatch: source is {}, target is {}",
            sb.slug(),
            tb.slug()
        )));
    }
    let mut matches = Vec::new();
    for layer in target.learnable_layers() {
        let (wshape, _) = layer.kind.param_shapes().expect("learnable layer");
        let eligible = match (&layer.kind, mode) {
            (LayerKind::Conv { .. }, _) => true,
            (_, TransplantMode::Partial) => false,
            (_, TransplantMode::Full) => true,
        };
        let src_layer = source_graph.layer(&layer.name).filter(|_| eligible);
        let reinit = LayerMatch {
            source: None,
            target: layer.name.clone(),
            action: Action::Reinitialize,
            source_shape: None,
            target_shape: wshape.clone(),
        };
        let Some(src_layer) = src_layer else {
            matches.push(reinit);
            continue;
        };
        let params = source.param(&layer.name).map_err(|_| {
            Error::Transplant(format!("source bundle has no tensors for layer `{}`", layer.name))
        })?;
        let sshape = full_shape(params);
        let action = match (&src_layer.kind, &layer.kind) {
            (LayerKind::Dense { in_features, out_features }, LayerKind::Conv { in_channels, out_channels, kernel, .. })
                if *out_features == *out_channels && *in_features == in_channels * kernel * kernel =>
            {
                Some(Action::ReshapeCopy)
            }
            _ if sshape == wshape && src_layer.kind.tag() == layer.kind.tag() => Some(Action::Copy),
            _ => None,
        };
        match action {
            Some(a) => matches.push(LayerMatch {
                source: Some(src_layer.name.clone()),
                action: a,
                source_shape: Some(sshape),
                ..reinit
            }),
            None if mode == TransplantMode::Full && is_class_head(&layer.kind) => matches.push(LayerMatch {
                source_shape: Some(sshape),
                ..reinit
            }),
            None => {
                return Err(Error::Transplant(format!(
                    "layer `{}`: source shape {:?} cannot be transferred to {:?}",
                    layer.name, sshape, wshape
                )))
            }
        }
    }
    Ok(TransplantPlan {
        mode,
        target: target.clone(),
        layer_matches: matches,
    })
}

/// Build the target bundle: copies are bit-exact, score layers are zeroed and
/// upsampling layers get bilinear kernels.
pub fn apply_transplant(plan: &TransplantPlan, source: &WeightBundle, init_seed: u64) -> Result<WeightBundle> {
    let mut out = WeightBundle::new();
    for m in &plan.layer_matches {
        let layer = plan
            .target
            .layer(&m.target)
            .ok_or_else(|| Error::Transplant(format!("plan names unknown target layer `{}`", m.target)))?;
        let params = match m.action {
            Action::Reinitialize => {
                let rule = InitRule::for_layer(&layer.kind).expect("learnable layer");
                init_layer(layer, rule, init_seed)?
            }
            Action::Copy | Action::ReshapeCopy => {
                let name = m.source.as_deref().unwrap_or(&m.target);
                let src = source
                    .get(name)
                    .ok_or_else(|| Error::Transplant(format!("source bundle is missing tensor `{name}`")))?;
                let mut p = src.clone();
                if m.action == Action::ReshapeCopy {
                    let LayerKind::Conv { in_channels, kernel, .. } = layer.kind else {
                        unreachable!("reshape-copy targets a convolution")
                    };
                    let dense = src.weight2()?.to_owned();
                    p.weight = convolutionalize_classifier(&dense, (kernel, kernel), in_channels)?.into_dyn();
                }
                if full_shape(&p) != m.target_shape {
                    return Err(Error::Transplant(format!(
                        "tensor `{name}` has shape {:?}, plan expects {:?}",
                        p.weight.shape(),
                        m.target_shape
                    )));
                }
                p
            }
        };
        out.insert(&m.target, params);
    }
    out.check_against(&plan.target)?;
    Ok(out)
}

/// Reshape a dense `(out, channels_in·h·w)` matrix into an `(out, channels_in, h, w)`
/// convolution kernel with identical values.
pub fn convolutionalize_classifier(
    dense: &Array2<f64>,
    spatial: (usize, usize),
    channels_in: usize,
) -> Result<Array4<f64>> {
    let (o, n) = dense.dim();
    let (h, w) = spatial;
    if n != channels_in * h * w {
        return Err(Error::Transplant(format!(
            "dense matrix has {n} inputs, expected {channels_in}x{h}x{w} = {}",
            channels_in * h * w
        )));
    }
    let flat: Vec<f64> = dense.iter().copied().collect();
    Ok(Array4::from_shape_vec((o, channels_in, h, w), flat).expect("length checked"))
}

/// Layers whose role is backbone or classifier, in graph order.
pub fn feature_layers(graph: &ModelGraph) -> Vec<&str> {
    graph
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv { role: ConvRole::Backbone | ConvRole::Classifier, .. }))
        .map(|l| l.name.as_str())
        .collect()
}
