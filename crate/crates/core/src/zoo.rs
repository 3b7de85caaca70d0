//! Declarative FCN architectures: FCN-AlexNet, FCN-32s, FCN-16s, FCN-8s, and
//! the classification networks their backbones come from.
//!
//! Layer names follow the reference FCN models so that converted checkpoints
//! can be loaded by name. Crop offsets are not hard-coded; they are derived
//! from the affine map between each node's coordinates and input pixels.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv_out_size, pool_out_size, transposed_out_size};

pub const DEFAULT_DROPOUT: f64 = 0.33;

/// Padding of the first convolution that makes every input size valid.
const FCN_INPUT_PAD: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "fcn-alexnet")]
    FcnAlexNet,
    #[serde(rename = "fcn32s")]
    Fcn32s,
    #[serde(rename = "fcn16s")]
    Fcn16s,
    #[serde(rename = "fcn8s")]
    Fcn8s,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::FcnAlexNet,
        Variant::Fcn32s,
        Variant::Fcn16s,
        Variant::Fcn8s,
    ];

    pub fn backbone(self) -> Backbone {
        match self {
            Variant::FcnAlexNet => Backbone::AlexNet,
            _ => Backbone::Vgg16,
        }
    }

    /// Stride of the last upsampling layer.
    pub fn output_stride(self) -> usize {
        match self {
            Variant::FcnAlexNet | Variant::Fcn32s => 32,
            Variant::Fcn16s => 16,
            Variant::Fcn8s => 8,
        }
    }

    pub fn skip_fusions(self) -> usize {
        match self {
            Variant::FcnAlexNet | Variant::Fcn32s => 0,
            Variant::Fcn16s => 1,
            Variant::Fcn8s => 2,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::FcnAlexNet => "fcn-alexnet",
            Variant::Fcn32s => "fcn32s",
            Variant::Fcn16s => "fcn16s",
            Variant::Fcn8s => "fcn8s",
        }
    }

    /// Display name used in reports.
    pub fn title(self) -> &'static str {
        match self {
            Variant::FcnAlexNet => "FCN-AlexNet",
            Variant::Fcn32s => "FCN-32s",
            Variant::Fcn16s => "FCN-16s",
            Variant::Fcn8s => "FCN-8s",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "fcnalexnet" | "alexnet" => Ok(Variant::FcnAlexNet),
            "fcn32s" | "32s" => Ok(Variant::Fcn32s),
            "fcn16s" | "16s" => Ok(Variant::Fcn16s),
            "fcn8s" | "8s" => Ok(Variant::Fcn8s),
            _ => Err(Error::Graph(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    AlexNet,
    Vgg16,
}

impl Backbone {
    /// Side of the square input the classification network is defined on.
    pub fn classifier_input(self) -> usize {
        match self {
            Backbone::AlexNet => 227,
            Backbone::Vgg16 => 224,
        }
    }

    /// Spatial extent of the last pooled map at `classifier_input()`.
    pub fn classifier_spatial(self) -> usize {
        match self {
            Backbone::AlexNet => 6,
            Backbone::Vgg16 => 7,
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Backbone::AlexNet => "alexnet",
            Backbone::Vgg16 => "vgg16",
        }
    }
}

/// Channel widths. `stages` are the five convolution stages (VGG) or the five
/// convolutions (AlexNet); `fc` is the width of fc6/fc7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Widths {
    pub stages: [usize; 5],
    pub fc: usize,
}

impl Widths {
    pub fn reference(backbone: Backbone) -> Self {
        match backbone {
            Backbone::AlexNet => Widths {
                stages: [96, 256, 384, 384, 256],
                fc: 4096,
            },
            Backbone::Vgg16 => Widths {
                stages: [64, 128, 256, 512, 512],
                fc: 4096,
            },
        }
    }

    /// Desk-scale widths used for tests and toy experiments.
    pub fn tiny(backbone: Backbone) -> Self {
        match backbone {
            Backbone::AlexNet => Widths {
                stages: [8, 12, 16, 16, 16],
                fc: 32,
            },
            Backbone::Vgg16 => Widths {
                stages: [4, 8, 8, 16, 16],
                fc: 32,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    /// Convolution of the feature-extraction backbone.
    Backbone,
    /// Classifier layer (fc6/fc7) expressed as a convolution.
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        role: ConvRole,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
    /// 1×1 convolution producing class scores.
    ScoreConv {
        in_channels: usize,
        out_channels: usize,
    },
    TransposedConv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Crop input 0 to the spatial size of input 1 at `(offset, offset)`.
    Crop {
        offset: usize,
    },
    /// Element-wise sum of the two inputs.
    Add,
    /// Fully connected layer on the flattened input (classification networks only).
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn is_learnable(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. }
                | LayerKind::ScoreConv { .. }
                | LayerKind::TransposedConv { .. }
                | LayerKind::Dense { .. }
        )
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv { .. } => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "pool",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::ScoreConv { .. } => "score-conv",
            LayerKind::TransposedConv { .. } => "transposed-conv",
            LayerKind::Crop { .. } => "crop",
            LayerKind::Add => "add-fusion",
            LayerKind::Dense { .. } => "dense",
        }
    }

    /// Shape of the weight tensor, and of the bias when the layer has one.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Option<usize>)> {
        match *self {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                Some(out_channels),
            )),
            LayerKind::ScoreConv {
                in_channels,
                out_channels,
            } => Some((vec![out_channels, in_channels, 1, 1], Some(out_channels))),
            LayerKind::TransposedConv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![in_channels, out_channels, kernel, kernel], None)),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], Some(out_features))),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Indices of producer layers.
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Segmentation(Variant),
    Classifier(Backbone),
}

impl GraphKind {
    pub fn backbone(self) -> Backbone {
        match self {
            GraphKind::Segmentation(v) => v.backbone(),
            GraphKind::Classifier(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub kind: GraphKind,
    pub num_classes: usize,
    pub widths: Widths,
    pub layers: Vec<LayerSpec>,
}

/// Affine map from a node's coordinates to input-pixel coordinates:
/// `input = scale * x + shift`. Values are dyadic, so f64 is exact.
#[derive(Debug, Clone, Copy, PartialEq)]
struct CoordMap {
    scale: f64,
    shift: f64,
}

impl CoordMap {
    const IDENTITY: CoordMap = CoordMap {
        scale: 1.0,
        shift: 0.0,
    };

    fn through_conv(self, kernel: usize, stride: usize, pad: usize) -> Self {
        CoordMap {
            scale: self.scale * stride as f64,
            shift: self.shift + self.scale * ((kernel as f64 - 1.0) / 2.0 - pad as f64),
        }
    }

    fn through_transposed(self, kernel: usize, stride: usize, pad: usize) -> Self {
        CoordMap {
            scale: self.scale / stride as f64,
            shift: self.shift - self.scale * ((kernel as f64 - 1.0) / 2.0 - pad as f64) / stride as f64,
        }
    }
}

struct GraphBuilder {
    layers: Vec<LayerSpec>,
    index: BTreeMap<String, usize>,
    maps: Vec<Option<CoordMap>>,
}

impl GraphBuilder {
    fn new(channels: usize) -> Self {
        let mut b = GraphBuilder {
            layers: Vec::new(),
            index: BTreeMap::new(),
            maps: Vec::new(),
        };
        b.layers.push(LayerSpec {
            name: "data".into(),
            kind: LayerKind::Input { channels },
            inputs: vec![],
        });
        b.index.insert("data".into(), 0);
        b.maps.push(Some(CoordMap::IDENTITY));
        b
    }

    fn idx(&self, name: &str) -> usize {
        self.index[name]
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> &mut Self {
        let inputs: Vec<usize> = inputs.iter().map(|n| self.idx(n)).collect();
        let parent = inputs.first().and_then(|&i| self.maps[i]);
        let map = match &kind {
            LayerKind::Conv {
                kernel, stride, pad, ..
            } => parent.map(|m| m.through_conv(*kernel, *stride, *pad)),
            LayerKind::MaxPool { kernel, stride } => parent.map(|m| m.through_conv(*kernel, *stride, 0)),
            LayerKind::ScoreConv { .. } | LayerKind::Relu | LayerKind::Dropout { .. } => parent,
            LayerKind::TransposedConv {
                kernel, stride, pad, ..
            } => parent.map(|m| m.through_transposed(*kernel, *stride, *pad)),
            LayerKind::Crop { .. } => self.maps[inputs[1]],
            LayerKind::Add => parent,
            LayerKind::Dense { .. } | LayerKind::Input { .. } => None,
        };
        self.index.insert(name.to_string(), self.layers.len());
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            inputs,
        });
        self.maps.push(map);
        self
    }

    /// Crop `src` onto `reference`, deriving the offset from the coordinate maps.
    fn crop(&mut self, name: &str, src: &str, reference: &str) -> &mut Self {
        let a = self.maps[self.idx(src)].expect("crop source has a coordinate map");
        let b = self.maps[self.idx(reference)].expect("crop reference has a coordinate map");
        assert_eq!(a.scale, b.scale, "crop `{name}` joins maps of different scale");
        let offset = (b.shift - a.shift) / a.scale;
        assert!(
            offset >= 0.0 && offset.fract() == 0.0,
            "crop `{name}` has non-integral offset {offset}"
        );
        self.push(
            name,
            LayerKind::Crop {
                offset: offset as usize,
            },
            &[src, reference],
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, input: &str, cin: usize, cout: usize, k: usize, s: usize, p: usize, role: ConvRole) -> &mut Self {
        self.push(
            name,
            LayerKind::Conv {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: s,
                pad: p,
                role,
            },
            &[input],
        )
    }

    fn finish(self, kind: GraphKind, num_classes: usize, widths: Widths) -> ModelGraph {
        ModelGraph {
            kind,
            num_classes,
            widths,
            layers: self.layers,
        }
    }
}

const VGG_STAGE_DEPTH: [usize; 5] = [2, 2, 3, 3, 3];

/// VGG16 convolutions. Returns the name of the last pooling layer.
fn vgg_backbone(b: &mut GraphBuilder, widths: &Widths, first_pad: usize) {
    let mut prev = "data".to_string();
    let mut cin = 3;
    for (stage, (&depth, &cout)) in VGG_STAGE_DEPTH.iter().zip(widths.stages.iter()).enumerate() {
        let st = stage + 1;
        for i in 1..=depth {
            let pad = if st == 1 && i == 1 { first_pad } else { 1 };
            let conv = format!("conv{st}_{i}");
            let relu = format!("relu{st}_{i}");
            b.conv(&conv, &prev, cin, cout, 3, 1, pad, ConvRole::Backbone);
            b.push(&relu, LayerKind::Relu, &[&conv]);
            prev = relu;
            cin = cout;
        }
        let pool = format!("pool{st}");
        b.push(&pool, LayerKind::MaxPool { kernel: 2, stride: 2 }, &[&prev]);
        prev = pool;
    }
}

fn alexnet_backbone(b: &mut GraphBuilder, widths: &Widths, first_pad: usize) {
    let [c1, c2, c3, c4, c5] = widths.stages;
    b.conv("conv1", "data", 3, c1, 11, 4, first_pad, ConvRole::Backbone)
        .push("relu1", LayerKind::Relu, &["conv1"])
        .push("pool1", LayerKind::MaxPool { kernel: 3, stride: 2 }, &["relu1"])
        .conv("conv2", "pool1", c1, c2, 5, 1, 2, ConvRole::Backbone)
        .push("relu2", LayerKind::Relu, &["conv2"])
        .push("pool2", LayerKind::MaxPool { kernel: 3, stride: 2 }, &["relu2"])
        .conv("conv3", "pool2", c2, c3, 3, 1, 1, ConvRole::Backbone)
        .push("relu3", LayerKind::Relu, &["conv3"])
        .conv("conv4", "relu3", c3, c4, 3, 1, 1, ConvRole::Backbone)
        .push("relu4", LayerKind::Relu, &["conv4"])
        .conv("conv5", "relu4", c4, c5, 3, 1, 1, ConvRole::Backbone)
        .push("relu5", LayerKind::Relu, &["conv5"])
        .push("pool5", LayerKind::MaxPool { kernel: 3, stride: 2 }, &["relu5"]);
}

fn backbone_layers(b: &mut GraphBuilder, backbone: Backbone, widths: &Widths, first_pad: usize) {
    match backbone {
        Backbone::AlexNet => alexnet_backbone(b, widths, first_pad),
        Backbone::Vgg16 => vgg_backbone(b, widths, first_pad),
    }
}

fn upsample(b: &mut GraphBuilder, name: &str, input: &str, nc: usize, kernel: usize, stride: usize) {
    b.push(
        name,
        LayerKind::TransposedConv {
            in_channels: nc,
            out_channels: nc,
            kernel,
            stride,
            pad: 0,
        },
        &[input],
    );
}

fn score(b: &mut GraphBuilder, name: &str, input: &str, cin: usize, nc: usize) {
    b.push(
        name,
        LayerKind::ScoreConv {
            in_channels: cin,
            out_channels: nc,
        },
        &[input],
    );
}

/// Build a segmentation graph with reference channel widths.
pub fn build_graph(variant: Variant, num_classes: usize) -> Result<ModelGraph> {
    build_graph_with(variant, num_classes, Widths::reference(variant.backbone()))
}

pub fn build_graph_with(variant: Variant, num_classes: usize, widths: Widths) -> Result<ModelGraph> {
    if num_classes < 2 {
        return Err(Error::Graph(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    let backbone = variant.backbone();
    let nc = num_classes;
    let mut b = GraphBuilder::new(3);
    backbone_layers(&mut b, backbone, &widths, FCN_INPUT_PAD);
    let c5 = widths.stages[4];
    let k6 = backbone.classifier_spatial();
    b.conv("fc6", "pool5", c5, widths.fc, k6, 1, 0, ConvRole::Classifier)
        .push("relu6", LayerKind::Relu, &["fc6"])
        .push("drop6", LayerKind::Dropout { rate: DEFAULT_DROPOUT }, &["relu6"])
        .conv("fc7", "drop6", widths.fc, widths.fc, 1, 1, 0, ConvRole::Classifier)
        .push("relu7", LayerKind::Relu, &["fc7"])
        .push("drop7", LayerKind::Dropout { rate: DEFAULT_DROPOUT }, &["relu7"]);
    score(&mut b, "score_fr", "drop7", widths.fc, nc);

    match variant {
        Variant::FcnAlexNet => {
            upsample(&mut b, "upscore", "score_fr", nc, 63, 32);
            b.crop("score", "upscore", "data");
        }
        Variant::Fcn32s => {
            upsample(&mut b, "upscore", "score_fr", nc, 64, 32);
            b.crop("score", "upscore", "data");
        }
        Variant::Fcn16s => {
            upsample(&mut b, "upscore2", "score_fr", nc, 4, 2);
            score(&mut b, "score_pool4", "pool4", widths.stages[3], nc);
            b.crop("score_pool4c", "score_pool4", "upscore2");
            b.push("fuse_pool4", LayerKind::Add, &["upscore2", "score_pool4c"]);
            upsample(&mut b, "upscore16", "fuse_pool4", nc, 32, 16);
            b.crop("score", "upscore16", "data");
        }
        Variant::Fcn8s => {
            upsample(&mut b, "upscore2", "score_fr", nc, 4, 2);
            score(&mut b, "score_pool4", "pool4", widths.stages[3], nc);
            b.crop("score_pool4c", "score_pool4", "upscore2");
            b.push("fuse_pool4", LayerKind::Add, &["upscore2", "score_pool4c"]);
            upsample(&mut b, "upscore_pool4", "fuse_pool4", nc, 4, 2);
            score(&mut b, "score_pool3", "pool3", widths.stages[2], nc);
            b.crop("score_pool3c", "score_pool3", "upscore_pool4");
            b.push("fuse_pool3", LayerKind::Add, &["upscore_pool4", "score_pool3c"]);
            upsample(&mut b, "upscore8", "fuse_pool3", nc, 16, 8);
            b.crop("score", "upscore8", "data");
        }
    }
    Ok(b.finish(GraphKind::Segmentation(variant), nc, widths))
}

/// Classification network (the source of partial transfer): the same
/// backbone without the large input padding, followed by dense fc6/fc7/fc8
/// on a `classifier_input()`-sized square image.
pub fn build_classifier(backbone: Backbone, num_classes: usize, widths: Widths) -> Result<ModelGraph> {
    if num_classes < 2 {
        return Err(Error::Graph(format!(
            "num_classes must be at least 2, got {num_classes}"
        )));
    }
    let mut b = GraphBuilder::new(3);
    let first_pad = match backbone {
        Backbone::AlexNet => 0,
        Backbone::Vgg16 => 1,
    };
    backbone_layers(&mut b, backbone, &widths, first_pad);
    let s = backbone.classifier_spatial();
    let flat = widths.stages[4] * s * s;
    b.push(
        "fc6",
        LayerKind::Dense {
            in_features: flat,
            out_features: widths.fc,
        },
        &["pool5"],
    )
    .push("relu6", LayerKind::Relu, &["fc6"])
    .push("drop6", LayerKind::Dropout { rate: DEFAULT_DROPOUT }, &["relu6"])
    .push(
        "fc7",
        LayerKind::Dense {
            in_features: widths.fc,
            out_features: widths.fc,
        },
        &["drop6"],
    )
    .push("relu7", LayerKind::Relu, &["fc7"])
    .push("drop7", LayerKind::Dropout { rate: DEFAULT_DROPOUT }, &["relu7"])
    .push(
        "fc8",
        LayerKind::Dense {
            in_features: widths.fc,
            out_features: num_classes,
        },
        &["drop7"],
    );
    Ok(b.finish(GraphKind::Classifier(backbone), num_classes, widths))
}

/// (channels, height, width) of a node's output.
pub type NodeShape = (usize, usize, usize);

impl ModelGraph {
    pub fn output_index(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn learnable_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind.is_learnable())
    }

    pub fn count_kind(&self, tag: &str) -> usize {
        self.layers.iter().filter(|l| l.kind.tag() == tag).count()
    }

    /// Copy of the graph with every dropout layer set to `rate`.
    pub fn with_dropout(&self, rate: f64) -> ModelGraph {
        let mut g = self.clone();
        for l in &mut g.layers {
            if let LayerKind::Dropout { rate: r } = &mut l.kind {
                *r = rate;
            }
        }
        g
    }

    /// Propagate an input of `(height, width)` through the graph.
    pub fn infer_shapes(&self, input: (usize, usize)) -> Result<Vec<NodeShape>> {
        let mut shapes: Vec<NodeShape> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let inp = |i: usize| shapes[layer.inputs[i]];
            let err = |msg: String| Error::shape(&layer.name, msg);
            let shape = match layer.kind {
                LayerKind::Input { channels } => {
                    if input.0 == 0 || input.1 == 0 {
                        return Err(err("empty input".into()));
                    }
                    (channels, input.0, input.1)
                }
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    let (c, h, w) = inp(0);
                    if c != in_channels {
                        return Err(err(format!("expects {in_channels} channels, got {c}")));
                    }
                    match (conv_out_size(h, kernel, stride, pad), conv_out_size(w, kernel, stride, pad)) {
                        (Some(oh), Some(ow)) => (out_channels, oh, ow),
                        _ => return Err(err(format!("kernel {kernel} does not fit a {h}x{w} input"))),
                    }
                }
                LayerKind::ScoreConv {
                    in_channels,
                    out_channels,
                } => {
                    let (c, h, w) = inp(0);
                    if c != in_channels {
                        return Err(err(format!("expects {in_channels} channels, got {c}")));
                    }
                    (out_channels, h, w)
                }
                LayerKind::Relu | LayerKind::Dropout { .. } => inp(0),
                LayerKind::MaxPool { kernel, stride } => {
                    let (c, h, w) = inp(0);
                    match (pool_out_size(h, kernel, stride), pool_out_size(w, kernel, stride)) {
                        (Some(oh), Some(ow)) => (c, oh, ow),
                        _ => return Err(err("empty pooling input".into())),
                    }
                }
                LayerKind::TransposedConv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (c, h, w) = inp(0);
                    if c != in_channels {
                        return Err(err(format!("expects {in_channels} channels, got {c}")));
                    }
                    match (
                        transposed_out_size(h, kernel, stride, pad),
                        transposed_out_size(w, kernel, stride, pad),
                    ) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (out_channels, oh, ow),
                        _ => return Err(err("padding exceeds output".into())),
                    }
                }
                LayerKind::Crop { offset } => {
                    let (c, h, w) = inp(0);
                    let (_, rh, rw) = inp(1);
                    if h < offset + rh || w < offset + rw {
                        return Err(err(format!(
                            "cannot crop {rh}x{rw} at offset {offset} from {h}x{w}"
                        )));
                    }
                    (c, rh, rw)
                }
                LayerKind::Add => {
                    let a = inp(0);
                    let b = inp(1);
                    if a != b {
                        return Err(err(format!("operands differ: {a:?} vs {b:?}")));
                    }
                    a
                }
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => {
                    let (c, h, w) = inp(0);
                    if c * h * w != in_features {
                        return Err(err(format!(
                            "expects {in_features} features, got {c}x{h}x{w}"
                        )));
                    }
                    (out_features, 1, 1)
                }
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Smallest square input side the graph accepts.
    pub fn min_input_size(&self) -> usize {
        (1..=1024)
            .find(|&s| self.infer_shapes((s, s)).is_ok())
            .unwrap_or(usize::MAX)
    }

    /// Plain-text listing: one line per layer with its output shape.
    pub fn summary(&self, input: (usize, usize)) -> Result<String> {
        let shapes = self.infer_shapes(input)?;
        let mut out = String::new();
        let title = match self.kind {
            GraphKind::Segmentation(v) => v.title().to_string(),
            GraphKind::Classifier(b) => format!("{} classifier", b.slug()),
        };
        let _ = writeln!(
            out,
            "{title}  classes={}  input={}x{}",
            self.num_classes, input.0, input.1
        );
        for (layer, shape) in self.layers.iter().zip(&shapes) {
            let inputs: Vec<&str> = layer
                .inputs
                .iter()
                .map(|&i| self.layers[i].name.as_str())
                .collect();
            let detail = match &layer.kind {
                LayerKind::Conv {
                    kernel, stride, pad, ..
                } => format!("k{kernel} s{stride} p{pad}"),
                LayerKind::TransposedConv { kernel, stride, .. } => format!("k{kernel} s{stride}"),
                LayerKind::MaxPool { kernel, stride } => format!("k{kernel} s{stride}"),
                LayerKind::Crop { offset } => format!("offset {offset}"),
                LayerKind::Dropout { rate } => format!("p={rate}"),
                _ => String::new(),
            };
            let _ = writeln!(
                out,
                "{:<14} {:<16} {:<12} {:>5}x{:>4}x{:<4} <- {}",
                layer.name,
                layer.kind.tag(),
                detail,
                shape.0,
                shape.1,
                shape.2,
                inputs.join(", ")
            );
        }
        Ok(out)
    }
}
