//! Named parameter tensors, initialisers and the on-disk archive format.
//!
//! Archives are safetensors files holding `<layer>.weight` and `<layer>.bias`
//! entries in row-major order, stored as little-endian f64. f32 archives
//! (the usual dtype of converted pretrained checkpoints) load as well.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array4, ArrayD, ArrayView2, ArrayView4, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::zoo::{LayerKind, LayerSpec, ModelGraph};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: ArrayD<f64>,
    pub bias: Option<Array1<f64>>,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: ArrayD::zeros(self.weight.raw_dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.len())),
        }
    }

    pub fn weight4(&self) -> Result<ArrayView4<'_, f64>> {
        self.weight
            .view()
            .into_dimensionality()
            .map_err(|_| Error::Weights(format!("expected a 4-d weight, got {:?}", self.weight.shape())))
    }

    pub fn weight2(&self) -> Result<ArrayView2<'_, f64>> {
        self.weight
            .view()
            .into_dimensionality()
            .map_err(|_| Error::Weights(format!("expected a 2-d weight, got {:?}", self.weight.shape())))
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Parameters of every learnable layer, keyed by layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    params: BTreeMap<String, LayerParams>,
}

fn layer_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Bilinear interpolation filter of side `size`, as used to initialise
/// upsampling layers.
pub fn bilinear_filter(size: usize) -> ndarray::Array2<f64> {
    let factor = size.div_ceil(2) as f64;
    let center = if size % 2 == 1 {
        factor - 1.0
    } else {
        factor - 0.5
    };
    ndarray::Array2::from_shape_fn((size, size), |(i, j)| {
        (1.0 - (i as f64 - center).abs() / factor) * (1.0 - (j as f64 - center).abs() / factor)
    })
}

/// Transposed-convolution weight `(channels, channels, k, k)` that upsamples
/// each channel independently by `factor`, with `k = 2·factor − factor % 2`.
pub fn bilinear_upsample_kernel(factor: usize, channels: usize) -> Array4<f64> {
    let size = 2 * factor - factor % 2;
    diagonal_bilinear(channels, channels, size)
}

fn diagonal_bilinear(cin: usize, cout: usize, size: usize) -> Array4<f64> {
    let filt = bilinear_filter(size);
    let mut w = Array4::zeros((cin, cout, size, size));
    for c in 0..cin.min(cout) {
        w.slice_mut(ndarray::s![c, c, .., ..]).assign(&filt);
    }
    w
}

/// How a freshly initialised layer is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// He-normal weights, zero bias.
    He,
    Zeros,
    Bilinear,
}

impl InitRule {
    pub fn for_layer(kind: &LayerKind) -> Option<InitRule> {
        match kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => Some(InitRule::He),
            LayerKind::ScoreConv { .. } => Some(InitRule::Zeros),
            LayerKind::TransposedConv { .. } => Some(InitRule::Bilinear),
            _ => None,
        }
    }
}

/// Fresh parameters for one learnable layer.
pub fn init_layer(layer: &LayerSpec, rule: InitRule, seed: u64) -> Result<LayerParams> {
    let (shape, bias) = layer
        .kind
        .param_shapes()
        .ok_or_else(|| Error::Weights(format!("layer `{}` has no parameters", layer.name)))?;
    let weight = match rule {
        InitRule::Zeros => ArrayD::zeros(IxDyn(&shape)),
        InitRule::Bilinear => {
            if shape.len() != 4 || shape[2] != shape[3] {
                return Err(Error::Weights(format!(
                    "bilinear init needs a square 4-d kernel for `{}`",
                    layer.name
                )));
            }
            diagonal_bilinear(shape[0], shape[1], shape[2]).into_dyn()
        }
        InitRule::He => {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, &layer.name));
            ArrayD::from_shape_simple_fn(IxDyn(&shape), || normal.sample(&mut rng))
        }
    };
    Ok(LayerParams {
        weight,
        bias: bias.map(Array1::zeros),
    })
}

impl WeightBundle {
    pub fn new() -> Self {
        WeightBundle::default()
    }

    /// Default initialisation: He for convolutions and dense layers, zeros for
    /// score layers, bilinear for upsampling layers.
    pub fn init(graph: &ModelGraph, seed: u64) -> Result<Self> {
        let mut bundle = WeightBundle::new();
        for layer in graph.learnable_layers() {
            let rule = InitRule::for_layer(&layer.kind).expect("learnable layer");
            bundle.insert(&layer.name, init_layer(layer, rule, seed)?);
        }
        Ok(bundle)
    }

    pub fn insert(&mut self, name: &str, params: LayerParams) {
        self.params.insert(name.to_string(), params);
    }

    pub fn get(&self, name: &str) -> Option<&LayerParams> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.params.get_mut(name)
    }

    pub fn param(&self, name: &str) -> Result<&LayerParams> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Weights(format!("no parameters for layer `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LayerParams)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut LayerParams)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(LayerParams::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        WeightBundle {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.zeros_like()))
                .collect(),
        }
    }

    /// Every learnable layer has exactly one entry of the graph-implied shape.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        for layer in graph.learnable_layers() {
            let (shape, bias) = layer.kind.param_shapes().expect("learnable");
            let p = self
                .params
                .get(&layer.name)
                .ok_or_else(|| Error::shape(&layer.name, "missing weights"))?;
            if p.weight.shape() != shape.as_slice() {
                return Err(Error::shape(
                    &layer.name,
                    format!("weight shape {:?}, graph expects {:?}", p.weight.shape(), shape),
                ));
            }
            match (bias, &p.bias) {
                (Some(n), Some(b)) if b.len() == n => {}
                (None, None) => {}
                (expected, got) => {
                    return Err(Error::shape(
                        &layer.name,
                        format!(
                            "bias length {:?}, graph expects {:?}",
                            got.as_ref().map(|b| b.len()),
                            expected
                        ),
                    ))
                }
            }
        }
        Ok(())
    }

    /// `self += alpha * other`, layer by layer.
    pub fn add_scaled(&mut self, alpha: f64, other: &WeightBundle) -> Result<()> {
        for (name, p) in &mut self.params {
            let o = other.param(name)?;
            p.weight.scaled_add(alpha, &o.weight);
            if let (Some(b), Some(ob)) = (&mut p.bias, &o.bias) {
                b.scaled_add(alpha, ob);
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for p in self.params.values_mut() {
            p.weight *= alpha;
            if let Some(b) = &mut p.bias {
                *b *= alpha;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| {
            p.weight.iter().all(|v| v.is_finite())
                && p.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()))
        })
    }

    pub fn to_safetensors(&self, metadata: Option<HashMap<String, String>>) -> Result<Vec<u8>> {
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (name, p) in &self.params {
            buffers.push((format!("{name}.weight"), p.weight.shape().to_vec(), le_bytes(p.weight.iter())));
            if let Some(b) = &p.bias {
                buffers.push((format!("{name}.bias"), vec![b.len()], le_bytes(b.iter())));
            }
        }
        let views: Vec<(String, TensorView<'_>)> = buffers
            .iter()
            .map(|(n, shape, data)| {
                TensorView::new(Dtype::F64, shape.clone(), data)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::Weights(e.to_string()))
            })
            .collect::<Result<_>>()?;
        safetensors::serialize(views, &metadata).map_err(|e| Error::Weights(e.to_string()))
    }

    pub fn from_safetensors(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Weights(e.to_string()))?;
        let mut weights: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
        let mut biases: BTreeMap<String, Array1<f64>> = BTreeMap::new();
        for (name, view) in st.tensors() {
            let values = decode_values(&name, &view)?;
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::Weights(format!("{name}: {e}")))?;
            if let Some(layer) = name.strip_suffix(".weight") {
                weights.insert(layer.to_string(), arr);
            } else if let Some(layer) = name.strip_suffix(".bias") {
                let n = arr.len();
                biases.insert(
                    layer.to_string(),
                    arr.into_shape_with_order(n)
                        .map_err(|e| Error::Weights(format!("{name}: {e}")))?,
                );
            } else {
                return Err(Error::Weights(format!(
                    "tensor `{name}` is neither a .weight nor a .bias"
                )));
            }
        }
        let mut bundle = WeightBundle::new();
        for (layer, weight) in weights {
            let bias = biases.remove(&layer);
            bundle.insert(&layer, LayerParams { weight, bias });
        }
        if let Some(orphan) = biases.keys().next() {
            return Err(Error::Weights(format!("bias for `{orphan}` has no weight")));
        }
        Ok(bundle)
    }

    /// Write atomically: the archive is written next to `path` and renamed.
    pub fn save(&self, path: &Path, metadata: Option<HashMap<String, String>>) -> Result<()> {
        let bytes = self.to_safetensors(metadata)?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightBundle::from_safetensors(&bytes)
            .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))
    }
}

fn le_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_values(name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()),
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect()),
        other => Err(Error::Weights(format!(
            "tensor `{name}` has unsupported dtype {other:?}"
        ))),
    }
}

/// Write-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_graph_with, Backbone, Variant, Widths};

    #[test]
    fn factor_two_kernel_center() {
        let k = bilinear_upsample_kernel(2, 3);
        assert_eq!(k.dim(), (3, 3, 4, 4));
        assert!((k[[1, 1, 1, 2]] - 0.75 * 0.75).abs() < 1e-15);
        assert!((k[[0, 0, 0, 0]] - 0.25 * 0.25).abs() < 1e-15);
        assert_eq!(k[[0, 1, 1, 1]], 0.0);
    }

    #[test]
    fn factor_one_is_identity() {
        let k = bilinear_upsample_kernel(1, 2);
        assert_eq!(k.dim(), (2, 2, 1, 1));
        assert_eq!(k[[0, 0, 0, 0]], 1.0);
        assert_eq!(k[[1, 1, 0, 0]], 1.0);
        assert_eq!(k[[0, 1, 0, 0]], 0.0);
    }

    #[test]
    fn odd_filter_peaks_at_center() {
        let f = bilinear_filter(63);
        assert_eq!(f[[31, 31]], 1.0);
        assert!(f[[0, 31]] > 0.0);
    }

    #[test]
    fn init_matches_graph_and_round_trips() {
        let g = build_graph_with(Variant::Fcn16s, 4, Widths::tiny(Backbone::Vgg16)).unwrap();
        let w = WeightBundle::init(&g, 11).unwrap();
        w.check_against(&g).unwrap();
        let score = w.get("score_pool4").unwrap();
        assert!(score.weight.iter().all(|&v| v == 0.0));
        let bytes = w.to_safetensors(None).unwrap();
        let back = WeightBundle::from_safetensors(&bytes).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn he_init_is_seeded_per_layer() {
        let g = build_graph_with(Variant::Fcn32s, 4, Widths::tiny(Backbone::Vgg16)).unwrap();
        let a = WeightBundle::init(&g, 5).unwrap();
        let b = WeightBundle::init(&g, 5).unwrap();
        let c = WeightBundle::init(&g, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.get("conv1_1"), c.get("conv1_1"));
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let g = build_graph_with(Variant::Fcn32s, 4, Widths::tiny(Backbone::Vgg16)).unwrap();
        let mut w = WeightBundle::init(&g, 0).unwrap();
        w.get_mut("conv3_2").unwrap().weight = ArrayD::zeros(IxDyn(&[1, 1, 3, 3]));
        let err = w.check_against(&g).unwrap_err();
        assert!(err.to_string().contains("conv3_2"), "{err}");
    }

    #[test]
    fn f32_archives_load() {
        let data: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F32, vec![2], &data).unwrap();
        let bytes = safetensors::serialize(vec![("fc.weight".to_string(), view)], &None).unwrap();
        let w = WeightBundle::from_safetensors(&bytes).unwrap();
        assert_eq!(w.get("fc").unwrap().weight.as_slice().unwrap(), &[1.5, -2.0]);
    }
}
