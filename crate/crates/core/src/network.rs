//! Forward and backward execution of a [`ModelGraph`] with a [`WeightBundle`].

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::ops;
use crate::weights::{LayerParams, WeightBundle};
use crate::zoo::{LayerKind, ModelGraph};

/// Activations and auxiliary state recorded by a training forward pass.
pub struct Tape {
    acts: Vec<Array3<f64>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    dropout_masks: Vec<Option<Array3<f64>>>,
}

impl Tape {
    pub fn output(&self) -> &Array3<f64> {
        self.acts.last().expect("non-empty tape")
    }

    /// Output of the layer at `index` in graph order.
    pub fn activation(&self, index: usize) -> &Array3<f64> {
        &self.acts[index]
    }
}

/// Convert an `H×W×3` image into the `(3, H, W)` layout used internally.
pub fn hwc_to_chw(image: ArrayView3<'_, f64>) -> Array3<f64> {
    image.permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

fn check_input(graph: &ModelGraph, weights: &WeightBundle, x: &Array3<f64>) -> Result<()> {
    weights.check_against(graph)?;
    let (c, h, w) = x.dim();
    let expected = match graph.layers[0].kind {
        LayerKind::Input { channels } => channels,
        _ => unreachable!("graphs start with an input layer"),
    };
    if c != expected {
        return Err(Error::shape("data", format!("expects {expected} channels, got {c}")));
    }
    graph.infer_shapes((h, w))?;
    Ok(())
}

fn eval_layer(
    kind: &LayerKind,
    params: Option<&LayerParams>,
    inputs: &[&Array3<f64>],
) -> Result<(Array3<f64>, Option<Vec<u32>>)> {
    let out = match *kind {
        LayerKind::Input { .. } => unreachable!(),
        LayerKind::Conv { stride, pad, .. } => {
            let p = params.expect("conv params");
            ops::conv2d(inputs[0], p.weight4()?, p.bias.as_ref(), stride, pad)
        }
        LayerKind::ScoreConv { .. } => {
            let p = params.expect("score params");
            ops::conv2d(inputs[0], p.weight4()?, p.bias.as_ref(), 1, 0)
        }
        LayerKind::TransposedConv { stride, pad, .. } => {
            let p = params.expect("upsample params");
            ops::conv_transpose2d(inputs[0], p.weight4()?, stride, pad)
        }
        LayerKind::Dense { .. } => {
            let p = params.expect("dense params");
            ops::dense(inputs[0], p.weight2()?, p.bias.as_ref().expect("dense bias"))
        }
        LayerKind::Relu => ops::relu(inputs[0]),
        LayerKind::Dropout { .. } => inputs[0].clone(),
        LayerKind::MaxPool { kernel, stride } => {
            let (y, arg) = ops::max_pool(inputs[0], kernel, stride);
            return Ok((y, Some(arg)));
        }
        LayerKind::Crop { offset } => {
            let (_, rh, rw) = inputs[1].dim();
            ops::crop(inputs[0], offset, rh, rw)
        }
        LayerKind::Add => inputs[0] + inputs[1],
    };
    Ok((out, None))
}

/// Inference pass on a `(channels, H, W)` tensor. Dropout is disabled and
/// intermediate activations are released after their last consumer.
pub fn forward_chw(graph: &ModelGraph, weights: &WeightBundle, x: &Array3<f64>) -> Result<Array3<f64>> {
    check_input(graph, weights, x)?;
    let n = graph.layers.len();
    let mut last_use = vec![0usize; n];
    for (i, layer) in graph.layers.iter().enumerate() {
        for &j in &layer.inputs {
            last_use[j] = i;
        }
    }
    last_use[n - 1] = n;
    let mut acts: Vec<Option<Array3<f64>>> = vec![None; n];
    acts[0] = Some(x.clone());
    for (i, layer) in graph.layers.iter().enumerate().skip(1) {
        let inputs: Vec<&Array3<f64>> = layer
            .inputs
            .iter()
            .map(|&j| acts[j].as_ref().expect("live activation"))
            .collect();
        let (y, _) = eval_layer(&layer.kind, weights.get(&layer.name), &inputs)?;
        acts[i] = Some(y);
        for &j in &layer.inputs {
            if last_use[j] == i {
                acts[j] = None;
            }
        }
    }
    Ok(acts.pop().flatten().expect("output activation"))
}

/// Inference on an `H×W×3` image; returns `num_classes×H×W` logits for
/// segmentation graphs.
pub fn forward(graph: &ModelGraph, weights: &WeightBundle, image: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    forward_chw(graph, weights, &hwc_to_chw(image))
}

/// Training pass: dropout layers sample inverted-dropout masks from `rng`.
pub fn forward_train<R: Rng>(
    graph: &ModelGraph,
    weights: &WeightBundle,
    x: &Array3<f64>,
    rng: &mut R,
) -> Result<Tape> {
    check_input(graph, weights, x)?;
    let n = graph.layers.len();
    let mut tape = Tape {
        acts: Vec::with_capacity(n),
        pool_argmax: vec![None; n],
        dropout_masks: vec![None; n],
    };
    tape.acts.push(x.clone());
    for (i, layer) in graph.layers.iter().enumerate().skip(1) {
        if let LayerKind::Dropout { rate } = layer.kind {
            let input = &tape.acts[layer.inputs[0]];
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let mask = Array3::from_shape_simple_fn(input.dim(), || {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                tape.acts.push(input * &mask);
                tape.dropout_masks[i] = Some(mask);
            } else {
                tape.acts.push(input.clone());
            }
            continue;
        }
        let inputs: Vec<&Array3<f64>> = layer.inputs.iter().map(|&j| &tape.acts[j]).collect();
        let (y, arg) = eval_layer(&layer.kind, weights.get(&layer.name), &inputs)?;
        tape.pool_argmax[i] = arg;
        tape.acts.push(y);
    }
    Ok(tape)
}

fn accumulate(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Parameter gradients given the gradient of the loss w.r.t. the output.
pub fn backward(
    graph: &ModelGraph,
    weights: &WeightBundle,
    tape: &Tape,
    d_output: Array3<f64>,
) -> Result<WeightBundle> {
    let n = graph.layers.len();
    let mut grads: Vec<Option<Array3<f64>>> = vec![None; n];
    grads[n - 1] = Some(d_output);
    let mut pgrads = weights.zeros_like();
    for i in (1..n).rev() {
        let Some(dy) = grads[i].take() else { continue };
        let layer = &graph.layers[i];
        let x0 = &tape.acts[layer.inputs[0]];
        match layer.kind {
            LayerKind::Input { .. } => unreachable!(),
            LayerKind::Conv { .. } | LayerKind::ScoreConv { .. } => {
                let (stride, pad) = match layer.kind {
                    LayerKind::Conv { stride, pad, .. } => (stride, pad),
                    _ => (1, 0),
                };
                let p = weights.param(&layer.name)?;
                let g = ops::conv2d_backward(x0, p.weight4()?, stride, pad, &dy);
                let pg = pgrads.get_mut(&layer.name).expect("gradient slot");
                pg.weight += &g.dw.into_dyn();
                if let Some(b) = &mut pg.bias {
                    *b += &g.db;
                }
                accumulate(&mut grads[layer.inputs[0]], g.dx);
            }
            LayerKind::TransposedConv { stride, pad, .. } => {
                let p = weights.param(&layer.name)?;
                let g = ops::conv_transpose2d_backward(x0, p.weight4()?, stride, pad, &dy);
                let pg = pgrads.get_mut(&layer.name).expect("gradient slot");
                pg.weight += &g.dw.into_dyn();
                accumulate(&mut grads[layer.inputs[0]], g.dx);
            }
            LayerKind::Dense { .. } => {
                let p = weights.param(&layer.name)?;
                let g = ops::dense_backward(x0, p.weight2()?, &dy);
                let pg = pgrads.get_mut(&layer.name).expect("gradient slot");
                pg.weight += &g.dw.into_dyn();
                if let Some(b) = &mut pg.bias {
                    *b += &g.db;
                }
                accumulate(&mut grads[layer.inputs[0]], g.dx);
            }
            LayerKind::Relu => {
                let dx = ops::relu_backward(&tape.acts[i], &dy);
                accumulate(&mut grads[layer.inputs[0]], dx);
            }
            LayerKind::Dropout { .. } => {
                let dx = match &tape.dropout_masks[i] {
                    Some(mask) => dy * mask,
                    None => dy,
                };
                accumulate(&mut grads[layer.inputs[0]], dx);
            }
            LayerKind::MaxPool { .. } => {
                let arg = tape.pool_argmax[i].as_ref().expect("pool argmax");
                let dx = ops::max_pool_backward(x0.dim(), arg, &dy);
                accumulate(&mut grads[layer.inputs[0]], dx);
            }
            LayerKind::Crop { offset } => {
                let dx = ops::crop_backward(x0.dim(), offset, &dy);
                accumulate(&mut grads[layer.inputs[0]], dx);
            }
            LayerKind::Add => {
                accumulate(&mut grads[layer.inputs[1]], dy.clone());
                accumulate(&mut grads[layer.inputs[0]], dy);
            }
        }
    }
    Ok(pgrads)
}

/// Per-pixel argmax over channels; ties resolve to the lowest index.
pub fn argmax_channels(logits: &Array3<f64>) -> Array2<u8> {
    let (c, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[[0, y, x]];
        for k in 1..c {
            let v = logits[[k, y, x]];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        best as u8
    })
}

/// Decode `num_classes×H×W` logits of the four-class problem into a label map.
pub fn predict_labels(logits: &Array3<f64>) -> Result<LabelMap> {
    if logits.len_of(Axis(0)) != crate::labels::NUM_LABELS {
        return Err(Error::shape(
            "score",
            format!(
                "expected {} channels of logits, got {}",
                crate::labels::NUM_LABELS,
                logits.len_of(Axis(0))
            ),
        ));
    }
    LabelMap::new(argmax_channels(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_graph_with, Backbone, Variant, Widths};
    use crate::weights::LayerParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ties_break_toward_background() {
        let logits = Array3::<f64>::zeros((4, 3, 2));
        assert_eq!(predict_labels(&logits).unwrap(), LabelMap::zeros(3, 2));
    }

    #[test]
    fn argmax_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Array3::from_shape_simple_fn((4, 3, 3), || rng.random_range(-2.0..2.0));
        let labels = predict_labels(&logits).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let mut best = 0;
                for k in 0..4 {
                    if logits[[k, y, x]] > logits[[best, y, x]] {
                        best = k;
                    }
                }
                assert_eq!(labels.view()[[y, x]] as usize, best);
            }
        }
    }

    #[test]
    fn dominant_channel_wins_everywhere() {
        let mut logits = Array3::<f64>::zeros((4, 5, 5));
        logits.index_axis_mut(Axis(0), 2).fill(3.0);
        let labels = predict_labels(&logits).unwrap();
        assert!(labels.view().iter().all(|&v| v == 2));
    }

    #[test]
    fn zero_weights_give_constant_logits() {
        let g = build_graph_with(Variant::Fcn8s, 4, Widths::tiny(Backbone::Vgg16)).unwrap();
        let mut w = WeightBundle::init(&g, 0).unwrap();
        for (_, p) in w.iter_mut() {
            *p = p.zeros_like();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Array3::from_shape_simple_fn((40, 40, 3), || rng.random::<f64>());
        let out = forward(&g, &w, img.view()).unwrap();
        assert_eq!(out.dim(), (4, 40, 40));
        assert!(out.iter().all(|&v| v == out[[0, 0, 0]]));
    }

    #[test]
    fn shape_mismatch_is_reported_by_layer() {
        let g = build_graph_with(Variant::Fcn32s, 4, Widths::tiny(Backbone::Vgg16)).unwrap();
        let mut w = WeightBundle::init(&g, 0).unwrap();
        w.insert(
            "fc7",
            LayerParams {
                weight: ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 3, 1, 1])),
                bias: Some(ndarray::Array1::zeros(3)),
            },
        );
        let img = Array3::<f64>::zeros((32, 32, 3));
        let err = forward(&g, &w, img.view()).unwrap_err();
        assert!(err.to_string().contains("fc7"), "{err}");
    }

    #[test]
    fn training_pass_without_dropout_matches_inference() {
        let g = build_graph_with(Variant::Fcn16s, 4, Widths::tiny(Backbone::Vgg16))
            .unwrap()
            .with_dropout(0.0);
        let w = WeightBundle::init(&g, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array3::from_shape_simple_fn((3, 36, 28), || rng.random::<f64>() - 0.5);
        let inf = forward_chw(&g, &w, &x).unwrap();
        let tape = forward_train(&g, &w, &x, &mut rng).unwrap();
        assert_eq!(&inf, tape.output());
    }
}
