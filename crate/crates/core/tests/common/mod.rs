#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skinseg::catalog::DiagnosisClass;
use skinseg::labels::LabelMap;
use skinseg::network::{backward, forward_chw, forward_train};
use skinseg::ops::{conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, crop, crop_backward};
use skinseg::trainer::pixel_loss;
use skinseg::weights::WeightBundle;
use skinseg::zoo::ModelGraph;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_indices(rng: &mut impl Rng, h: usize, w: usize, max: u8) -> Array2<u8> {
    Array2::from_shape_simple_fn((h, w), || rng.random_range(0..=max))
}

pub fn random_label(rng: &mut impl Rng, h: usize, w: usize) -> LabelMap {
    LabelMap::new(random_indices(rng, h, w, 3)).expect("indices are valid labels")
}

/// Dice, sensitivity, specificity and MCC of one class computed from the
/// pixel sets directly. MCC is the Pearson correlation of the two indicator
/// vectors.
pub fn naive_metrics(pred: &Array2<u8>, truth: &Array2<u8>, class: u8) -> [f64; 4] {
    let p: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let t: Vec<bool> = truth.iter().map(|&v| v == class).collect();
    let n = p.len() as f64;
    let both = p.iter().zip(&t).filter(|(a, b)| **a && **b).count() as f64;
    let neither = p.iter().zip(&t).filter(|(a, b)| !**a && !**b).count() as f64;
    let np = p.iter().filter(|v| **v).count() as f64;
    let nt = t.iter().filter(|v| **v).count() as f64;

    let dice = if np + nt == 0.0 { 1.0 } else { 2.0 * both / (np + nt) };
    let sens = if nt == 0.0 { 1.0 } else { both / nt };
    let spec = if n - nt == 0.0 { 1.0 } else { neither / (n - nt) };

    let mp = np / n;
    let mt = nt / n;
    let cov: f64 = p
        .iter()
        .zip(&t)
        .map(|(&a, &b)| (f64::from(a as u8) - mp) * (f64::from(b as u8) - mt))
        .sum::<f64>()
        / n;
    let vp = mp * (1.0 - mp);
    let vt = mt * (1.0 - mt);
    let mcc = if vp == 0.0 || vt == 0.0 { 0.0 } else { cov / (vp * vt).sqrt() };
    [dice, sens, spec, mcc]
}

pub fn class_code(class: DiagnosisClass) -> u8 {
    class.code()
}

/// Relative error with an absolute floor so that vanishing gradients compare
/// on an absolute scale.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

pub fn random_array3(rng: &mut impl Rng, dim: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.random_range(-scale..scale))
}

/// Replace every tensor of `bundle` with uniform noise of roughly He scale
/// and give every bias a small random offset.
pub fn randomize(bundle: &mut WeightBundle, seed: u64) {
    let mut r = rng(seed);
    for (_, p) in bundle.iter_mut() {
        let shape = p.weight.shape().to_vec();
        let fan_in: usize = if shape.len() == 4 { shape[1] * shape[2] * shape[3] } else { shape[1] };
        let a = (6.0 / fan_in as f64).sqrt();
        p.weight.mapv_inplace(|_| r.random_range(-a..a));
        if let Some(b) = &mut p.bias {
            b.mapv_inplace(|_| r.random_range(-0.1..0.1));
        }
    }
}

pub fn network_loss(graph: &ModelGraph, weights: &WeightBundle, x: &Array3<f64>, target: &Array2<u8>) -> f64 {
    let logits = forward_chw(graph, weights, x).expect("forward pass");
    pixel_loss(&logits, target.view(), None).expect("loss").0
}

/// Largest relative error between backpropagated and central-difference
/// gradients over `per_layer` sampled weights and one bias entry of every
/// learnable layer.
pub fn network_gradient_error(graph: &ModelGraph, input: (usize, usize), per_layer: usize, seed: u64) -> (f64, String) {
    let graph = graph.with_dropout(0.0);
    let mut weights = WeightBundle::init(&graph, seed).expect("init");
    randomize(&mut weights, seed + 1);
    let mut r = rng(seed + 2);
    let x = random_array3(&mut r, (3, input.0, input.1), 1.0);
    let target = random_indices(&mut r, input.0, input.1, (graph.num_classes - 1) as u8);

    let tape = forward_train(&graph, &weights, &x, &mut r).expect("train pass");
    let (_, dlogits) = pixel_loss(tape.output(), target.view(), None).expect("loss");
    let grads = backward(&graph, &weights, &tape, dlogits).expect("backward");

    let mut worst = (0.0, String::new());
    let names: Vec<String> = weights.names().cloned().collect();
    for name in names {
        let len = weights.param(&name).unwrap().weight.len();
        let mut picks: Vec<Option<usize>> = (0..per_layer).map(|_| Some(r.random_range(0..len))).collect();
        if weights.param(&name).unwrap().bias.is_some() {
            picks.push(None);
        }
        for pick in picks {
            let analytic = {
                let g = grads.param(&name).unwrap();
                match pick {
                    Some(i) => g.weight.as_slice().unwrap()[i],
                    None => g.bias.as_ref().unwrap()[0],
                }
            };
            let mut w = weights.clone();
            let numeric = central_difference(
                |v| {
                    let p = w.get_mut(&name).unwrap();
                    match pick {
                        Some(i) => p.weight.as_slice_mut().unwrap()[i] = v,
                        None => p.bias.as_mut().unwrap()[0] = v,
                    }
                    network_loss(&graph, &w, &x, &target)
                },
                match pick {
                    Some(i) => weights.param(&name).unwrap().weight.as_slice().unwrap()[i],
                    None => weights.param(&name).unwrap().bias.as_ref().unwrap()[0],
                },
            );
            let e = rel_error(analytic, numeric);
            if e > worst.0 {
                worst = (e, format!("{name} {pick:?}: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

fn dot(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    (a * b).sum()
}

/// Worst relative error of `analytic` against central differences of `f`
/// taken coordinate by coordinate over `values`.
pub fn worst_over(analytic: &[f64], values: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..values.len() {
        let x0 = values[i];
        let numeric = central_difference(
            |v| {
                values[i] = v;
                f(values)
            },
            x0,
        );
        values[i] = x0;
        worst = worst.max(rel_error(analytic[i], numeric));
    }
    worst
}

/// Input, weight and bias gradients of a 2-channel to 3-channel 3×3 convolution.
pub fn conv_gradient_error(stride: usize, pad: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_array3(&mut r, (2, 7, 6), 1.0);
    let w = Array4::from_shape_simple_fn((3, 2, 3, 3), || r.random_range(-1.0..1.0));
    let b = Array1::from_shape_simple_fn(3, || r.random_range(-1.0..1.0));
    let y = conv2d(&x, w.view(), Some(&b), stride, pad);
    let proj = random_array3(&mut r, y.dim(), 1.0);
    let g = conv2d_backward(&x, w.view(), stride, pad, &proj);

    let mut xs = x.clone();
    let ex = worst_over(g.dx.as_slice().unwrap(), xs.as_slice_mut().unwrap(), |v| {
        let xv = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
        dot(&conv2d(&xv, w.view(), Some(&b), stride, pad), &proj)
    });
    let mut ws = w.clone();
    let ew = worst_over(g.dw.as_slice().unwrap(), ws.as_slice_mut().unwrap(), |v| {
        let wv = Array4::from_shape_vec(w.dim(), v.to_vec()).unwrap();
        dot(&conv2d(&x, wv.view(), Some(&b), stride, pad), &proj)
    });
    let mut bs = b.clone();
    let eb = worst_over(g.db.as_slice().unwrap(), bs.as_slice_mut().unwrap(), |v| {
        let bv = Array1::from(v.to_vec());
        dot(&conv2d(&x, w.view(), Some(&bv), stride, pad), &proj)
    });
    ex.max(ew).max(eb)
}

/// Input and weight gradients of a 4×4 transposed convolution.
pub fn transposed_gradient_error(stride: usize, pad: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_array3(&mut r, (2, 4, 5), 1.0);
    let w = Array4::from_shape_simple_fn((2, 3, 4, 4), || r.random_range(-1.0..1.0));
    let y = conv_transpose2d(&x, w.view(), stride, pad);
    let proj = random_array3(&mut r, y.dim(), 1.0);
    let g = conv_transpose2d_backward(&x, w.view(), stride, pad, &proj);
    let mut xs = x.clone();
    let ex = worst_over(g.dx.as_slice().unwrap(), xs.as_slice_mut().unwrap(), |v| {
        let xv = Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap();
        dot(&conv_transpose2d(&xv, w.view(), stride, pad), &proj)
    });
    let mut ws = w.clone();
    let ew = worst_over(g.dw.as_slice().unwrap(), ws.as_slice_mut().unwrap(), |v| {
        let wv = Array4::from_shape_vec(w.dim(), v.to_vec()).unwrap();
        dot(&conv_transpose2d(&x, wv.view(), stride, pad), &proj)
    });
    ex.max(ew)
}

/// Gradients of crop-then-sum skip fusion with respect to both inputs.
pub fn fusion_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_array3(&mut r, (2, 9, 10), 1.0);
    let b = random_array3(&mut r, (2, 4, 5), 1.0);
    let proj = random_array3(&mut r, (2, 4, 5), 1.0);
    let offset = 3;
    let fuse = |a: &Array3<f64>, b: &Array3<f64>| dot(&(crop(a, offset, 4, 5) + b), &proj);
    let da = crop_backward(a.dim(), offset, &proj);
    let mut av = a.clone();
    let ea = worst_over(da.as_slice().unwrap(), av.as_slice_mut().unwrap(), |v| {
        fuse(&Array3::from_shape_vec(a.dim(), v.to_vec()).unwrap(), &b)
    });
    let mut bv = b.clone();
    let eb = worst_over(proj.as_slice().unwrap(), bv.as_slice_mut().unwrap(), |v| {
        fuse(&a, &Array3::from_shape_vec(b.dim(), v.to_vec()).unwrap())
    });
    ea.max(eb)
}

/// Logit gradient of the pixel loss, optionally with class weights.
pub fn loss_gradient_error(class_weights: Option<&[f64]>, seed: u64) -> f64 {
    let mut r = rng(seed);
    let logits = random_array3(&mut r, (4, 5, 6), 3.0);
    let target = random_indices(&mut r, 5, 6, 3);
    let (_, grad) = pixel_loss(&logits, target.view(), class_weights).unwrap();
    let mut l = logits.clone();
    worst_over(grad.as_slice().unwrap(), l.as_slice_mut().unwrap(), |v| {
        let lv = Array3::from_shape_vec(logits.dim(), v.to_vec()).unwrap();
        pixel_loss(&lv, target.view(), class_weights).unwrap().0
    })
}

/// Published per-class scores of the four networks, without a mode column.
pub const PUBLISHED_SCORES_CSV: &str = "\
model,class,dice,specificity,sensitivity,mcc
FCN-AlexNet,benign,0.819,0.989,0.798,0.814
FCN-AlexNet,melanoma,0.609,0.982,0.4864,0.541
FCN-AlexNet,seborrheic_keratosis,0.488,0.987,0.456,0.484
FCN-32s,benign,0.779,0.991,0.751,0.775
FCN-32s,melanoma,0.549,0.977,0.430,0.484
FCN-32s,seborrheic_keratosis,0.484,0.968,0.478,0.463
FCN-16s,benign,0.761,0.988,0.706,0.764
FCN-16s,melanoma,0.590,0.979,0.471,0.528
FCN-16s,seborrheic_keratosis,0.506,0.978,0.466,0.501
FCN-8s,benign,0.785,0.990,0.747,0.779
FCN-8s,melanoma,0.653,0.984,0.527,0.582
FCN-8s,seborrheic_keratosis,0.557,0.988,0.509,0.5683
";

/// (model, column heading) of every bold cell the published scores should produce.
pub fn expected_bold() -> BTreeSet<(String, String)> {
    let mut out = BTreeSet::new();
    for col in ["Dice Benign", "Sensitivity Benign", "MCC Benign"] {
        out.insert(("FCN-AlexNet".to_string(), col.to_string()));
    }
    out.insert(("FCN-32s".to_string(), "Specificity Benign".to_string()));
    for metric in ["Dice", "Specificity", "Sensitivity", "MCC"] {
        for class in ["Melanoma", "SK"] {
            out.insert(("FCN-8s".to_string(), format!("{metric} {class}")));
        }
    }
    out
}

/// (model, column heading) of every bold cell in a markdown table.
pub fn bold_cells(markdown: &str) -> BTreeSet<(String, String)> {
    let split = |line: &str| -> Vec<String> {
        line.trim()
            .trim_matches('|')
            .split('|')
            .map(|c| c.trim().to_string())
            .collect()
    };
    let mut lines = markdown.lines();
    let header = split(lines.next().unwrap_or(""));
    let mut out = BTreeSet::new();
    for line in lines.skip(1) {
        let cells = split(line);
        for (i, cell) in cells.iter().enumerate().skip(1) {
            if cell.contains("**") {
                out.insert((cells[0].clone(), header[i].clone()));
            }
        }
    }
    out
}
