//! CPU kernels for the layer kinds of the FCN graphs, forward and backward.
//!
//! Feature maps are `(channels, height, width)` arrays in standard layout.
//! Convolutions go through an im2col / GEMM formulation processed in bands of
//! output rows so that the column buffer stays bounded for large inputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView4, ArrayViewMut2};

/// Upper bound on column-buffer elements per band.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn band_height(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.out_w).max(1)).clamp(1, self.out_h.max(1))
    }

    fn bands(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.band_height();
        let out_h = self.out_h;
        (0..out_h)
            .step_by(step)
            .map(move |r0| (r0, (r0 + step).min(out_h)))
    }
}

/// Spatial output size of a convolution, `None` when the kernel does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Ceil-mode pooling size, clipping the last window to start inside the input.
pub fn pool_out_size(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    if input <= kernel {
        return Some(1);
    }
    Some((input - kernel).div_ceil(stride) + 1)
}

pub fn transposed_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input.max(1) - 1) * stride + kernel).checked_sub(2 * pad)
}

fn im2col_band(x: &[f64], g: &ConvGeom, r0: usize, r1: usize, col: &mut [f64]) {
    let ncols = (r1 - r0) * g.out_w;
    debug_assert_eq!(col.len(), g.rows() * ncols);
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in r0..r1 {
                    let out_row = &mut dst[(oy - r0) * g.out_w..(oy - r0 + 1) * g.out_w];
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_band(col: &[f64], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [f64]) {
    let ncols = (r1 - r0) * g.out_w;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in r0..r1 {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let band_row = &src[(oy - r0) * g.out_w..(oy - r0 + 1) * g.out_w];
                    for (ox, &v) in band_row.iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn flat2(a: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (c, h, w) = a.dim();
    ArrayView2::from_shape((c, h * w), a.as_slice().expect("standard layout")).unwrap()
}

fn flat2_mut(a: &mut Array3<f64>) -> ArrayViewMut2<'_, f64> {
    let (c, h, w) = a.dim();
    ArrayViewMut2::from_shape((c, h * w), a.as_slice_mut().expect("standard layout")).unwrap()
}

fn weight_matrix<'a>(w: &ArrayView4<'a, f64>) -> ArrayView2<'a, f64> {
    let (a, b, kh, kw) = w.dim();
    ArrayView2::from_shape((a, b * kh * kw), w.to_slice().expect("standard layout")).unwrap()
}

fn contiguous3(x: &Array3<f64>) -> std::borrow::Cow<'_, Array3<f64>> {
    if x.is_standard_layout() {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(x.as_standard_layout().into_owned())
    }
}

/// Cross-correlation with weights `(out, in, kh, kw)`.
pub fn conv2d(
    x: &Array3<f64>,
    w: ArrayView4<'_, f64>,
    bias: Option<&Array1<f64>>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let x = contiguous3(x);
    let (c, h, wd) = x.dim();
    let (o, ci, kh, kw) = w.dim();
    assert_eq!(c, ci, "conv2d channel mismatch");
    let out_h = conv_out_size(h, kh, stride, pad).expect("conv kernel larger than input");
    let out_w = conv_out_size(wd, kw, stride, pad).expect("conv kernel larger than input");
    let g = ConvGeom {
        channels: c,
        in_h: h,
        in_w: wd,
        kh,
        kw,
        stride,
        pad,
        out_h,
        out_w,
    };
    let wm = weight_matrix(&w);
    let mut y = Array3::<f64>::zeros((o, out_h, out_w));
    {
        let xs = x.as_slice().unwrap();
        let mut y2 = flat2_mut(&mut y);
        let mut col = Vec::new();
        for (r0, r1) in g.bands() {
            let ncols = (r1 - r0) * out_w;
            col.resize(g.rows() * ncols, 0.0);
            im2col_band(xs, &g, r0, r1, &mut col);
            let colv = ArrayView2::from_shape((g.rows(), ncols), &col[..]).unwrap();
            let mut dst = y2.slice_mut(s![.., r0 * out_w..r1 * out_w]);
            general_mat_mul(1.0, &wm, &colv, 0.0, &mut dst);
        }
    }
    if let Some(b) = bias {
        for (mut plane, &bv) in y.outer_iter_mut().zip(b.iter()) {
            plane += bv;
        }
    }
    y
}

pub struct ConvGrads {
    pub dx: Array3<f64>,
    pub dw: ndarray::Array4<f64>,
    pub db: Array1<f64>,
}

pub fn conv2d_backward(
    x: &Array3<f64>,
    w: ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
    dy: &Array3<f64>,
) -> ConvGrads {
    let x = contiguous3(x);
    let dy = contiguous3(dy);
    let (c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (_, out_h, out_w) = dy.dim();
    let g = ConvGeom {
        channels: c,
        in_h: h,
        in_w: wd,
        kh,
        kw,
        stride,
        pad,
        out_h,
        out_w,
    };
    let wm = weight_matrix(&w);
    let dy2 = flat2(&dy);
    let mut dx = Array3::<f64>::zeros((c, h, wd));
    let mut dwm = Array2::<f64>::zeros((o, g.rows()));
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for (r0, r1) in g.bands() {
        let ncols = (r1 - r0) * out_w;
        col.resize(g.rows() * ncols, 0.0);
        im2col_band(x.as_slice().unwrap(), &g, r0, r1, &mut col);
        let colv = ArrayView2::from_shape((g.rows(), ncols), &col[..]).unwrap();
        let dyb = dy2.slice(s![.., r0 * out_w..r1 * out_w]);
        general_mat_mul(1.0, &dyb, &colv.t(), 1.0, &mut dwm);
        dcol.resize(g.rows() * ncols, 0.0);
        {
            let mut dcolv = ArrayViewMut2::from_shape((g.rows(), ncols), &mut dcol[..]).unwrap();
            general_mat_mul(1.0, &wm.t(), &dyb, 0.0, &mut dcolv);
        }
        col2im_band(&dcol, &g, r0, r1, dx.as_slice_mut().unwrap());
    }
    let db = dy.sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(1));
    let dw = dwm.into_shape_with_order((o, c, kh, kw)).unwrap();
    ConvGrads { dx, dw, db }
}

/// Transposed convolution ("deconvolution") with weights `(in, out, kh, kw)`.
/// Output size is `(H - 1)·stride + k − 2·pad`.
pub fn conv_transpose2d(x: &Array3<f64>, w: ArrayView4<'_, f64>, stride: usize, pad: usize) -> Array3<f64> {
    let x = contiguous3(x);
    let (ci, h, wd) = x.dim();
    let (wi, o, kh, kw) = w.dim();
    assert_eq!(ci, wi, "transposed conv channel mismatch");
    let out_h = transposed_out_size(h, kh, stride, pad).expect("transposed conv output negative");
    let out_w = transposed_out_size(wd, kw, stride, pad).expect("transposed conv output negative");
    // Geometry of the adjoint convolution mapping the output back onto x.
    let g = ConvGeom {
        channels: o,
        in_h: out_h,
        in_w: out_w,
        kh,
        kw,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    };
    let wm = weight_matrix(&w);
    let x2 = flat2(&x);
    let mut y = Array3::<f64>::zeros((o, out_h, out_w));
    let mut col = Vec::new();
    for (r0, r1) in g.bands() {
        let ncols = (r1 - r0) * wd;
        col.resize(g.rows() * ncols, 0.0);
        {
            let mut colv = ArrayViewMut2::from_shape((g.rows(), ncols), &mut col[..]).unwrap();
            let xb = x2.slice(s![.., r0 * wd..r1 * wd]);
            general_mat_mul(1.0, &wm.t(), &xb, 0.0, &mut colv);
        }
        col2im_band(&col, &g, r0, r1, y.as_slice_mut().unwrap());
    }
    y
}

pub struct TransposedGrads {
    pub dx: Array3<f64>,
    pub dw: ndarray::Array4<f64>,
}

pub fn conv_transpose2d_backward(
    x: &Array3<f64>,
    w: ArrayView4<'_, f64>,
    stride: usize,
    pad: usize,
    dy: &Array3<f64>,
) -> TransposedGrads {
    let x = contiguous3(x);
    let dy = contiguous3(dy);
    let (ci, h, wd) = x.dim();
    let (_, o, kh, kw) = w.dim();
    let (_, out_h, out_w) = dy.dim();
    let g = ConvGeom {
        channels: o,
        in_h: out_h,
        in_w: out_w,
        kh,
        kw,
        stride,
        pad,
        out_h: h,
        out_w: wd,
    };
    let wm = weight_matrix(&w);
    let x2 = flat2(&x);
    let mut dx = Array3::<f64>::zeros((ci, h, wd));
    let mut dwm = Array2::<f64>::zeros((ci, g.rows()));
    let mut dcol = Vec::new();
    {
        let mut dx2 = flat2_mut(&mut dx);
        for (r0, r1) in g.bands() {
            let ncols = (r1 - r0) * wd;
            dcol.resize(g.rows() * ncols, 0.0);
            im2col_band(dy.as_slice().unwrap(), &g, r0, r1, &mut dcol);
            let dcolv = ArrayView2::from_shape((g.rows(), ncols), &dcol[..]).unwrap();
            let mut dxb = dx2.slice_mut(s![.., r0 * wd..r1 * wd]);
            general_mat_mul(1.0, &wm, &dcolv, 0.0, &mut dxb);
            let xb = x2.slice(s![.., r0 * wd..r1 * wd]);
            general_mat_mul(1.0, &xb, &dcolv.t(), 1.0, &mut dwm);
        }
    }
    let dw = dwm.into_shape_with_order((ci, o, kh, kw)).unwrap();
    TransposedGrads { dx, dw }
}

/// Max pooling in ceil mode. Returns the pooled map and, per output element,
/// the flat index of the winning input element.
pub fn max_pool(x: &Array3<f64>, kernel: usize, stride: usize) -> (Array3<f64>, Vec<u32>) {
    let x = contiguous3(x);
    let (c, h, w) = x.dim();
    let oh = pool_out_size(h, kernel, stride).expect("empty pooling input");
    let ow = pool_out_size(w, kernel, stride).expect("empty pooling input");
    let xs = x.as_slice().unwrap();
    let mut y = Array3::<f64>::zeros((c, oh, ow));
    let mut arg = vec![0u32; c * oh * ow];
    let ys = y.as_slice_mut().unwrap();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + kernel).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + kernel).min(w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let i = base + iy * w + ix;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                ys[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(input_dim: (usize, usize, usize), argmax: &[u32], dy: &Array3<f64>) -> Array3<f64> {
    let dy = contiguous3(dy);
    let mut dx = Array3::<f64>::zeros(input_dim);
    let dxs = dx.as_slice_mut().unwrap();
    for (&i, &g) in argmax.iter().zip(dy.as_slice().unwrap()) {
        dxs[i as usize] += g;
    }
    dx
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &out| {
        if out <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Take the `(ref_h, ref_w)` window starting at `(offset, offset)`.
pub fn crop(x: &Array3<f64>, offset: usize, ref_h: usize, ref_w: usize) -> Array3<f64> {
    x.slice(s![.., offset..offset + ref_h, offset..offset + ref_w])
        .to_owned()
}

pub fn crop_backward(input_dim: (usize, usize, usize), offset: usize, dy: &Array3<f64>) -> Array3<f64> {
    let (_, h, w) = dy.dim();
    let mut dx = Array3::<f64>::zeros(input_dim);
    dx.slice_mut(s![.., offset..offset + h, offset..offset + w])
        .assign(dy);
    dx
}

/// Fully connected layer on the flattened `(c, h, w)` input; output is `(out, 1, 1)`.
pub fn dense(x: &Array3<f64>, w: ndarray::ArrayView2<'_, f64>, bias: &Array1<f64>) -> Array3<f64> {
    let x = contiguous3(x);
    let v = ndarray::ArrayView1::from(x.as_slice().unwrap());
    let y = w.dot(&v) + bias;
    let n = y.len();
    y.into_shape_with_order((n, 1, 1)).unwrap()
}

pub struct DenseGrads {
    pub dx: Array3<f64>,
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

pub fn dense_backward(x: &Array3<f64>, w: ndarray::ArrayView2<'_, f64>, dy: &Array3<f64>) -> DenseGrads {
    let x = contiguous3(x);
    let dims = x.dim();
    let xv = ndarray::ArrayView1::from(x.as_slice().unwrap());
    let g = dy.iter().copied().collect::<Array1<f64>>();
    let dw = g
        .view()
        .insert_axis(ndarray::Axis(1))
        .dot(&xv.insert_axis(ndarray::Axis(0)));
    let dx = w.t().dot(&g).into_shape_with_order(dims).unwrap();
    DenseGrads { dx, dw, db: g }
}
