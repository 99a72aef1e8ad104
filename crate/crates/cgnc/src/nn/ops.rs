use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3};

use super::Tensor4;

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Array2<f64>, dy: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v < 0.0 {
            *d *= slope;
        }
    });
    dx
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor4) -> Tensor4 {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(bi, ci, i, j)];
                    y[(bi, ci, 2 * i, 2 * j)] = v;
                    y[(bi, ci, 2 * i + 1, 2 * j)] = v;
                    y[(bi, ci, 2 * i, 2 * j + 1)] = v;
                    y[(bi, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward(dy: &Tensor4) -> Tensor4 {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[(bi, ci, i, j)] = dy[(bi, ci, 2 * i, 2 * j)]
                        + dy[(bi, ci, 2 * i + 1, 2 * j)]
                        + dy[(bi, ci, 2 * i, 2 * j + 1)]
                        + dy[(bi, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    dx
}

pub(crate) fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one sample into a `(C*k*k, out_h*out_w)` patch matrix.
pub(crate) fn im2col(
    x: ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, out_h * out_w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..out_w {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[(row, oh * out_w + ow)] = x[(ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a patch-matrix gradient back onto the input sample.
pub(crate) fn col2im_add(
    dcols: &Array2<f64>,
    mut dx: ArrayViewMut3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) {
    let (c, h, w) = dx.dim();
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oh in 0..out_h {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..out_w {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[(ci, ih as usize, iw as usize)] += dcols[(row, oh * out_w + ow)];
                    }
                }
            }
        }
    }
}
