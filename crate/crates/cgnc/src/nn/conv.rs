use ndarray::{Array1, Array2, Array4, Ix1, Ix4};

use super::ops::{col2im_add, conv_out_size, im2col};
use super::{Initializer, Param, Tensor4};
use crate::error::{Error, Result};

/// 2-D convolution, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param<Ix4>,
    pub bias: Param<Ix1>,
    pub stride: usize,
    pub pad: usize,
}

/// Saved forward inputs needed by [`Conv2d::backward`].
pub struct ConvCache {
    x: Tensor4,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: &mut Initializer,
    ) -> Self {
        Self {
            weight: Param::new(init.kaiming_conv(out_ch, in_ch, k)),
            bias: Param::new(Array1::zeros(out_ch)),
            stride,
            pad,
        }
    }

    /// Same as [`Conv2d::new`] but with an all-zero kernel (output heads).
    pub fn zeros(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::new(Array4::zeros((out_ch, in_ch, k, k))),
            bias: Param::new(Array1::zeros(out_ch)),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim().0
    }

    fn ksize(&self) -> usize {
        self.weight.value.dim().2
    }

    pub fn forward(&self, x: &Tensor4) -> Result<(Tensor4, ConvCache)> {
        let y = self.forward_eval(x)?;
        Ok((y, ConvCache { x: x.clone() }))
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let (b, c, h, w) = x.dim();
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let k = self.ksize();
        let out_h = conv_out_size(h, k, self.stride, self.pad);
        let out_w = conv_out_size(w, k, self.stride, self.pad);
        let wmat = self.weight_matrix();
        let mut y = Array4::zeros((b, self.out_channels(), out_h, out_w));
        for bi in 0..b {
            let cols = im2col(x.index_axis(ndarray::Axis(0), bi), k, self.stride, self.pad, out_h, out_w);
            let out = wmat.dot(&cols);
            let mut y_s = y.index_axis_mut(ndarray::Axis(0), bi);
            for co in 0..self.out_channels() {
                let bias = self.bias.value[co];
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        y_s[(co, oh, ow)] = out[(co, oh * out_w + ow)] + bias;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor4) -> Tensor4 {
        let x = &cache.x;
        let (b, _, h, w) = x.dim();
        let (_, c_out, out_h, out_w) = dy.dim();
        let k = self.ksize();
        let wmat = self.weight_matrix();
        let mut dx = Array4::zeros(x.raw_dim());
        let mut dwmat = Array2::<f64>::zeros(wmat.raw_dim());
        let _ = (h, w);
        for bi in 0..b {
            let cols = im2col(x.index_axis(ndarray::Axis(0), bi), k, self.stride, self.pad, out_h, out_w);
            let mut dyv = Array2::zeros((c_out, out_h * out_w));
            let dy_s = dy.index_axis(ndarray::Axis(0), bi);
            for co in 0..c_out {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        dyv[(co, oh * out_w + ow)] = dy_s[(co, oh, ow)];
                    }
                }
            }
            dwmat += &dyv.dot(&cols.t());
            for co in 0..c_out {
                self.bias.grad[co] += dyv.row(co).sum();
            }
            let dcols = wmat.t().dot(&dyv);
            col2im_add(
                &dcols,
                dx.index_axis_mut(ndarray::Axis(0), bi),
                k,
                self.stride,
                self.pad,
                out_h,
                out_w,
            );
        }
        let dw4 = dwmat
            .into_shape_with_order(self.weight.value.raw_dim())
            .expect("conv weight grad reshape");
        self.weight.grad += &dw4;
        dx
    }

    /// Input gradient only; parameters (and their gradients) are untouched.
    pub fn input_gradient(&self, dy: &Tensor4, input_hw: (usize, usize)) -> Tensor4 {
        let (b, c_out, out_h, out_w) = dy.dim();
        let k = self.ksize();
        let wmat = self.weight_matrix();
        let mut dx = Array4::zeros((b, self.in_channels(), input_hw.0, input_hw.1));
        for bi in 0..b {
            let mut dyv = Array2::zeros((c_out, out_h * out_w));
            let dy_s = dy.index_axis(ndarray::Axis(0), bi);
            for co in 0..c_out {
                for oh in 0..out_h {
                    for ow in 0..out_w {
                        dyv[(co, oh * out_w + ow)] = dy_s[(co, oh, ow)];
                    }
                }
            }
            let dcols = wmat.t().dot(&dyv);
            col2im_add(
                &dcols,
                dx.index_axis_mut(ndarray::Axis(0), bi),
                k,
                self.stride,
                self.pad,
                out_h,
                out_w,
            );
        }
        dx
    }

    fn weight_matrix(&self) -> Array2<f64> {
        let (o, i, kh, kw) = self.weight.value.dim();
        self.weight
            .value
            .view()
            .into_shape_with_order((o, i * kh * kw))
            .expect("conv weight is contiguous")
            .to_owned()
    }
}
