use ndarray::{Array1, Array2, Array4, Ix1};

use super::{Param, Tensor4};

/// Instance normalization with learnable per-channel affine.
///
/// Statistics are computed per (sample, channel) over the spatial axes.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub gamma: Param<Ix1>,
    pub beta: Param<Ix1>,
    pub eps: f64,
}

pub struct NormCache {
    xhat: Tensor4,
    inv_std: Array2<f64>,
}

impl InstanceNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor4) -> (Tensor4, NormCache) {
        let (b, c, h, w) = x.dim();
        let n = (h * w) as f64;
        let mut xhat = Array4::zeros(x.raw_dim());
        let mut inv_std = Array2::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                let plane = x.slice(ndarray::s![bi, ci, .., ..]);
                let mean = plane.sum() / n;
                let var = plane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[(bi, ci)] = is;
                let mut out = xhat.slice_mut(ndarray::s![bi, ci, .., ..]);
                out.assign(&plane);
                out.mapv_inplace(|v| (v - mean) * is);
            }
        }
        let mut y = xhat.clone();
        for bi in 0..b {
            for ci in 0..c {
                let g = self.gamma.value[ci];
                let be = self.beta.value[ci];
                y.slice_mut(ndarray::s![bi, ci, .., ..])
                    .mapv_inplace(|v| g * v + be);
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Tensor4 {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &NormCache, dy: &Tensor4) -> Tensor4 {
        let (b, c, h, w) = dy.dim();
        let n = (h * w) as f64;
        let mut dx = Array4::zeros(dy.raw_dim());
        for bi in 0..b {
            for ci in 0..c {
                let g = self.gamma.value[ci];
                let is = cache.inv_std[(bi, ci)];
                let xhat = cache.xhat.slice(ndarray::s![bi, ci, .., ..]);
                let dyp = dy.slice(ndarray::s![bi, ci, .., ..]);

                let sum_dy = dyp.sum();
                let sum_dy_xhat = (&dyp * &xhat).sum();
                self.gamma.grad[ci] += sum_dy_xhat;
                self.beta.grad[ci] += sum_dy;

                let mean_dy = sum_dy / n;
                let mean_dy_xhat = sum_dy_xhat / n;
                let mut out = dx.slice_mut(ndarray::s![bi, ci, .., ..]);
                for i in 0..h {
                    for j in 0..w {
                        out[(i, j)] =
                            g * is * (dyp[(i, j)] - mean_dy - xhat[(i, j)] * mean_dy_xhat);
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_to_zero_mean_unit_var() {
        let norm = InstanceNorm2d::new(2);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, i, j)| {
            (c as f64 + 1.0) * (i as f64 - 2.0 * j as f64) + 5.0
        });
        let (y, _) = norm.forward(&x);
        for ci in 0..2 {
            let plane = y.slice(ndarray::s![0, ci, .., ..]);
            let mean = plane.sum() / 16.0;
            let var = plane.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut norm = InstanceNorm2d::new(2);
        norm.gamma.value[0] = 1.3;
        norm.gamma.value[1] = 0.7;
        norm.beta.value[0] = -0.1;
        let x = Array4::from_shape_fn((2, 2, 3, 3), |(b, c, i, j)| {
            ((b * 31 + c * 17 + i * 5 + j) as f64 * 0.37).sin()
        });
        let (y, cache) = norm.forward(&x);
        let dy = y.mapv(|v| (2.0 * v).cos());
        let dx = norm.backward(&cache, &dy);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let yp = norm.forward(&xp).0;
            xp[idx] = orig - h;
            let ym = norm.forward(&xp).0;
            xp[idx] = orig;
            let num = ((&yp - &ym) * &dy).sum() / (2.0 * h);
            assert!(
                (num - dx[idx]).abs() < 1e-5,
                "{idx:?}: num {num} vs ana {}",
                dx[idx]
            );
        }
    }
}
