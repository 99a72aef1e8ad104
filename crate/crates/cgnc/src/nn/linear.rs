use ndarray::{Array1, Array2, Ix1, Ix2};

use super::{Initializer, Param};

/// Dense layer `y = x W + b` with `W` laid out `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param<Ix2>,
    pub bias: Param<Ix1>,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, init: &mut Initializer) -> Self {
        Self {
            weight: Param::new(init.kaiming_linear(in_f, out_f, 0.0)),
            bias: Param::new(Array1::zeros(out_f)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        (self.forward_eval(x), LinearCache { x: x.clone() })
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    pub fn backward(&mut self, cache: &LinearCache, dy: &Array2<f64>) -> Array2<f64> {
        self.weight.grad += &cache.x.t().dot(dy);
        self.bias.grad += &dy.sum_axis(ndarray::Axis(0));
        dy.dot(&self.weight.value.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut init = Initializer::new(rng::stream(9, "test-init", 0));
        let mut lin = Linear::new(4, 3, &mut init);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.3).sin());
        let (y, cache) = lin.forward(&x);
        let dy = y.mapv(|v| v.cos());
        let dx = lin.backward(&cache, &dy);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in ndarray::indices(x.raw_dim()) {
            let orig = xp[idx];
            xp[idx] = orig + h;
            let yp = lin.forward_eval(&xp);
            xp[idx] = orig - h;
            let ym = lin.forward_eval(&xp);
            xp[idx] = orig;
            let num = ((&yp - &ym) * &dy).sum() / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-7);
        }
        for idx in [(0usize, 0usize), (3, 2), (1, 1)] {
            let orig = lin.weight.value[idx];
            lin.weight.value[idx] = orig + h;
            let yp = lin.forward_eval(&x);
            lin.weight.value[idx] = orig - h;
            let ym = lin.forward_eval(&x);
            lin.weight.value[idx] = orig;
            let num = ((&yp - &ym) * &dy).sum() / (2.0 * h);
            assert!((num - lin.weight.grad[idx]).abs() < 1e-7);
        }
    }
}
