use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Deterministic parameter initializer driven by one seeded stream.
pub struct Initializer {
    rng: ChaCha12Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha12Rng) -> Self {
        Self { rng }
    }

    fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Kaiming-normal conv kernel `(out, in, k, k)` for ReLU fan-in.
    pub fn kaiming_conv(&mut self, out_ch: usize, in_ch: usize, k: usize) -> Array4<f64> {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        Array4::from_shape_simple_fn((out_ch, in_ch, k, k), || self.gauss() * std)
    }

    /// Kaiming-normal linear weight `(in, out)` with leaky-ReLU gain.
    pub fn kaiming_linear(&mut self, in_f: usize, out_f: usize, leaky_slope: f64) -> Array2<f64> {
        let gain = (2.0 / (1.0 + leaky_slope * leaky_slope)).sqrt();
        let std = gain / (in_f as f64).sqrt();
        Array2::from_shape_simple_fn((in_f, out_f), || self.gauss() * std)
    }

    pub fn normal2(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.gauss() * std)
    }

    /// Matrix with orthonormal columns (rows >= cols) or rows (rows < cols),
    /// via modified Gram-Schmidt on a Gaussian draw.
    pub fn orthogonal(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        if rows >= cols {
            orthonormalize_columns(self.normal2(rows, cols, 1.0))
        } else {
            orthonormalize_columns(self.normal2(cols, rows, 1.0)).reversed_axes()
        }
    }

    /// Random unit vector (power-iteration state init).
    pub fn unit_vector(&mut self, n: usize) -> Array1<f64> {
        let mut v = Array1::from_shape_simple_fn(n, || self.gauss());
        let norm = v.dot(&v).sqrt().max(1e-12);
        v /= norm;
        v
    }
}

fn orthonormalize_columns(mut a: Array2<f64>) -> Array2<f64> {
    let cols = a.ncols();
    for j in 0..cols {
        for i in 0..j {
            let proj = a.column(i).dot(&a.column(j));
            let qi = a.column(i).to_owned();
            a.column_mut(j).scaled_add(-proj, &qi);
        }
        let norm = a.column(j).dot(&a.column(j)).sqrt().max(1e-12);
        a.column_mut(j).mapv_inplace(|v| v / norm);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn orthogonal_columns_are_orthonormal() {
        let mut init = Initializer::new(rng::stream(3, "init", 0));
        let q = init.orthogonal(8, 4);
        for i in 0..4 {
            for j in 0..4 {
                let dot = q.column(i).dot(&q.column(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10, "col {i}x{j}: {dot}");
            }
        }
        // wide case: orthonormal rows
        let q = init.orthogonal(3, 6);
        for i in 0..3 {
            let dot = q.row(i).dot(&q.row(i));
            assert!((dot - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = Initializer::new(rng::stream(7, "init", 0));
        let mut b = Initializer::new(rng::stream(7, "init", 0));
        assert_eq!(a.kaiming_conv(4, 3, 3), b.kaiming_conv(4, 3, 3));
    }
}
