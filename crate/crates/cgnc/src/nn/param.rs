use ndarray::{Array, ArrayViewMutD, Dimension};

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    pub grad: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        let grad = Array::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Dyn-dimensional view pair handed to the optimizer.
    pub fn as_ref_mut(&mut self, name: impl Into<String>) -> ParamRefMut<'_> {
        ParamRefMut {
            name: name.into(),
            value: self.value.view_mut().into_dyn(),
            grad: self.grad.view_mut().into_dyn(),
        }
    }
}

/// Named mutable view of one parameter and its gradient.
pub struct ParamRefMut<'a> {
    pub name: String,
    pub value: ArrayViewMutD<'a, f64>,
    pub grad: ArrayViewMutD<'a, f64>,
}
