//! Named, trainable tensors and their learning-rate grouping.

use crate::numerics::matrix::Matrix;

/// Learning-rate group a parameter belongs to. The adapter stands in for the
/// backbone and trains at its own (lower) rate; everything else is head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    BackboneAdapter,
    BgformerHead,
}

/// A named value matrix paired with a gradient buffer of the same shape.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub group: ParamGroup,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix, group: ParamGroup) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        ParamTensor {
            name: name.into(),
            value,
            grad,
            group,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}
