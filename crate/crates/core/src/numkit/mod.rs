//! Dense compute substrate: matrices, affine maps, losses, Adam and a
//! finite-difference gradient checker. Everything is `f64` and deterministic.

mod adam;
mod gradcheck;
mod matrix;
mod ops;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use ops::{
    affine, affine_row, affine_row_backward, bce_term, binary_cross_entropy,
    categorical_cross_entropy, dot, sigmoid, sigmoid_scalar, softmax, softmax_cross_entropy,
    softmax_into, BinaryWeights, LossGrad, PROB_CLAMP,
};

/// A bundle of learnable matrices visited in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    fn zero_like(&self) -> Vec<Matrix> {
        self.params()
            .into_iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|m| m.data().len()).sum()
    }
}

impl Parameters for Vec<Matrix> {
    fn params(&self) -> Vec<&Matrix> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.iter_mut().collect()
    }
}
