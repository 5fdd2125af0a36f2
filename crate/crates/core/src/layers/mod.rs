//! Building blocks with hand-derived backward passes: embeddings with mean
//! pooling, fully-connected layers, and the batch, layer and partitioned
//! normalizers.

mod dense;
mod embedding;
mod norm;

pub use dense::{fc_backward, fc_forward, Activation, FcCache, FcGrads, FcLayer};
pub use embedding::{embed_and_pool, EmbeddingTable, FeatureTables, FIELD_NAMES, NUM_FIELDS};
pub use norm::{
    batch_domain, BnState, DomainStats, LnState, PnState, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};

use crate::tensor::Matrix;

/// A trainable tensor together with its gradient accumulator.
///
/// `touched` records whether any backward pass wrote to the gradient since
/// the last `zero_grad`; the optimizer leaves untouched parameters alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    touched: bool,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            touched: false,
        }
    }

    pub fn zero_grad(&mut self) {
        if self.touched {
            self.grad.fill(0.0);
            self.touched = false;
        }
    }

    pub fn accumulate(&mut self, grad: &Matrix) {
        self.grad
            .add_assign(grad)
            .expect("gradient shape must match parameter");
        self.touched = true;
    }

    pub fn is_touched(&self) -> bool {
        self.touched
    }
}
