//! Dense N-order tensors and the multilinear operations built on them:
//! pairwise contraction, dummy-tensor convolution, and CP / tensor-ring
//! reconstruction.
//!
//! Layout is row-major with the last index fastest. Convolutions are
//! cross-correlations (no kernel flip) following the index rule
//! `j = s·j′ + k − p`, with zero padding.

mod contract;
mod conv;
mod decomp;
mod dense;
pub mod mtk1;

pub use contract::{contract, matmul};
pub use conv::{
    build_dummy_tensor, conv1d_via_dummy, conv2d_forward, conv2d_input_grad, conv2d_kernel_grad,
    conv2d_via_dummy, conv_output_len, global_avg_pool, DummyTensorSpec,
};
pub use decomp::{cp_reconstruct, tr_reconstruct};
pub use dense::DenseTensor;

pub(crate) use dense::increment_index;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {actual} does not match shape product {expected}")]
    DataLength { expected: usize, actual: usize },

    #[error("axis {axis} has zero extent")]
    ZeroExtent { axis: usize },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("expected an order-{expected} tensor, got order {actual}")]
    OrderMismatch { expected: usize, actual: usize },

    #[error("contraction pair #{pair} (a axis {a_axis}, b axis {b_axis}) pairs extents {a_extent} and {b_extent}")]
    PairExtentMismatch {
        pair: usize,
        a_axis: usize,
        b_axis: usize,
        a_extent: usize,
        b_extent: usize,
    },

    #[error("axis {axis} is out of range for an order-{order} operand")]
    InvalidAxis { axis: usize, order: usize },

    #[error("axis {axis} appears in more than one contraction pair")]
    DuplicateAxis { axis: usize },

    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),

    #[error("convolution geometry: {0}")]
    Geometry(String),

    #[error("CP factor {index} has {actual} columns, expected rank {expected}")]
    RankMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },

    #[error("tensor-ring bond mismatch between core {left} (right bond {left_bond}) and core {right} (left bond {right_bond})")]
    BondMismatch {
        left: usize,
        right: usize,
        left_bond: usize,
        right_bond: usize,
    },

    #[error("{0}")]
    Invalid(String),
}
