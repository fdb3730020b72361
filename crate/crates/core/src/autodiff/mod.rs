//! Reverse-mode automatic differentiation over dense f64 tensors.

mod check;
mod ops;
mod tensor;

pub use check::{grad_check, grad_check_sampled, GradCheckOpts, GradCheckReport, TensorCheck};
pub use ops::{
    add, add_bias, batchnorm_chw, batchnorm_rows, bce_loss, concat_cols, concat_rows, conv2d,
    gather_rows, hadamard, matmul, mul_scalar, reduce_mean_all, reduce_mean_axis, relu, reshape,
    scale, sigmoid, slice_cols, slice_rows, softmax_last, sub, tanh, transpose2, upsample2x,
};
pub use tensor::{consumers_of, is_grad_enabled, no_grad, scope, topo_order, ScopeGuard, Tensor};
