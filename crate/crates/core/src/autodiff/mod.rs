//! Dense tensors, eager primitives, and reverse-mode differentiation with a
//! finite-difference oracle.

mod fd;
mod graph;
mod ops;
mod tensor;

pub use fd::{finite_diff_grad, max_rel_error};
pub use graph::{reverse_grad, ExprGraph, GradResult, NodeId, Op};
pub use ops::{
    eval_affine, eval_cross_entropy, eval_kl, eval_log_softmax, eval_pred_entropy, eval_softmax,
};
pub use tensor::Tensor;
