//! Dense tensors, reverse-mode differentiation and optimization.

mod gradcheck;
mod graph;
mod opsuite;
mod optim;
pub mod serialize;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport, ParamError};
pub use graph::{silu, silu_prime, silu_second, CustomOp, Gradients, Graph, NodeId, OP_NAMES};
pub use opsuite::{op_suite, OpCheck};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use tensor::{pairwise_sum, Tensor};
