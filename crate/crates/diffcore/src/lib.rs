//! Minimal reverse-mode differentiation for small Siamese networks.
//!
//! A [`Graph`] is a static list of nodes built in topological order. Each
//! evaluation in training mode caches the activations needed by
//! [`Graph::backward`], which accumulates gradients into the graph's
//! [`Parameter`]s. Gradient flow is blocked by [`Op::StopGrad`] and
//! [`Op::External`] nodes, which is how the Siamese target branch is cut.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
mod kernels;
pub mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{Checkpoint, TensorData};
pub use error::{DiffError, Result};
pub use gradcheck::{grad_check, GradCheck, GradCheckOptions};
pub use graph::{
    BatchNormStats, ExternalHook, Graph, Inputs, Mode, Node, NodeId, Op, ParamId, Parameter,
    StatsId, BN_EPS, BN_MOMENTUM,
};
pub use optim::{cosine_lr, ema_update, sgd_step, OptimizerState};
pub use scalar::{gemm, DType, Scalar};
pub use tensor::Tensor;
