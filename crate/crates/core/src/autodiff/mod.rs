//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod kernels;
mod optim;
mod tensor;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use graph::{Binder, Bindings, Graph, NodeId, NodeRef, Op};
pub use optim::{adam_step, clip_global_norm, sgd_step, OptimizerKind, OptimizerState, Params};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
pub(crate) use kernels::{gemm, softmax_rows};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("shape error at node {node}: {detail}")]
    NodeShape { node: NodeRef, detail: String },
    #[error("non-finite value produced at node {0}")]
    NonFinite(NodeRef),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("input '{0}' is not bound")]
    Unbound(String),
    #[error("node #{0} does not exist")]
    UnknownNode(usize),
    #[error("backward called on {0} before a forward pass from it")]
    NotEvaluated(NodeRef),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("invalid optimiser configuration: {0}")]
    Config(String),
}

/// Draw `mean + exp(0.5 * log_variance) * eps` with `eps ~ N(0, 1)`.
///
/// Inside a graph, use [`Graph::gaussian_sample`] with the noise bound as
/// an input to keep the sample differentiable.
pub fn gaussian_sample<R: Rng + ?Sized>(
    mean: &Tensor,
    log_variance: &Tensor,
    rng: &mut R,
) -> Result<Tensor, AutodiffError> {
    if mean.shape() != log_variance.shape() {
        return Err(AutodiffError::Shape(format!(
            "mean {:?} and log-variance {:?} differ",
            mean.shape(),
            log_variance.shape()
        )));
    }
    let data = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .map(|(m, lv)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * eps
        })
        .collect();
    Tensor::new(mean.shape().to_vec(), data)
}

/// Standard normal noise tensor of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}
