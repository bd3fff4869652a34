use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{
    adam_step, clip_global_norm, sgd_step, Bindings, Graph, NodeId, OptimizerKind, OptimizerState, Params,
};

/// Shuffled `0..n`.
pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// `n` draws that pick a non-empty group uniformly, then a member of it
/// uniformly.
pub(crate) fn balanced_order(groups: &[Vec<usize>], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let groups: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
    (0..n)
        .map(|_| {
            let g = groups[rng.random_range(0..groups.len())];
            g[rng.random_range(0..g.len())]
        })
        .collect()
}

pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Global L2 norm gradients are clipped to.
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(ModelError::Config("learning_rate must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(ModelError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One pass over `order` in minibatches.
///
/// `bind` fills the per-batch inputs for the given example indices;
/// `observe` sees the evaluated graph after each step (before the update).
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_epoch(
    graph: &mut Graph,
    loss: NodeId,
    params: &mut Params,
    state: &mut OptimizerState,
    cfg: &TrainingConfig,
    order: &[usize],
    rng: &mut ChaCha8Rng,
    mut bind: impl FnMut(&[usize], &mut ChaCha8Rng) -> Bindings,
    mut observe: impl FnMut(&Graph, &[usize]),
) -> Result<(), ModelError> {
    for batch in order.chunks(cfg.batch_size) {
        let inputs = bind(batch, rng);
        let value = graph.forward(loss, &(&*params, &inputs))?.data()[0];
        if !value.is_finite() {
            return Err(ModelError::Diverged(format!("loss became {value}")));
        }
        observe(graph, batch);
        let mut grads = graph.backward(loss)?;
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            return Err(ModelError::Diverged("gradient norm is not finite".into()));
        }
        match cfg.optimizer {
            OptimizerKind::Sgd => sgd_step(params, &grads, state)?,
            OptimizerKind::Adam => adam_step(params, &grads, state)?,
        }
    }
    Ok(())
}
