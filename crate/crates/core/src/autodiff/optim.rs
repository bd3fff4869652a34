use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

/// Named trainable parameters.
pub type Params = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning rate, Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Result<Self, AutodiffError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(AutodiffError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first_moment.get(name).map(Vec::as_slice)
    }
}

fn check_grads(params: &Params, grads: &BTreeMap<String, Tensor>) -> Result<(), AutodiffError> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| AutodiffError::Unbound(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(AutodiffError::Shape(format!(
                "gradient for '{name}' has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFiniteGradient);
        }
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * g`.
pub fn sgd_step(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<(), AutodiffError> {
    check_grads(params, grads)?;
    let lr = state.learning_rate;
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        p.data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(p, g)| *p -= lr * g);
    }
    state.step += 1;
    Ok(())
}

/// Adam with bias-corrected moments.
pub fn adam_step(
    params: &mut Params,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<(), AutodiffError> {
    check_grads(params, grads)?;
    let t = state.step + 1;
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((p, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
