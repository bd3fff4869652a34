use serde::{Deserialize, Serialize};

use super::{check_spec_against, record_concept, ConceptSpec, EstimatorError};
use crate::data::Dataset;
use crate::models::Classifier;

/// A CAV that separates the concept no better than this gets a warning.
pub const MIN_CAV_ACCURACY: f64 = 0.55;

const LOGREG_STEPS: usize = 300;
const LOGREG_LR: f64 = 0.5;
const LOGREG_L2: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavReport {
    pub score: f64,
    pub target_class: usize,
    pub layer_index: usize,
    /// Training accuracy of the concept separator.
    pub cav_accuracy: f64,
    /// Number of target-class examples scored.
    pub n_examples: usize,
    pub warnings: Vec<String>,
}

/// Full-batch logistic regression on centred, uniformly rescaled features.
/// Returns the separating normal and the training accuracy.
fn fit_cav(x: &[f64], labels: &[f64], dim: usize) -> (Vec<f64>, f64) {
    let n = labels.len();
    let mut mean = vec![0.0; dim];
    for row in x.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut scale = vec![0.0; dim];
    for row in x.chunks(dim) {
        for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    // One global scale keeps the geometry of the activation space.
    let global = (scale.iter().sum::<f64>() / dim as f64).sqrt();
    let global = if global > 1e-12 { global } else { 1.0 };
    let z: Vec<f64> = x
        .chunks(dim)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) / global)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..LOGREG_STEPS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (row, &y) in z.chunks(dim).zip(labels) {
            let logit: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = crate::autodiff::sigmoid(logit) - y;
            for (g, v) in grad.iter_mut().zip(row) {
                *g += err * v / n as f64;
            }
            gb += err / n as f64;
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= LOGREG_LR * (g + LOGREG_L2 * *wi);
        }
        b -= LOGREG_LR * gb;
    }
    let correct = z
        .chunks(dim)
        .zip(labels)
        .filter(|(row, &y)| {
            let logit: f64 = row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (logit > 0.0) == (y > 0.5)
        })
        .count();
    (w, correct as f64 / n as f64)
}

/// Simplified TCAV: fit a concept activation vector on a balanced set of
/// concept-present / concept-absent activations at `layer_index`, then
/// report the fraction of `target_class` records whose target logit
/// increases along it. Zero derivatives count as one half.
pub fn tcav_score(
    classifier: &Classifier,
    layer_index: usize,
    dataset: &Dataset,
    spec: &ConceptSpec,
    target_class: usize,
) -> Result<TcavReport, EstimatorError> {
    check_spec_against(spec, dataset)?;
    if target_class >= classifier.config.n_classes {
        return Err(EstimatorError::Config(format!(
            "target class {target_class} out of range"
        )));
    }
    let dim = dataset.input_dim();
    let width = *classifier
        .config
        .hidden_layer_sizes
        .get(layer_index)
        .ok_or_else(|| EstimatorError::Config(format!("layer {layer_index} is not a hidden layer")))?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if record_concept(r, spec.axis)? == spec.present {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.is_empty() {
        return Err(EstimatorError::MissingConcept(spec.present));
    }
    if neg.is_empty() {
        return Err(EstimatorError::Config("no concept-absent examples".into()));
    }
    let per_side = pos.len().min(neg.len());
    let chosen: Vec<usize> = pos[..per_side].iter().chain(&neg[..per_side]).copied().collect();
    let labels: Vec<f64> = (0..2 * per_side)
        .map(|i| if i < per_side { 1.0 } else { 0.0 })
        .collect();
    let activations = |idx: &[usize]| -> Result<Vec<f64>, EstimatorError> {
        let mut x = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            x.extend_from_slice(dataset.records[i].pixels.data());
        }
        Ok(classifier.hidden_activations(&x, idx.len(), layer_index)?)
    };
    let (cav, cav_accuracy) = fit_cav(&activations(&chosen)?, &labels, width);
    let mut warnings = Vec::new();
    if cav_accuracy <= MIN_CAV_ACCURACY {
        warnings.push(format!(
            "concept activations are nearly inseparable at layer {layer_index} (CAV accuracy {cav_accuracy:.3})"
        ));
    }

    let targets: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.records[i].class_label == target_class)
        .collect();
    if targets.is_empty() {
        return Err(EstimatorError::Empty(format!(
            "no records of class {target_class}"
        )));
    }
    let mut credit = 0.0;
    for chunk in targets.chunks(512) {
        let acts = activations(chunk)?;
        let grads = classifier.logit_gradient_at_layer(&acts, chunk.len(), layer_index, target_class)?;
        for g in grads.chunks(width) {
            let d: f64 = g.iter().zip(&cav).map(|(a, b)| a * b).sum();
            credit += if d > 0.0 {
                1.0
            } else if d == 0.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(TcavReport {
        score: credit / targets.len() as f64,
        target_class,
        layer_index,
        cav_accuracy,
        n_examples: targets.len(),
        warnings,
    })
}
