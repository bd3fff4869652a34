use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use super::train::{run_epoch, shuffled, TrainingConfig};
use super::{ModelError, Predictor};
use crate::autodiff::{softmax_rows, Bindings, Graph, OptimizerState, Params, Tensor};
use crate::data::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden_layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub n_classes: usize,
    pub input_dim: usize,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl ClassifierConfig {
    /// Three fully connected layers sized for 16x16x3 inputs.
    pub fn small(input_dim: usize, n_classes: usize) -> Self {
        Self {
            hidden_layer_sizes: vec![64, 32],
            activation: Activation::Relu,
            n_classes,
            input_dim,
            training: TrainingConfig {
                epochs: 10,
                batch_size: 64,
                ..TrainingConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_layer_sizes.is_empty() || self.hidden_layer_sizes.contains(&0) {
            return Err(ModelError::Config(
                "need at least one non-empty hidden layer".into(),
            ));
        }
        if self.n_classes < 2 || self.input_dim == 0 {
            return Err(ModelError::Config("need n_classes >= 2 and input_dim > 0".into()));
        }
        self.training.validate()
    }

    /// Short architecture tag such as `relu-64-32`.
    pub fn arch_tag(&self) -> String {
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        let sizes: Vec<String> = self.hidden_layer_sizes.iter().map(|s| s.to_string()).collect();
        format!("{act}-{}", sizes.join("-"))
    }

    pub(crate) fn mlp(&self) -> Mlp {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_layer_sizes);
        sizes.push(self.n_classes);
        Mlp::new("clf", sizes, self.activation, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHistory {
    pub epochs: Vec<EpochStats>,
}

impl ClassifierHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }
}

/// Fully connected softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: Params,
    pub history: ClassifierHistory,
}

pub(crate) fn batch_inputs(dataset: &Dataset, idx: &[usize]) -> Tensor {
    let dim = dataset.input_dim();
    let mut x = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        x.extend_from_slice(dataset.records[i].pixels.data());
    }
    Tensor::new(vec![idx.len(), dim], x).unwrap()
}

pub(crate) fn one_hot(rows: &[usize], width: usize) -> Tensor {
    let mut t = vec![0.0; rows.len() * width];
    for (r, &v) in rows.iter().enumerate() {
        t[r * width + v] = 1.0;
    }
    Tensor::new(vec![rows.len(), width], t).unwrap()
}

impl Classifier {
    /// Freshly initialised, untrained classifier.
    pub fn initialize(config: ClassifierConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Params::new();
        config
            .mlp()
            .init(&mut params, &mut ChaCha8Rng::seed_from_u64(config.training.seed));
        Ok(Self {
            config,
            params,
            history: ClassifierHistory::default(),
        })
    }

    pub fn from_parts(config: ClassifierConfig, params: Params) -> Result<Self, ModelError> {
        config.validate()?;
        let mlp = config.mlp();
        for l in 0..mlp.n_layers() {
            for (name, shape) in [
                (mlp.weight_name(l), vec![mlp.sizes[l], mlp.sizes[l + 1]]),
                (mlp.bias_name(l), vec![mlp.sizes[l + 1]]),
            ] {
                match params.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    _ => {
                        return Err(ModelError::Config(format!(
                            "parameter '{name}' missing or misshapen"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            config,
            params,
            history: ClassifierHistory::default(),
        })
    }

    /// Number of hidden layers, i.e. valid `layer_index` values for
    /// [`Classifier::hidden_activations`].
    pub fn n_hidden(&self) -> usize {
        self.config.hidden_layer_sizes.len()
    }

    pub fn logits_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        if x.len() != rows * self.config.input_dim {
            return Err(ModelError::Shape(format!(
                "expected {} values per image, got {}",
                self.config.input_dim,
                x.len() / rows.max(1)
            )));
        }
        Ok(self.config.mlp().forward(&self.params, x, rows))
    }

    /// Activations after hidden layer `layer_index`, one row per image.
    pub fn hidden_activations(
        &self,
        x: &[f64],
        rows: usize,
        layer_index: usize,
    ) -> Result<Vec<f64>, ModelError> {
        if layer_index >= self.n_hidden() {
            return Err(ModelError::Config(format!(
                "layer {layer_index} is not a hidden layer (have {})",
                self.n_hidden()
            )));
        }
        if x.len() != rows * self.config.input_dim {
            return Err(ModelError::Shape("input size mismatch".into()));
        }
        Ok(self
            .config
            .mlp()
            .forward_layers(&self.params, x, rows)
            .swap_remove(layer_index))
    }

    /// Gradient of the `target_class` log-odds (its logit against the
    /// log-sum-exp of the other logits) with respect to the activations of
    /// hidden layer `layer_index`, one row per activation row. For two
    /// classes this is the logit of `p(target)`.
    pub fn logit_gradient_at_layer(
        &self,
        activations: &[f64],
        rows: usize,
        layer_index: usize,
        target_class: usize,
    ) -> Result<Vec<f64>, ModelError> {
        let width = *self
            .config
            .hidden_layer_sizes
            .get(layer_index)
            .ok_or_else(|| ModelError::Config(format!("layer {layer_index} is not a hidden layer")))?;
        if target_class >= self.config.n_classes {
            return Err(ModelError::Config(format!("class {target_class} out of range")));
        }
        let mut g = Graph::new();
        let h = g.input("h");
        let logits = self.config.mlp().build_from(&mut g, h, layer_index + 1);
        let mask = g.input("mask");
        let picked = g.mul(logits, mask);
        let total = g.sum(picked);
        let mut inputs = Bindings::new();
        inputs.insert(
            "h".into(),
            Tensor::new(vec![rows, width], activations.to_vec())?.with_requires_grad(true),
        );
        // d(log-odds)/d(logits) = e_target - softmax over the other classes.
        let k = self.config.n_classes;
        let logits_now = self
            .config
            .mlp()
            .forward_from(&self.params, activations, rows, layer_index + 1);
        let mut seed = vec![0.0; rows * k];
        for (row, z) in seed.chunks_mut(k).zip(logits_now.chunks(k)) {
            let max = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != target_class)
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
            let denom: f64 = (0..k)
                .filter(|&j| j != target_class)
                .map(|j| (z[j] - max).exp())
                .sum();
            for j in 0..k {
                row[j] = if j == target_class {
                    1.0
                } else {
                    -(z[j] - max).exp() / denom
                };
            }
        }
        inputs.insert("mask".into(), Tensor::new(vec![rows, k], seed)?);
        let frozen: Params = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.clone().with_requires_grad(false)))
            .collect();
        g.forward(total, &(&frozen, &inputs))?;
        let grads = g.backward(total)?;
        Ok(grads["h"].data().to_vec())
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64, ModelError> {
        if dataset.is_empty() {
            return Ok(0.0);
        }
        let idx: Vec<usize> = (0..dataset.len()).collect();
        let mut correct = 0usize;
        for chunk in idx.chunks(512) {
            let x = batch_inputs(dataset, chunk);
            let logits = self.logits_batch(x.data(), chunk.len())?;
            for (row, &i) in logits.chunks(self.config.n_classes).zip(chunk) {
                if argmax(row) == dataset.records[i].class_label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |b, (i, &v)| if v > b.1 { (i, v) } else { b },
        )
        .0
}

impl Predictor for Classifier {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        let logits = self.logits_batch(x, rows)?;
        Ok(softmax_rows(&logits, self.config.n_classes))
    }
}

/// Minibatch cross-entropy training with gradient clipping.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierConfig) -> Result<Classifier, ModelError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if dataset.input_dim() != config.input_dim || dataset.n_classes != config.n_classes {
        return Err(ModelError::Shape(format!(
            "dataset has input_dim {} and {} classes, config expects {} and {}",
            dataset.input_dim(),
            dataset.n_classes,
            config.input_dim,
            config.n_classes
        )));
    }
    let mut model = Classifier::initialize(config.clone())?;
    let mlp = config.mlp();
    let mut g = Graph::new();
    let x = g.input("x");
    let y = g.input("y");
    let logits = mlp.build(&mut g, x);
    g.label(logits, "logits");
    let loss = g.cross_entropy(logits, y);
    g.label(loss, "loss");

    let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed);
    rng.set_stream(1);
    let mut state = OptimizerState::new(config.training.learning_rate)?;
    let n_classes = config.n_classes;
    for _ in 0..config.training.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let order = shuffled(dataset.len(), &mut rng);
        run_epoch(
            &mut g,
            loss,
            &mut model.params,
            &mut state,
            &config.training,
            &order,
            &mut rng,
            |idx, _| {
                let labels: Vec<usize> = idx.iter().map(|&i| dataset.records[i].class_label).collect();
                let mut b = Bindings::new();
                b.insert("x".into(), batch_inputs(dataset, idx));
                b.insert("y".into(), one_hot(&labels, n_classes));
                b
            },
            |graph, idx| {
                loss_sum += graph.value(loss).unwrap().data()[0] * idx.len() as f64;
                let z = graph.value(logits).unwrap();
                for (row, &i) in z.data().chunks(n_classes).zip(idx) {
                    if argmax(row) == dataset.records[i].class_label {
                        correct += 1;
                    }
                }
            },
        )?;
        let n = dataset.len() as f64;
        let stats = EpochStats {
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        };
        log::debug!(
            "classifier epoch loss {:.5} acc {:.4}",
            stats.loss,
            stats.accuracy
        );
        model.history.epochs.push(stats);
    }
    Ok(model)
}
