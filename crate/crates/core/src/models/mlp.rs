use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gemm, Graph, NodeId, Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Stack of fully connected layers whose parameters live in a shared
/// [`Params`] map under `<prefix>.w<i>` / `<prefix>.b<i>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    /// Layer widths including input and output.
    pub sizes: Vec<usize>,
    pub activation: Activation,
    /// Apply the activation after the final layer too.
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(prefix: &str, sizes: Vec<usize>, activation: Activation, activate_last: bool) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        Self {
            prefix: prefix.to_string(),
            sizes,
            activation,
            activate_last,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{}", self.prefix, layer)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{}", self.prefix, layer)
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut Params, rng: &mut R) {
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            params.insert(
                self.weight_name(l),
                Tensor::new(vec![fan_in, fan_out], w)
                    .unwrap()
                    .with_requires_grad(true),
            );
            params.insert(
                self.bias_name(l),
                Tensor::zeros(vec![fan_out]).with_requires_grad(true),
            );
        }
    }

    /// Add this network to `graph`, starting at layer `from` with `input`.
    pub fn build_from(&self, graph: &mut Graph, input: NodeId, from: usize) -> NodeId {
        let mut h = input;
        for l in from..self.n_layers() {
            let w = graph.input(self.weight_name(l));
            let b = graph.input(self.bias_name(l));
            let z = graph.matmul(h, w);
            h = graph.add(z, b);
            if l + 1 < self.n_layers() || self.activate_last {
                h = match self.activation {
                    Activation::Relu => graph.relu(h),
                    Activation::Tanh => graph.tanh(h),
                };
            }
        }
        h
    }

    pub fn build(&self, graph: &mut Graph, input: NodeId) -> NodeId {
        self.build_from(graph, input, 0)
    }

    /// Forward a row-major batch without a graph. Returns every layer's
    /// output, so `out[i]` is the activation after layer `i`.
    pub fn forward_layers(&self, params: &Params, x: &[f64], rows: usize) -> Vec<Vec<f64>> {
        self.forward_layers_from(params, x, rows, 0)
    }

    /// Like [`Mlp::forward_layers`] but `x` is the input to layer `from`.
    pub fn forward_layers_from(&self, params: &Params, x: &[f64], rows: usize, from: usize) -> Vec<Vec<f64>> {
        let mut outs = Vec::with_capacity(self.n_layers());
        let mut h = x.to_vec();
        for l in from..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = params[&self.weight_name(l)].data();
            let b = params[&self.bias_name(l)].data();
            let mut z = vec![0.0; rows * fan_out];
            for r in z.chunks_mut(fan_out) {
                r.copy_from_slice(b);
            }
            gemm(rows, fan_in, fan_out, &h, false, w, false, &mut z, true);
            if l + 1 < self.n_layers() || self.activate_last {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            outs.push(z.clone());
            h = z;
        }
        outs
    }

    pub fn forward(&self, params: &Params, x: &[f64], rows: usize) -> Vec<f64> {
        self.forward_layers(params, x, rows).pop().unwrap()
    }

    pub fn forward_from(&self, params: &Params, x: &[f64], rows: usize, from: usize) -> Vec<f64> {
        self.forward_layers_from(params, x, rows, from)
            .pop()
            .unwrap_or_else(|| x.to_vec())
    }
}
