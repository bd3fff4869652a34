//! Define-then-run computation graph with reverse-mode differentiation.
//!
//! Nodes can only reference nodes created before them, so node index
//! order is a topological order and the graph is acyclic by construction.
//! A graph is built once per model architecture and re-evaluated with new
//! bindings for every minibatch; leaves are looked up by name.

use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{gemm, log_softmax_rows, softmax_rows};
use super::{AutodiffError, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensor bindings for graph leaves.
pub type Bindings = BTreeMap<String, Tensor>;

/// Lookup of leaf tensors by name.
pub trait Binder {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Binder for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<A: Binder, B: Binder> Binder for (&A, &B) {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.lookup(name).or_else(|| self.1.lookup(name))
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    /// Leaf bound by name at forward time.
    Input(String),
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right operand may be a row vector broadcast
    /// over rows, or a single scalar.
    Add(NodeId, NodeId),
    /// Elementwise multiply; the right operand may be a single scalar.
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    /// Log-softmax over the last axis.
    LogSoftmax(NodeId),
    /// Mean over rows of `-sum_c target * log_softmax(logits)`.
    CrossEntropy {
        logits: NodeId,
        target: NodeId,
    },
    /// Sum over features of Bernoulli cross-entropy, mean over rows.
    BinaryCrossEntropyWithLogits {
        logits: NodeId,
        target: NodeId,
    },
    /// Mean squared error over all elements.
    MeanSquaredError(NodeId, NodeId),
    /// `KL(N(mean, exp(log_var)) || N(0, I))`, summed over the last axis
    /// and averaged over rows.
    GaussianKl {
        mean: NodeId,
        log_var: NodeId,
    },
    /// Concatenation along the last axis.
    Concat(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    /// `mean + exp(0.5 * log_var) * noise` (reparameterised sample).
    GaussianSample {
        mean: NodeId,
        log_var: NodeId,
        noise: NodeId,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BinaryCrossEntropyWithLogits { .. } => "bce_with_logits",
            Op::MeanSquaredError(..) => "mse",
            Op::GaussianKl { .. } => "gaussian_kl",
            Op::Concat(_) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GaussianSample { .. } => "gaussian_sample",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::MeanSquaredError(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Reshape(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::CrossEntropy { logits, target } | Op::BinaryCrossEntropyWithLogits { logits, target } => {
                vec![*logits, *target]
            }
            Op::GaussianKl { mean, log_var } => vec![*mean, *log_var],
            Op::Concat(xs) => xs.clone(),
            Op::GaussianSample { mean, log_var, noise } => vec![*mean, *log_var, *noise],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// Identifies a node in error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub index: usize,
    pub tag: &'static str,
    pub label: Option<String>,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.label {
            Some(l) => write!(f, "#{} {} '{}'", self.index, self.tag, l),
            None => write!(f, "#{} {}", self.index, self.tag),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    /// Leaf names whose bound tensor requested gradients in the last forward.
    trainable: Vec<bool>,
    evaluated_root: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for id in op.inputs() {
            assert!(id.0 < self.nodes.len(), "node refers to a later node");
        }
        self.nodes.push(Node { op, label: None });
        self.values.push(None);
        self.trainable.push(false);
        self.evaluated_root = None;
        NodeId(self.nodes.len() - 1)
    }

    /// Attach a human-readable label used in error messages.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) -> NodeId {
        self.nodes[id.0].label = Some(label.into());
        id
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        let id = self.push(Op::Input(name.clone()));
        self.label(id, name)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { logits, target })
    }
    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> NodeId {
        self.push(Op::BinaryCrossEntropyWithLogits { logits, target })
    }
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MeanSquaredError(a, b))
    }
    pub fn gaussian_kl(&mut self, mean: NodeId, log_var: NodeId) -> NodeId {
        self.push(Op::GaussianKl { mean, log_var })
    }
    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat(parts))
    }
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }
    pub fn gaussian_sample(&mut self, mean: NodeId, log_var: NodeId, noise: NodeId) -> NodeId {
        self.push(Op::GaussianSample { mean, log_var, noise })
    }

    fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef {
            index: id,
            tag: self.nodes[id].op.tag(),
            label: self.nodes[id].label.clone(),
        }
    }

    fn shape_err(&self, id: usize, detail: String) -> AutodiffError {
        AutodiffError::NodeShape {
            node: self.node_ref(id),
            detail,
        }
    }

    /// Nodes `root` depends on, in ascending (topological) order.
    fn reachable(&self, root: NodeId) -> Vec<usize> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root.0];
        while let Some(i) = stack.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            for inp in self.nodes[i].op.inputs() {
                if !seen[inp.0] {
                    stack.push(inp.0);
                }
            }
        }
        (0..=root.0).filter(|&i| seen[i]).collect()
    }

    /// Value computed for `id` by the most recent forward pass.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    /// Evaluate every node `root` depends on and return the root value.
    pub fn forward<B: Binder>(&mut self, root: NodeId, bindings: &B) -> Result<&Tensor, AutodiffError> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(root.0));
        }
        self.evaluated_root = None;
        for v in &mut self.values {
            *v = None;
        }
        for id in self.reachable(root) {
            let (value, trainable) = self.eval_node(id, bindings)?;
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite(self.node_ref(id)));
            }
            self.values[id] = Some(value);
            self.trainable[id] = trainable;
        }
        self.evaluated_root = Some(root);
        Ok(self.values[root.0].as_ref().unwrap())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id.0].as_ref().expect("input evaluated first")
    }

    fn eval_node<B: Binder>(&self, id: usize, bindings: &B) -> Result<(Tensor, bool), AutodiffError> {
        let op = &self.nodes[id].op;
        let out = match op {
            Op::Input(name) => {
                let t = bindings
                    .lookup(name)
                    .ok_or_else(|| AutodiffError::Unbound(name.clone()))?;
                let mut v = t.clone();
                v.clear_grad();
                return Ok((v, t.requires_grad()));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(
                        self.shape_err(id, format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()))
                    );
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
                Tensor::new(vec![m, n], c)?
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mode = self.broadcast_mode(id, a, b, true)?;
                let mut out = a.data().to_vec();
                match mode {
                    Broadcast::Same => out.iter_mut().zip(b.data()).for_each(|(o, y)| *o += y),
                    Broadcast::Row(cols) => out
                        .chunks_mut(cols)
                        .for_each(|r| r.iter_mut().zip(b.data()).for_each(|(o, y)| *o += y)),
                    Broadcast::Scalar => {
                        let s = b.data()[0];
                        out.iter_mut().for_each(|o| *o += s)
                    }
                }
                Tensor::new(a.shape().to_vec(), out)?
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mode = self.broadcast_mode(id, a, b, false)?;
                let out: Vec<f64> = match mode {
                    Broadcast::Same => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
                    Broadcast::Scalar => {
                        let s = b.data()[0];
                        a.data().iter().map(|x| x * s).collect()
                    }
                    Broadcast::Row(_) => unreachable!(),
                };
                Tensor::new(a.shape().to_vec(), out)?
            }
            Op::Relu(a) => map(self.val(*a), |x| x.max(0.0)),
            Op::Sigmoid(a) => map(self.val(*a), sigmoid),
            Op::Tanh(a) => map(self.val(*a), f64::tanh),
            Op::Softmax(a) => {
                let a = self.val(*a);
                let (_, cols) = a.as_matrix_dims();
                Tensor::new(a.shape().to_vec(), softmax_rows(a.data(), cols))?
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                let (_, cols) = a.as_matrix_dims();
                Tensor::new(a.shape().to_vec(), log_softmax_rows(a.data(), cols))?
            }
            Op::CrossEntropy { logits, target } => {
                let (z, t) = (self.val(*logits), self.val(*target));
                self.same_shape(id, z, t)?;
                let (rows, cols) = z.as_matrix_dims();
                let ls = log_softmax_rows(z.data(), cols);
                let total: f64 = ls.iter().zip(t.data()).map(|(l, t)| -t * l).sum();
                Tensor::scalar(total / rows as f64)
            }
            Op::BinaryCrossEntropyWithLogits { logits, target } => {
                let (z, t) = (self.val(*logits), self.val(*target));
                self.same_shape(id, z, t)?;
                let (rows, _) = z.as_matrix_dims();
                let total: f64 = z
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
                    .sum();
                Tensor::scalar(total / rows as f64)
            }
            Op::MeanSquaredError(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                self.same_shape(id, a, b)?;
                let n = a.len().max(1) as f64;
                let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
                Tensor::scalar(total / n)
            }
            Op::GaussianKl { mean, log_var } => {
                let (m, lv) = (self.val(*mean), self.val(*log_var));
                self.same_shape(id, m, lv)?;
                let (rows, _) = m.as_matrix_dims();
                let total: f64 = m
                    .data()
                    .iter()
                    .zip(lv.data())
                    .map(|(&mu, &lv)| -0.5 * (1.0 + lv - mu * mu - lv.exp()))
                    .sum();
                Tensor::scalar(total / rows as f64)
            }
            Op::Concat(parts) => {
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                if vals.is_empty() {
                    return Err(self.shape_err(id, "concat of zero tensors".into()));
                }
                let rows = vals[0].as_matrix_dims().0;
                if vals.iter().any(|v| v.as_matrix_dims().0 != rows) {
                    let shapes: Vec<_> = vals.iter().map(|v| v.shape().to_vec()).collect();
                    return Err(self.shape_err(id, format!("row counts differ: {shapes:?}")));
                }
                let widths: Vec<usize> = vals.iter().map(|v| v.as_matrix_dims().1).collect();
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (v, &w) in vals.iter().zip(&widths) {
                        out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                    }
                }
                Tensor::new(vec![rows, total], out)?
            }
            Op::Reshape(a, shape) => {
                let a = self.val(*a);
                a.reshape(shape.clone()).map_err(|_| {
                    self.shape_err(id, format!("cannot reshape {:?} to {:?}", a.shape(), shape))
                })?
            }
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(*a);
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len().max(1) as f64)
            }
            Op::GaussianSample { mean, log_var, noise } => {
                let (m, lv, e) = (self.val(*mean), self.val(*log_var), self.val(*noise));
                self.same_shape(id, m, lv)?;
                self.same_shape(id, m, e)?;
                let out = m
                    .data()
                    .iter()
                    .zip(lv.data())
                    .zip(e.data())
                    .map(|((mu, lv), eps)| mu + (0.5 * lv).exp() * eps)
                    .collect();
                Tensor::new(m.shape().to_vec(), out)?
            }
        };
        Ok((out, false))
    }

    fn same_shape(&self, id: usize, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
        if a.shape() != b.shape() {
            return Err(self.shape_err(id, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn broadcast_mode(
        &self,
        id: usize,
        a: &Tensor,
        b: &Tensor,
        allow_row: bool,
    ) -> Result<Broadcast, AutodiffError> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::Same);
        }
        if b.len() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let (_, cols) = a.as_matrix_dims();
        if allow_row && b.shape().len() == 1 && b.len() == cols {
            return Ok(Broadcast::Row(cols));
        }
        Err(self.shape_err(
            id,
            format!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape()),
        ))
    }

    /// Reverse pass from `root`, which must be the scalar root of the last
    /// forward. Returns gradients for every bound leaf that requested them.
    pub fn backward(&mut self, root: NodeId) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
        if self.evaluated_root != Some(root) {
            return Err(AutodiffError::NotEvaluated(self.node_ref_checked(root)));
        }
        let root_val = self.val(root);
        if root_val.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let order = self.reachable(root);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();
        for &id in order.iter().rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Op::Input(name) = &self.nodes[id].op {
                if self.trainable[id] {
                    let v = self.val(NodeId(id));
                    let mut t = Tensor::new(v.shape().to_vec(), g)?;
                    t.clear_grad();
                    match out.get_mut(name) {
                        Some(existing) => {
                            let existing: &mut Tensor = existing;
                            existing
                                .data_mut()
                                .iter_mut()
                                .zip(t.data())
                                .for_each(|(e, x)| *e += x);
                        }
                        None => {
                            out.insert(name.clone(), t);
                        }
                    }
                }
                continue;
            }
            for (input, contrib) in self.backward_node(id, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for g in out.values() {
            if !g.is_finite() {
                return Err(AutodiffError::NonFiniteGradient);
            }
        }
        Ok(out)
    }

    fn node_ref_checked(&self, id: NodeId) -> NodeRef {
        if id.0 < self.nodes.len() {
            self.node_ref(id.0)
        } else {
            NodeRef {
                index: id.0,
                tag: "unknown",
                label: None,
            }
        }
    }

    fn backward_node(&self, id: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let out = self.values[id].as_ref().unwrap();
        match &self.nodes[id].op {
            Op::Input(_) => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, bv.data(), true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g, false, &mut gb, false);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let gb = if av.shape() == bv.shape() {
                    g.to_vec()
                } else if bv.len() == 1 {
                    vec![g.iter().sum()]
                } else {
                    let cols = bv.len();
                    let mut acc = vec![0.0; cols];
                    for r in g.chunks(cols) {
                        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
                    }
                    acc
                };
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if av.shape() == bv.shape() {
                    let ga = g.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb = g.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    vec![(*a, ga), (*b, gb)]
                } else {
                    let s = bv.data()[0];
                    let ga = g.iter().map(|g| g * s).collect();
                    let gb = vec![g.iter().zip(av.data()).map(|(g, x)| g * x).sum()];
                    vec![(*a, ga), (*b, gb)]
                }
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                let ga = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*a, ga)]
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*a, ga)]
            }
            Op::Tanh(a) => {
                let ga = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                vec![(*a, ga)]
            }
            Op::Softmax(a) => {
                let (_, cols) = out.as_matrix_dims();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a) => {
                let (_, cols) = out.as_matrix_dims();
                let mut ga = vec![0.0; g.len()];
                for ((gr, lr), dr) in g
                    .chunks(cols)
                    .zip(out.data().chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, g), l) in dr.iter_mut().zip(gr).zip(lr) {
                        *d = g - l.exp() * gsum;
                    }
                }
                vec![(*a, ga)]
            }
            Op::CrossEntropy { logits, target } => {
                let (z, t) = (self.val(*logits), self.val(*target));
                let (rows, cols) = z.as_matrix_dims();
                let scale = g[0] / rows as f64;
                let p = softmax_rows(z.data(), cols);
                let ls = log_softmax_rows(z.data(), cols);
                let mut gz = vec![0.0; z.len()];
                for ((gr, pr), tr) in gz.chunks_mut(cols).zip(p.chunks(cols)).zip(t.data().chunks(cols)) {
                    let tsum: f64 = tr.iter().sum();
                    for ((d, p), t) in gr.iter_mut().zip(pr).zip(tr) {
                        *d = scale * (p * tsum - t);
                    }
                }
                let gt = ls.iter().map(|l| -scale * l).collect();
                vec![(*logits, gz), (*target, gt)]
            }
            Op::BinaryCrossEntropyWithLogits { logits, target } => {
                let (z, t) = (self.val(*logits), self.val(*target));
                let (rows, _) = z.as_matrix_dims();
                let scale = g[0] / rows as f64;
                let gz = z
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&x, &t)| scale * (sigmoid(x) - t))
                    .collect();
                let gt = z.data().iter().map(|&x| -scale * x).collect();
                vec![(*logits, gz), (*target, gt)]
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let scale = 2.0 * g[0] / av.len().max(1) as f64;
                let ga: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| scale * (x - y))
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::GaussianKl { mean, log_var } => {
                let (m, lv) = (self.val(*mean), self.val(*log_var));
                let (rows, _) = m.as_matrix_dims();
                let scale = g[0] / rows as f64;
                let gm = m.data().iter().map(|mu| scale * mu).collect();
                let glv = lv
                    .data()
                    .iter()
                    .map(|lv| scale * 0.5 * (lv.exp() - 1.0))
                    .collect();
                vec![(*mean, gm), (*log_var, glv)]
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.val(*p).as_matrix_dims().1).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                parts.iter().copied().zip(outs).collect()
            }
            Op::Reshape(a, _) => vec![(*a, g.to_vec())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.val(*a).len()])],
            Op::Mean(a) => {
                let n = self.val(*a).len();
                vec![(*a, vec![g[0] / n.max(1) as f64; n])]
            }
            Op::GaussianSample { mean, log_var, noise } => {
                let (lv, e) = (self.val(*log_var), self.val(*noise));
                let std: Vec<f64> = lv.data().iter().map(|lv| (0.5 * lv).exp()).collect();
                let glv = g
                    .iter()
                    .zip(&std)
                    .zip(e.data())
                    .map(|((g, s), e)| g * 0.5 * s * e)
                    .collect();
                let ge = g.iter().zip(&std).map(|(g, s)| g * s).collect();
                vec![(*mean, g.to_vec()), (*log_var, glv), (*noise, ge)]
            }
        }
    }
}

enum Broadcast {
    Same,
    Row(usize),
    Scalar,
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).unwrap()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
