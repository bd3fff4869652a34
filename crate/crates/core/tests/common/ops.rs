//! Finite-difference checks for every graph operation.

use cace_core::autodiff::{Bindings, Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;
pub const TRIALS: u32 = 100;

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values at least `gap` away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(gap..10.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn probabilities(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Build `sum(op(inputs) * w)` for a fixed random `w`, then compare the
/// gradient of every name in `wrt` with central differences.
pub fn check(
    seed: u64,
    build: impl Fn(&mut Graph) -> NodeId,
    inputs: Vec<(&str, Tensor)>,
    wrt: &[&str],
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut g = Graph::new();
    let out = build(&mut g);
    let mut bindings: Bindings = inputs
        .into_iter()
        .map(|(k, v)| {
            let grad = wrt.contains(&k);
            (k.to_string(), v.with_requires_grad(grad))
        })
        .collect();
    let shape = g.forward(out, &bindings).unwrap().shape().to_vec();
    let w = g.input("__w");
    let weighted = g.mul(out, w);
    let root = g.sum(weighted);
    bindings.insert("__w".into(), uniform(&mut rng, shape, 1.0));

    g.forward(root, &bindings).unwrap();
    let analytic = g.backward(root).unwrap();
    let eval = |g: &mut Graph, b: &Bindings| g.forward(root, b).unwrap().data()[0];
    for name in wrt {
        let base = bindings[*name].clone();
        let grad = &analytic[*name];
        if grad.shape() != base.shape() {
            return Err(format!(
                "d/d{name}: gradient shape {:?} vs {:?}",
                grad.shape(),
                base.shape()
            ));
        }
        for i in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[i] += H;
            let mut minus = base.data().to_vec();
            minus[i] -= H;
            let mut b = bindings.clone();
            b.insert(
                name.to_string(),
                Tensor::new(base.shape().to_vec(), plus).unwrap(),
            );
            let fp = eval(&mut g, &b);
            b.insert(
                name.to_string(),
                Tensor::new(base.shape().to_vec(), minus).unwrap(),
            );
            let fm = eval(&mut g, &b);
            let numeric = (fp - fm) / (2.0 * H);
            let a = grad.data()[i];
            // Relative error, measured absolutely for gradients below 1e-2.
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            if err.is_nan() || err >= TOL {
                return Err(format!(
                    "d/d{name}[{i}]: analytic {a} vs numeric {numeric} (rel err {err})"
                ));
            }
        }
    }
    Ok(())
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

pub fn matmul(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k) = dims(&mut rng);
    let n = rng.random_range(1..5);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            g.matmul(a, b)
        },
        vec![
            ("a", uniform(&mut rng, vec![m, k], 10.0)),
            ("b", uniform(&mut rng, vec![k, n], 10.0)),
        ],
        &["a", "b"],
    )
}

pub fn add_same_shape(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            g.add(a, b)
        },
        vec![
            ("a", uniform(&mut rng, vec![m, n], 10.0)),
            ("b", uniform(&mut rng, vec![m, n], 10.0)),
        ],
        &["a", "b"],
    )
}

pub fn add_broadcast_row_and_scalar(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            let c = g.input("c");
            let ab = g.add(a, b);
            g.add(ab, c)
        },
        vec![
            ("a", uniform(&mut rng, vec![m, n], 10.0)),
            ("b", uniform(&mut rng, vec![n], 10.0)),
            ("c", uniform(&mut rng, vec![1], 10.0)),
        ],
        &["a", "b", "c"],
    )
}

pub fn mul(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            let s = g.input("s");
            let ab = g.mul(a, b);
            g.mul(ab, s)
        },
        vec![
            ("a", uniform(&mut rng, vec![m, n], 10.0)),
            ("b", uniform(&mut rng, vec![m, n], 10.0)),
            ("s", uniform(&mut rng, vec![1], 10.0)),
        ],
        &["a", "b", "s"],
    )
}

pub fn relu(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            g.relu(a)
        },
        vec![("a", away_from_zero(&mut rng, vec![m, n], 1e-2))],
        &["a"],
    )
}

pub fn sigmoid(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            g.sigmoid(a)
        },
        vec![("a", uniform(&mut rng, vec![m, n], 10.0))],
        &["a"],
    )
}

pub fn tanh(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            g.tanh(a)
        },
        vec![("a", uniform(&mut rng, vec![m, n], 10.0))],
        &["a"],
    )
}

pub fn softmax(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            g.softmax(a)
        },
        vec![("a", uniform(&mut rng, vec![m, n + 1], 10.0))],
        &["a"],
    )
}

pub fn log_softmax(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            g.log_softmax(a)
        },
        vec![("a", uniform(&mut rng, vec![m, n + 1], 10.0))],
        &["a"],
    )
}

pub fn cross_entropy(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let z = g.input("z");
            let t = g.input("t");
            g.cross_entropy(z, t)
        },
        vec![
            ("z", uniform(&mut rng, vec![m, n + 1], 10.0)),
            ("t", probabilities(&mut rng, m, n + 1)),
        ],
        &["z"],
    )
}

pub fn bce_with_logits(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    let t = Tensor::new(
        vec![m, n],
        (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap();
    check(
        seed,
        |g| {
            let z = g.input("z");
            let t = g.input("t");
            g.bce_with_logits(z, t)
        },
        vec![("z", uniform(&mut rng, vec![m, n], 10.0)), ("t", t)],
        &["z"],
    )
}

pub fn mse(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            g.mse(a, b)
        },
        vec![
            ("a", uniform(&mut rng, vec![m, n], 10.0)),
            ("b", uniform(&mut rng, vec![m, n], 10.0)),
        ],
        &["a", "b"],
    )
}

pub fn gaussian_kl(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let mu = g.input("mu");
            let lv = g.input("lv");
            g.gaussian_kl(mu, lv)
        },
        vec![
            ("mu", uniform(&mut rng, vec![m, n], 10.0)),
            ("lv", uniform(&mut rng, vec![m, n], 10.0)),
        ],
        &["mu", "lv"],
    )
}

pub fn concat(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    let k = rng.random_range(1..4);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            g.concat(vec![a, b])
        },
        vec![
            ("a", uniform(&mut rng, vec![m, n], 10.0)),
            ("b", uniform(&mut rng, vec![m, k], 10.0)),
        ],
        &["a", "b"],
    )
}

pub fn reshape(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let r = g.reshape(a, vec![n, m]);
            g.tanh(r)
        },
        vec![("a", uniform(&mut rng, vec![m, n], 10.0))],
        &["a"],
    )
}

pub fn sum_and_mean(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let a = g.input("a");
            let b = g.input("b");
            let s = g.sum(a);
            let sq = g.mul(b, b);
            let mb = g.mean(sq);
            g.add(s, mb)
        },
        vec![
            ("a", uniform(&mut rng, vec![m, n], 10.0)),
            ("b", uniform(&mut rng, vec![m, n], 10.0)),
        ],
        &["a", "b"],
    )
}

pub fn gaussian_sample(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = dims(&mut rng);
    check(
        seed,
        |g| {
            let mu = g.input("mu");
            let lv = g.input("lv");
            let eps = g.input("eps");
            g.gaussian_sample(mu, lv, eps)
        },
        vec![
            ("mu", uniform(&mut rng, vec![m, n], 10.0)),
            ("lv", uniform(&mut rng, vec![m, n], 10.0)),
            ("eps", uniform(&mut rng, vec![m, n], 3.0)),
        ],
        &["mu", "lv", "eps"],
    )
}

/// Every graph operation, by name.
pub type OpCheck = fn(u64) -> Result<(), String>;

pub const OPS: &[(&str, OpCheck)] = &[
    ("matmul", matmul),
    ("add_same_shape", add_same_shape),
    ("add_broadcast_row_and_scalar", add_broadcast_row_and_scalar),
    ("mul", mul),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("softmax", softmax),
    ("log_softmax", log_softmax),
    ("cross_entropy", cross_entropy),
    ("bce_with_logits", bce_with_logits),
    ("mse", mse),
    ("gaussian_kl", gaussian_kl),
    ("concat", concat),
    ("reshape", reshape),
    ("sum_and_mean", sum_and_mean),
    ("gaussian_sample", gaussian_sample),
];
