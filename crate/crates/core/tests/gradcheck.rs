//! Central finite differences (h = 1e-4) against the reverse pass, for every
//! graph operation, on random inputs of magnitude at most 10.

mod common;

use cace_core::autodiff::Tensor;
use common::ops::{self, check, TRIALS};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

macro_rules! gradchecks {
    ($($op:ident),* $(,)?) => {
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(TRIALS))]
            $(
                #[test]
                fn $op(seed in any::<u64>()) {
                    ops::$op(seed).map_err(TestCaseError::fail)?;
                }
            )*
        }
    };
}

gradchecks!(
    matmul,
    add_same_shape,
    add_broadcast_row_and_scalar,
    mul,
    relu,
    sigmoid,
    tanh,
    softmax,
    log_softmax,
    cross_entropy,
    bce_with_logits,
    mse,
    gaussian_kl,
    concat,
    reshape,
    sum_and_mean,
    gaussian_sample
);

/// Whole classifier loss on one bars image, with respect to every weight.
#[test]
fn classifier_loss_on_a_bars_image() {
    use cace_core::data::{generate_bars, BarsConfig};
    use cace_core::models::{Activation, Mlp};

    let mut cfg = BarsConfig::with_bias(0.5, 0.5);
    cfg.n_train = 1;
    cfg.n_test = 1;
    let img = generate_bars(&cfg).unwrap().train.records.remove(0);
    let mlp = Mlp::new("m", vec![img.pixels.len(), 6, 2], Activation::Tanh, false);
    let mut params = cace_core::autodiff::Params::new();
    mlp.init(&mut params, &mut ChaCha8Rng::seed_from_u64(3));
    let mut y = vec![0.0; 2];
    y[img.class_label] = 1.0;
    let mut inputs: Vec<(&str, Tensor)> = vec![
        (
            "x",
            Tensor::new(vec![1, img.pixels.len()], img.pixels.data().to_vec()).unwrap(),
        ),
        ("y", Tensor::new(vec![1, 2], y).unwrap()),
    ];
    let names: Vec<String> = params.keys().cloned().collect();
    for n in &names {
        inputs.push((n.as_str(), params[n].clone()));
    }
    let wrt: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    check(
        0,
        |g| {
            let x = g.input("x");
            let y = g.input("y");
            let logits = mlp.build(g, x);
            g.cross_entropy(logits, y)
        },
        inputs,
        &wrt,
    )
    .unwrap();
}
