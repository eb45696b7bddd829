//! Finite-difference verification of every backward rule, including the
//! end-to-end two-block model. The numeric side only evaluates forward
//! closures, so it is independent of the backward implementation.

use std::collections::BTreeMap;

use dermml_core::gradcheck::{max_relative_error, numeric_gradient};
use dermml_core::model::{
    self, forward_features, hair_head, melanoma_head, register_params, ModelConfig,
};
use dermml_core::optim::Params;
use dermml_core::rng;
use dermml_core::tape::{Activation, BnMode, RunningStats, Tape, Var};
use dermml_core::tensor::Tensor;
use rand::Rng;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

/// Fixed projection weights so the scalar loss exercises non-uniform
/// upstream gradients.
fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "gradcheck.projection");
    (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Check one op: `build` maps registered leaf vars to the op output.
fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true).unwrap())
        .collect();
    let out = build(&mut tape, &vars);
    let weights = projection(tape.value(out).len(), 77);
    let loss = tape.weighted_sum(out, &weights).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    // numeric gradients from forward evaluations only
    let weights_for_fd = weights.clone();
    let numeric = numeric_gradient(
        |tensors: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), false).unwrap())
                .collect();
            let out = build(&mut tape, &vars);
            tape.value(out)
                .iter()
                .zip(&weights_for_fd)
                .map(|(a, w)| a * w)
                .sum()
        },
        inputs,
        FD_STEP,
    );

    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = max_relative_error(a, n.data());
        assert!(
            err < TOLERANCE,
            "{name} input {i}: relative error {err:.3e} exceeds {TOLERANCE:.0e}"
        );
    }
}

fn random_tensor(shape: Vec<usize>, scale: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck.tensor");
    Tensor::uniform(shape, scale, &mut r)
}

/// Random tensor with every value at least `margin` away from zero, for
/// kinked activations.
fn random_tensor_off_kink(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut t = random_tensor(shape, 1.0, seed);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
    }
    t
}

#[test]
fn conv2d_gradients() {
    for (seed, stride, pad) in [(1u64, 1usize, 0usize), (2, 1, 1), (3, 2, 1)] {
        let x = random_tensor(vec![2, 3, 6, 6], 1.0, seed);
        let k = random_tensor(vec![4, 3, 3, 3], 0.7, seed + 10);
        check_op(&format!("conv2d s{stride} p{pad}"), &[x, k], |t, v| {
            t.conv2d(v[0], v[1], stride, pad).unwrap()
        });
    }
}

#[test]
fn conv_transpose2d_gradients() {
    for (seed, stride, pad) in [(4u64, 2usize, 1usize), (5, 1, 0), (6, 2, 0)] {
        let x = random_tensor(vec![2, 4, 4, 4], 1.0, seed);
        let k = random_tensor(vec![4, 3, 4, 4], 0.6, seed + 10);
        check_op(&format!("conv_transpose2d s{stride} p{pad}"), &[x, k], |t, v| {
            t.conv_transpose2d(v[0], v[1], stride, pad).unwrap()
        });
    }
}

#[test]
fn dense_gradients() {
    let x = random_tensor(vec![3, 5], 1.0, 7);
    let w = random_tensor(vec![4, 5], 0.8, 8);
    let b = random_tensor(vec![4], 0.5, 9);
    check_op("dense", &[x, w, b], |t, v| t.dense(v[0], v[1], v[2]).unwrap());
}

#[test]
fn activation_gradients() {
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        let x = random_tensor_off_kink(vec![3, 7], 11);
        check_op(name, &[x], |t, v| t.activation(v[0], kind));
    }
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    let x = random_tensor(vec![4, 3, 2, 2], 1.0, 13);
    let gamma = random_tensor_off_kink(vec![3], 14);
    let beta = random_tensor(vec![3], 0.5, 15);
    check_op("batch_norm train", &[x.clone(), gamma.clone(), beta.clone()], |t, v| {
        let mut rs = RunningStats::new(3);
        t.batch_norm(v[0], v[1], v[2], &mut rs, BnMode::Train, 0.1, 1e-5).unwrap()
    });
    check_op("batch_norm eval", &[x, gamma, beta], |t, v| {
        let mut rs = RunningStats {
            mean: vec![0.1, -0.2, 0.05],
            var: vec![0.9, 1.2, 0.6],
        };
        t.batch_norm(v[0], v[1], v[2], &mut rs, BnMode::Eval, 0.1, 1e-5).unwrap()
    });
}

#[test]
fn softmax_gradients() {
    let x = random_tensor(vec![3, 4], 2.0, 17);
    check_op("softmax", &[x], |t, v| t.softmax(v[0]).unwrap());
}

#[test]
fn softmax_cross_entropy_gradients() {
    // checked through the logits so finite differences never violate the
    // row-stochastic contract of cross_entropy
    let logits = random_tensor(vec![4, 3], 2.0, 19);
    let labels = {
        let mut data = vec![0.0; 12];
        for (i, &t) in [0usize, 2, 1, 2].iter().enumerate() {
            data[i * 3 + t] = 1.0;
        }
        Tensor::new(vec![4, 3], data).unwrap()
    };
    let lab = labels.clone();
    check_op("softmax+cross_entropy", &[logits], move |t, v| {
        let probs = t.softmax(v[0]).unwrap();
        let y = t.constant(lab.clone()).unwrap();
        t.cross_entropy(probs, y).unwrap()
    });

    // weighted variant, exercising the synthetic-sample mask
    let logits = random_tensor(vec![4, 3], 2.0, 20);
    let lab = labels.clone();
    check_op("weighted cross_entropy", &[logits], move |t, v| {
        let probs = t.softmax(v[0]).unwrap();
        let y = t.constant(lab.clone()).unwrap();
        t.cross_entropy_weighted(probs, y, &[1.0, 0.0, 1.0, 1.0]).unwrap()
    });
}

#[test]
fn wgan_loss_gradients() {
    let real = random_tensor(vec![5, 1], 1.0, 21);
    let fake = random_tensor(vec![5, 1], 1.0, 22);
    check_op("wgan critic loss", &[real.clone(), fake.clone()], |t, v| {
        t.wgan_losses(v[0], v[1]).unwrap().0
    });
    check_op("wgan generator loss", &[real, fake], |t, v| {
        t.wgan_losses(v[0], v[1]).unwrap().1
    });
}

#[test]
fn grad_reverse_is_minus_lambda_times_finite_difference() {
    // The reversal is invisible to any forward evaluation, so the honest
    // finite-difference statement is: analytic = -lambda * numeric.
    let lambda = 0.7;
    let x = random_tensor(vec![2, 4], 1.0, 23);
    let weights = projection(8, 24);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true).unwrap();
    let r = tape.grad_reverse(xv, lambda).unwrap();
    let a = tape.activation(r, Activation::Tanh);
    let loss = tape.weighted_sum(a, &weights).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(xv).to_vec();

    let weights_fd = weights.clone();
    let numeric = numeric_gradient(
        |ts: &[Tensor]| {
            let mut tape = Tape::new();
            let xv = tape.leaf(ts[0].clone(), false).unwrap();
            let r = tape.grad_reverse(xv, lambda).unwrap();
            let a = tape.activation(r, Activation::Tanh);
            tape.value(a).iter().zip(&weights_fd).map(|(v, w)| v * w).sum()
        },
        &[x],
        FD_STEP,
    );
    let scaled: Vec<f64> = numeric[0].data().iter().map(|g| -lambda * g).collect();
    let err = max_relative_error(&analytic, &scaled);
    assert!(err < TOLERANCE, "grad_reverse: relative error {err:.3e}");
}

fn flatten_params(groups: &[&Params]) -> (Vec<String>, Vec<Tensor>) {
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for params in groups {
        for (n, t) in params.iter() {
            names.push(n.clone());
            tensors.push(t.clone());
        }
    }
    (names, tensors)
}

/// End-to-end check on a two-block desk model: the analytic gradient of
/// `L_m + lambda * L_h` with the reversal removed must match finite
/// differences for every parameter. The analytic side recovers that
/// quantity from the two backward passes the trainer actually runs, using
/// the fact that the reversal node scales the extractor's hair gradient by
/// exactly `-lambda`.
#[test]
fn end_to_end_two_block_model_gradients() {
    let cfg = ModelConfig {
        input_size: 8,
        conv_channels: vec![2, 3],
        feature_dim: 4,
        lambda: 0.5,
        ihd: true,
        epochs: 1,
        batch_size: 3,
        learning_rate: 1e-3,
        seed: 31,
        record_trajectory: false,
    };
    let groups = model::init_params(&cfg).unwrap();
    let mut r = rng::stream(33, "gradcheck.e2e");
    let x = Tensor::uniform(vec![3, 3, 8, 8], 0.5, &mut r);
    let x = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().map(|v| v.abs()).collect(),
    )
    .unwrap();
    let y = [1u8, 0, 1];
    let yh = [0u8, 1, 1];
    let one_hot = |labels: &[u8]| {
        let mut data = vec![0.0; labels.len() * 2];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 2 + usize::from(l == 1)] = 1.0;
        }
        Tensor::new(vec![labels.len(), 2], data).unwrap()
    };

    // analytic: two backward passes as in training
    let mut tape = Tape::new();
    let ext = register_params(&mut tape, &groups.extractor, true).unwrap();
    let mel = register_params(&mut tape, &groups.melanoma, true).unwrap();
    let hair = register_params(&mut tape, &groups.hair, true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let feats = forward_features(&mut tape, xv, &ext, &cfg).unwrap();
    let probs_m = melanoma_head(&mut tape, feats, &mel).unwrap();
    let yv = tape.constant(one_hot(&y)).unwrap();
    let loss_m = tape.cross_entropy(probs_m, yv).unwrap();
    let probs_h = hair_head(&mut tape, feats, &hair, cfg.lambda).unwrap();
    let yhv = tape.constant(one_hot(&yh)).unwrap();
    let loss_h = tape.cross_entropy(probs_h, yhv).unwrap();

    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    tape.backward(loss_m).unwrap();
    for (name, &v) in ext.iter().chain(mel.iter()) {
        analytic.insert(name.clone(), tape.grad(v).to_vec());
    }
    tape.backward(loss_h).unwrap();
    for (name, &v) in ext.iter() {
        // reversal applied -lambda; removing it contributes -1x this value
        let entry = analytic.get_mut(name).unwrap();
        for (a, g) in entry.iter_mut().zip(tape.grad(v)) {
            *a -= g;
        }
    }
    for (name, &v) in hair.iter() {
        let scaled: Vec<f64> = tape.grad(v).iter().map(|g| cfg.lambda * g).collect();
        analytic.insert(name.clone(), scaled);
    }

    // numeric: forward-only evaluation of L_m + lambda * L_h (no reversal)
    let (names, tensors) =
        flatten_params(&[&groups.extractor, &groups.melanoma, &groups.hair]);
    let cfg_fd = cfg.clone();
    let numeric = numeric_gradient(
        |ts: &[Tensor]| {
            let mut params = Params::new();
            for (n, t) in names.iter().zip(ts) {
                params.insert(n.clone(), t.clone());
            }
            let mut tape = Tape::new();
            let vars = register_params(&mut tape, &params, false).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let feats = forward_features(&mut tape, xv, &vars, &cfg_fd).unwrap();
            let probs_m = melanoma_head(&mut tape, feats, &vars).unwrap();
            let yv = tape.constant(one_hot(&y)).unwrap();
            let loss_m = tape.cross_entropy(probs_m, yv).unwrap();
            let logits_h = tape
                .dense(feats, vars["hair.fc.weight"], vars["hair.fc.bias"])
                .unwrap();
            let probs_h = tape.softmax(logits_h).unwrap();
            let yhv = tape.constant(one_hot(&yh)).unwrap();
            let loss_h = tape.cross_entropy(probs_h, yhv).unwrap();
            tape.value(loss_m)[0] + cfg_fd.lambda * tape.value(loss_h)[0]
        },
        &tensors,
        FD_STEP,
    );

    for (i, name) in names.iter().enumerate() {
        let err = max_relative_error(&analytic[name], numeric[i].data());
        assert!(
            err < TOLERANCE,
            "end-to-end parameter {name}: relative error {err:.3e}"
        );
    }
}
