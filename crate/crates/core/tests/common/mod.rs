#![allow(dead_code)]

use cadaft::autodiff::Tape;
use cadaft::datagen::{generate_numeric, SplitSizes, SyntheticSpec};
use cadaft::nn::{init_mlp_with, Activation, Mlp};
use cadaft::{Benchmark, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random MLP with 1..=3 layers of width 2..=16, its input batch, and
/// one-hot targets.
pub struct GradCase {
    pub net: Mlp<f64>,
    pub x: Tensor<f64>,
    pub target: Tensor<f64>,
}

pub fn grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=16)).collect();
    let act = if rng.random::<bool>() {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let mut net: Mlp<f64> = init_mlp_with(&dims, act, &mut rng).unwrap();
    // Nonzero biases keep pre-activations off the ReLU kink at exactly 0,
    // which zero-initialized biases behind a dead layer would sit on.
    for (i, t) in net.tensors_mut().enumerate() {
        if i % 2 == 1 {
            t.values_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    let rows = rng.random_range(1..=8);
    let x: Vec<f64> = (0..rows * dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
    let k = *dims.last().unwrap();
    let mut t = vec![0.0; rows * k];
    for r in 0..rows {
        t[r * k + rng.random_range(0..k)] = 1.0;
    }
    GradCase {
        net,
        x: Tensor::new(vec![rows, dims[0]], x).unwrap(),
        target: Tensor::new(vec![rows, k], t).unwrap(),
    }
}

/// Mean softmax cross-entropy of `net` on the case, computed on a tape.
pub fn case_loss(net: &Mlp<f64>, case: &GradCase, tape: &mut Tape<f64>) -> cadaft::Var {
    let x = tape.constant(&case.x);
    let out = net.forward(tape, x, Some(0)).unwrap();
    let lp = tape.log_softmax(out).unwrap();
    let t = tape.constant(&case.target);
    let prod = tape.mul(lp, t).unwrap();
    let s = tape.sum(prod).unwrap();
    tape.scale(s, -1.0 / case.x.rows() as f64).unwrap()
}

/// Loss evaluated by plain loops, independent of the tape.
pub fn loop_loss(net: &Mlp<f64>, case: &GradCase) -> f64 {
    let mut total = 0.0;
    for r in 0..case.x.rows() {
        let mut h: Vec<f64> = case.x.row(r).to_vec();
        for layer in net.layers() {
            let (n_in, n_out) = (layer.in_dim(), layer.out_dim());
            let w = layer.weight.values();
            let mut out = layer.bias.values().to_vec();
            for j in 0..n_out {
                for i in 0..n_in {
                    out[j] += h[i] * w[i * n_out + j];
                }
                out[j] = match layer.activation {
                    Activation::Relu => out[j].max(0.0),
                    Activation::Tanh => out[j].tanh(),
                    Activation::Identity => out[j],
                };
            }
            h = out;
        }
        let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (j, v) in h.iter().enumerate() {
            total -= case.target.get(r, j) * (v - lse);
        }
    }
    total / case.x.rows() as f64
}

/// Worst relative error between analytic and central-difference gradients.
///
/// The denominator is floored at 1e-8 only to avoid dividing by zero.
pub fn worst_gradient_error(case: &GradCase, h: f64) -> f64 {
    let mut tape = Tape::new();
    let loss = case_loss(&case.net, case, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut net = case.net.clone();
    let keys = net.tensor_count();
    for key in 0..keys {
        let analytic = grads.param(key).unwrap().to_vec();
        for i in 0..analytic.len() {
            let orig = net.tensors().nth(key).unwrap().values()[i];
            net.tensors_mut().nth(key).unwrap().values_mut()[i] = orig + h;
            let up = loop_loss(&net, case);
            net.tensors_mut().nth(key).unwrap().values_mut()[i] = orig - h;
            let down = loop_loss(&net, case);
            net.tensors_mut().nth(key).unwrap().values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}

pub fn default_benchmark(seed: u64) -> Benchmark {
    generate_numeric(&SyntheticSpec::default(), seed).unwrap()
}

pub fn small_benchmark(seed: u64) -> Benchmark {
    generate_numeric(
        &SyntheticSpec {
            sizes: SplitSizes {
                source_train: 128,
                id_test: 64,
                target_unlabeled: 96,
                target_fewshot: 8,
                ood_test: 64,
            },
            ..SyntheticSpec::default()
        },
        seed,
    )
    .unwrap()
}
