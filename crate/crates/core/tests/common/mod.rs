//! Shared helpers for the integration suites: finite-difference gradient
//! drivers (64-bit mode) and dataset discovery.

// Each test binary uses its own subset of these helpers.
#![allow(dead_code)]

use std::path::PathBuf;

use featherlite_core::layers::{self, Activation, Conv2dParams, DenseParams, Padding};
use featherlite_core::lossmetrics::{softmax_ce_logit_grad, sparse_ce_loss};
use featherlite_core::rng::RngStream;
use featherlite_core::tensor::Tensor;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-6);
    (a - n).abs() / denom
}

pub fn fill_uniform(t: &mut Tensor<f64>, rng: &mut RngStream, lo: f64, hi: f64) {
    for v in t.data_mut() {
        *v = rng.uniform(lo, hi);
    }
}

/// Central finite difference of `f` w.r.t. one coordinate of `t`.
pub fn central_diff(t: &mut Tensor<f64>, i: usize, f: &mut dyn FnMut(&Tensor<f64>) -> f64) -> f64 {
    let orig = t[i];
    t[i] = orig + EPS;
    let plus = f(t);
    t[i] = orig - EPS;
    let minus = f(t);
    t[i] = orig;
    (plus - minus) / (2.0 * EPS)
}

pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Convolution parameter/bias/input gradients against central differences.
pub fn check_conv(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, "gradcheck/conv");
        let h = 4 + (rng.next_u64() % 3) as usize;
        let w = 4 + (rng.next_u64() % 3) as usize;
        let cin = 1 + (rng.next_u64() % 3) as usize;
        let f = 1 + (rng.next_u64() % 3) as usize;
        let k = 2 + (rng.next_u64() % 2) as usize;

        let mut input = Tensor::<f64>::zeros(&[h, w, cin]);
        fill_uniform(&mut input, &mut rng, -1.0, 1.0);
        let mut kernels = Tensor::<f64>::zeros(&[k, k, cin, f]);
        fill_uniform(&mut kernels, &mut rng, -1.0, 1.0);
        let mut bias = Tensor::<f64>::zeros(&[f]);
        fill_uniform(&mut bias, &mut rng, -0.5, 0.5);
        let params = Conv2dParams {
            kernels,
            bias,
            padding: Padding::Valid,
            stride: (1, 1),
            frozen: false,
        };
        let out_shape = layers::conv2d_forward(&input, &params).unwrap().shape().to_vec();
        let mut upstream = Tensor::<f64>::zeros(&out_shape);
        fill_uniform(&mut upstream, &mut rng, -1.0, 1.0);

        let grad = layers::conv2d_backward(&input, &params, &upstream, true).unwrap();

        for i in 0..params.kernels.len() {
            let mut kernels = params.kernels.clone();
            let numeric = central_diff(&mut kernels, i, &mut |kt| {
                let mut q = params.clone();
                q.kernels = kt.clone();
                dot(&layers::conv2d_forward(&input, &q).unwrap(), &upstream)
            });
            assert!(
                rel_err(grad.weights[i], numeric) < TOL,
                "seed {seed} kernel[{i}]: {} vs {numeric}",
                grad.weights[i]
            );
        }
        for i in 0..params.bias.len() {
            let mut bias = params.bias.clone();
            let numeric = central_diff(&mut bias, i, &mut |bt| {
                let mut q = params.clone();
                q.bias = bt.clone();
                dot(&layers::conv2d_forward(&input, &q).unwrap(), &upstream)
            });
            assert!(
                rel_err(grad.bias[i], numeric) < TOL,
                "seed {seed} bias[{i}]: {} vs {numeric}",
                grad.bias[i]
            );
        }
        let gi = grad.input.unwrap();
        let mut probe = input.clone();
        for step in 0..5 {
            let i = ((seed as usize * 31 + step * 97) % probe.len()).min(probe.len() - 1);
            let numeric = central_diff(&mut probe, i, &mut |it| {
                dot(&layers::conv2d_forward(it, &params).unwrap(), &upstream)
            });
            assert!(
                rel_err(gi[i], numeric) < TOL,
                "seed {seed} input[{i}]: {} vs {numeric}",
                gi[i]
            );
        }
    }
}

/// Dense weight/bias/input gradients against central differences.
pub fn check_dense(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, "gradcheck/dense");
        let n_in = 2 + (rng.next_u64() % 8) as usize;
        let n_out = 1 + (rng.next_u64() % 6) as usize;
        let mut input = Tensor::<f64>::zeros(&[n_in]);
        fill_uniform(&mut input, &mut rng, -1.0, 1.0);
        let mut weights = Tensor::<f64>::zeros(&[n_in, n_out]);
        fill_uniform(&mut weights, &mut rng, -1.0, 1.0);
        let mut bias = Tensor::<f64>::zeros(&[n_out]);
        fill_uniform(&mut bias, &mut rng, -0.5, 0.5);
        let params = DenseParams {
            weights,
            bias,
            activation: Activation::Linear,
            frozen: false,
        };
        let mut upstream = Tensor::<f64>::zeros(&[n_out]);
        fill_uniform(&mut upstream, &mut rng, -1.0, 1.0);

        let grad = layers::dense_backward_linear(&input, &params, &upstream, true).unwrap();

        for i in 0..params.weights.len() {
            let mut w = params.weights.clone();
            let numeric = central_diff(&mut w, i, &mut |wt| {
                let mut q = params.clone();
                q.weights = wt.clone();
                dot(&layers::dense_forward_linear(&input, &q).unwrap(), &upstream)
            });
            assert!(rel_err(grad.weights[i], numeric) < TOL, "seed {seed} w[{i}]");
        }
        for i in 0..params.bias.len() {
            let mut b = params.bias.clone();
            let numeric = central_diff(&mut b, i, &mut |bt| {
                let mut q = params.clone();
                q.bias = bt.clone();
                dot(&layers::dense_forward_linear(&input, &q).unwrap(), &upstream)
            });
            assert!(rel_err(grad.bias[i], numeric) < TOL, "seed {seed} b[{i}]");
        }
        let gi = grad.input.unwrap();
        let mut probe = input.clone();
        for i in 0..n_in {
            let numeric = central_diff(&mut probe, i, &mut |it| {
                dot(&layers::dense_forward_linear(it, &params).unwrap(), &upstream)
            });
            assert!(rel_err(gi[i], numeric) < TOL, "seed {seed} x[{i}]");
        }
    }
}

/// ReLU gradient away from the kink (`|x| > 1e-2`).
pub fn check_relu(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, "gradcheck/relu");
        let n = 4 + (rng.next_u64() % 12) as usize;
        let mut x = Tensor::<f64>::zeros(&[n]);
        for v in x.data_mut() {
            let mag = 0.02 + rng.next_f64();
            *v = if rng.next_f64() < 0.5 { -mag } else { mag };
        }
        let mut upstream = Tensor::<f64>::zeros(&[n]);
        fill_uniform(&mut upstream, &mut rng, -1.0, 1.0);

        let post = layers::relu(&x);
        let analytic = layers::relu_backward(&post, &upstream);
        let mut probe = x.clone();
        for i in 0..n {
            let numeric = central_diff(&mut probe, i, &mut |xt| dot(&layers::relu(xt), &upstream));
            assert!(
                rel_err(analytic[i], numeric) < TOL,
                "seed {seed} x[{i}]: {} vs {numeric}",
                analytic[i]
            );
        }
    }
}

/// Softmax Jacobian-vector product against central differences.
pub fn check_softmax(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, "gradcheck/softmax");
        let n = 2 + (rng.next_u64() % 9) as usize;
        let mut x = Tensor::<f64>::zeros(&[n]);
        fill_uniform(&mut x, &mut rng, -3.0, 3.0);
        let mut upstream = Tensor::<f64>::zeros(&[n]);
        fill_uniform(&mut upstream, &mut rng, -1.0, 1.0);

        let post = layers::softmax(&x);
        let analytic = layers::softmax_backward(&post, &upstream);
        let mut probe = x.clone();
        for i in 0..n {
            let numeric =
                central_diff(&mut probe, i, &mut |xt| dot(&layers::softmax(xt), &upstream));
            assert!(
                rel_err(analytic[i], numeric) < TOL,
                "seed {seed} x[{i}]: {} vs {numeric}",
                analytic[i]
            );
        }
    }
}

/// Max-pool argmax routing against central differences. Inputs are spaced so
/// probes cannot flip an argmax.
pub fn check_maxpool(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, "gradcheck/pool");
        let h = 4 + 2 * (rng.next_u64() % 2) as usize;
        let w = 4 + 2 * (rng.next_u64() % 3) as usize;
        let c = 1 + (rng.next_u64() % 2) as usize;
        let n = h * w * c;
        let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.02).collect();
        rng.shuffle(&mut values);
        let mut x = Tensor::<f64>::from_vec(&[h, w, c], values).unwrap();

        let (out, rec) = layers::maxpool2d_forward(&x).unwrap();
        let mut upstream = Tensor::<f64>::zeros(out.shape());
        fill_uniform(&mut upstream, &mut rng, -1.0, 1.0);
        let analytic = layers::maxpool2d_backward(&rec, &upstream).unwrap();

        for step in 0..8 {
            let i = ((seed as usize * 13 + step * 71) % n).min(n - 1);
            let numeric = central_diff(&mut x, i, &mut |xt| {
                let (o, _) = layers::maxpool2d_forward(xt).unwrap();
                dot(&o, &upstream)
            });
            assert!(
                rel_err(analytic[i], numeric) < TOL,
                "seed {seed} x[{i}]: {} vs {numeric}",
                analytic[i]
            );
        }
    }
}

/// Fused softmax + cross-entropy logit gradient against central differences.
pub fn check_softmax_ce(seeds: u64) {
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, "gradcheck/ce");
        let n = 10;
        let mut logits = Tensor::<f64>::zeros(&[n]);
        fill_uniform(&mut logits, &mut rng, -4.0, 4.0);
        let label = (rng.next_f64() * n as f64) as usize;

        let probs = layers::softmax(&logits);
        let analytic = softmax_ce_logit_grad(&probs, label).unwrap();
        let mut probe = logits.clone();
        for i in 0..n {
            let numeric = central_diff(&mut probe, i, &mut |xt| {
                sparse_ce_loss(&layers::softmax(xt), label).unwrap()
            });
            assert!(
                rel_err(analytic[i], numeric) < TOL,
                "seed {seed} logit[{i}]: {} vs {numeric}",
                analytic[i]
            );
        }
    }
}

/// Resolves the dataset directory: `FEATHERLITE_DATA_DIR` or `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("FEATHERLITE_DATA_DIR") {
        return PathBuf::from(dir);
    }
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn require_dataset(name: &str) -> PathBuf {
    let dir = data_dir();
    let marker = dir.join(name);
    assert!(
        marker.exists(),
        "dataset {name} not found under {}; run `featherlite fetch-data {name}` \
         or set FEATHERLITE_DATA_DIR",
        dir.display()
    );
    dir
}
