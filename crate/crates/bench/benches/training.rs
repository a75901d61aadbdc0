use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use featherlite_bench::{mnist_dual, random_image};
use featherlite_core::lossmetrics::softmax_ce_logit_grad;
use featherlite_core::netgraph::{ExecMode, OutputSeed};

fn dual_forward_backward(c: &mut Criterion) {
    let dual = mnist_dual();
    let plan = dual.grad_plan();
    let x = black_box(random_image(&[28, 28, 1], 7));
    let aug = black_box(random_image(&[28, 28, 1], 8));
    c.bench_function("dual model forward+backward, one sample", |b| {
        b.iter(|| {
            let mode = ExecMode::Train {
                dropout_seed: 1,
                dropout_scope: "bench".into(),
            };
            let trace = dual
                .forward_traced(&[x.clone(), aug.clone()], &mode, Some(&plan))
                .unwrap();
            let seeds = (0..2)
                .map(|o| {
                    OutputSeed::WrtLogits(
                        softmax_ce_logit_grad(trace.output(&dual, o), 3).unwrap(),
                    )
                })
                .collect();
            dual.backward(&trace, seeds, &plan).unwrap()
        })
    });
}

fn augmentation(c: &mut Criterion) {
    let cfg = featherlite_core::augment::AugmentConfig::default();
    let x = black_box(random_image(&[28, 28, 1], 9));
    c.bench_function("augment one 28x28 image", |b| {
        let mut i = 0u64;
        b.iter(|| {
            i += 1;
            let mut rng = featherlite_core::rng::RngStream::new(i, "bench/augment");
            featherlite_core::augment::augment(&x, &cfg, &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, dual_forward_backward, augmentation);
criterion_main!(benches);
