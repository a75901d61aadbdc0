//! Shared fixtures for the criterion benches.

use featherlite_core::netgraph::{build_dual_model, build_final_model, ModelGraph};
use featherlite_core::rng::RngStream;
use featherlite_core::tensor::Tensor;

pub fn random_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RngStream::new(seed, "bench/image");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.next_f64() as f32;
    }
    t
}

pub fn mnist_dual() -> ModelGraph {
    build_dual_model(&[28, 28, 1], 42).expect("dual model")
}

pub fn mnist_final() -> ModelGraph {
    let dual = mnist_dual();
    build_final_model(&dual, &dual, 42).expect("final model")
}
