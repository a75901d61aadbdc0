//! A micro deep-learning engine for building lightweight CNN classifiers.
//!
//! The engine trains a dual-input-output model on original plus augmented
//! data, fuses the two branches into a single-input model via
//! dense-to-convolution surgery, and fine-tunes the result with progressive
//! unfreezing and k-fold cross-validation. A benchmarking harness measures
//! inference latency, throughput across batch sizes, and model size.
//!
//! Everything runs on the CPU with hand-written forward and backward passes;
//! training state is 32-bit, with 64-bit variants of the layer math available
//! for gradient checking.

pub mod augment;
pub mod benchreport;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod layers;
pub mod lossmetrics;
pub mod netgraph;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
