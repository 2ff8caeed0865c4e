//! Fixtures shared by the benchmarks.

use cnnprune::datasets::{Dataset, Split};
use cnnprune::model::build_model;
use cnnprune::{Architecture, ModelState, Tensor};

/// Reference MNIST model with seeded random weights.
pub fn reference_model() -> ModelState {
    build_model(Architecture::mnist_reference(), 1).expect("reference architecture is valid")
}

/// `n` deterministic pseudo-images in MNIST shape with cycling labels.
pub fn synthetic_mnist(n: usize) -> Dataset {
    let images = Tensor::from_fn(&[n, 1, 28, 28], |i| ((i * 2654435761) % 1000) as f32 / 1000.0);
    Dataset::new(
        images,
        (0..n).map(|i| i % 10).collect(),
        (0..10).map(|d| d.to_string()).collect(),
        Split::Train,
        (0..n).map(|i| format!("train/{i:05}")).collect(),
    )
    .expect("consistent fixture")
}
