//! Shared fixtures for the kernel benchmarks.

use lowrank_core::harness::generate_synthetic;
use lowrank_core::random::{random_matrix, seeded_rng};
use lowrank_core::{Activation, Dataset, LossFamily, Matrix, Network};

/// A seeded `rows × cols` matrix.
pub fn matrix(rows: usize, cols: usize) -> Matrix {
    random_matrix(rows, cols, 7)
}

/// A tanh classifier with the given widths and a matching Gaussian-mixture dataset.
pub fn classifier(sizes: &[usize], samples: usize) -> (Network, Dataset) {
    let dim = sizes[0];
    let classes = *sizes.last().unwrap();
    let data = generate_synthetic(dim, classes, samples, 1.0, 3).unwrap();
    let net = Network::random(
        sizes,
        Activation::Tanh,
        LossFamily::SoftmaxCrossEntropy,
        1.0,
        &mut seeded_rng(5),
    )
    .unwrap();
    (net, data)
}
