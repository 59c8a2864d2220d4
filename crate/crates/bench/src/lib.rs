//! Seeded inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use propot_core::rng::stream;
use propot_core::{EmbeddingBatch, Modality};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// A `rows × cols` standard-normal f32 matrix drawn from a seeded stream.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, &[rows as u64, cols as u64]);
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(data, (rows, cols), &Device::Cpu).expect("shape matches data")
}

/// Labels cycling over `identities`, so every identity appears when
/// `len >= identities`.
pub fn cycling_labels(len: usize, identities: usize) -> Vec<usize> {
    (0..len).map(|i| i % identities).collect()
}

pub fn batch(rows: usize, dim: usize, identities: usize, modality: Modality, seed: u64) -> EmbeddingBatch {
    EmbeddingBatch { features: gaussian(rows, dim, seed), labels: cycling_labels(rows, identities), modality }
}
