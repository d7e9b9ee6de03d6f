//! Shared fixtures for unit tests.

use crate::data::{Batch, Domain};
use crate::model::{CirModel, ModelConfig};
use crate::ndmath::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// B=6-friendly toy sizes: E=8, C=4, qk=4.
pub fn toy_config(seed: u64) -> ModelConfig {
    ModelConfig {
        video_dim: 6,
        text_dim: 5,
        hidden_dim: 10,
        embed_dim: 8,
        qk_dim: 4,
        num_classes: 4,
        seed,
        tau_init: 0.07,
    }
}

pub fn toy_model(seed: u64) -> CirModel {
    CirModel::init(&toy_config(seed)).unwrap()
}

/// Random batch with domains drawn from a `scenarios × locations` grid.
pub fn random_batch(rng: &mut impl Rng, cfg: &ModelConfig, b: usize, scenarios: u32, locations: u32) -> Batch {
    let video = normal(rng, b, cfg.video_dim);
    let text = normal(rng, b, cfg.text_dim);
    let labels = (0..b).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let domains = (0..b)
        .map(|_| Domain {
            scenario: rng.random_range(0..scenarios),
            location: rng.random_range(0..locations),
        })
        .collect();
    Batch::from_parts(video, text, labels, Some(domains)).unwrap()
}
