//! Shared fixtures for the inference benchmarks.

use erra::{ErraNet, NetConfig, Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A randomly initialised default network in evaluation mode.
pub fn eval_model(seed: u64) -> ErraNet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ErraNet::init(NetConfig::default(), &mut rng).expect("default config is valid");
    m.set_training(false);
    m
}

pub fn input(height: usize, width: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(Shape::new(1, 3, height, width), 0.0, 1.0, &mut rng)
}
