//! Shared fixtures for the criterion benches.

use rand::Rng;
use twinmae_core::model::{Model, ModelConfig, Sample};
use twinmae_core::probe::synthetic_pairs;
use twinmae_core::seeds;
use twinmae_core::tokenizer::sample_mask;
use twinmae_core::video::SceneSpec;
use twinmae_core::Tensor;

/// Uniform noise in [-1, 1).
pub fn noise(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = seeds::stream(&[seed]);
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// The default model with one prepared training sample.
pub fn model_and_sample(config: &ModelConfig, seed: u64) -> (Model<f32>, Sample<f32>) {
    let model = Model::init(config, seed).expect("valid config");
    let pair = synthetic_pairs(&SceneSpec::default(), 1, 50, seed).expect("pair").remove(0);
    let mut rng = seeds::stream(&[seed, 1]);
    let mask = sample_mask(&model.layout(), config.mask_ratio, &mut rng).expect("mask");
    let sample = Sample::new(&pair, config.patch, mask).expect("sample");
    (model, sample)
}
