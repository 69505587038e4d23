#![allow(dead_code)]

use ctrl_cnn::synthetic::{generate, SyntheticConfig, SyntheticTask};
use ctrl_cnn::trainer::TrainData;
use ctrl_cnn::{Model, ModelConfig, Variant};

/// Channel sizes scaled down with the 30+10 embedding.
pub fn desk_model(variant: Variant, vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        vocab_size,
        general_dim: 30,
        domain_dim: 10,
        narrow_filters: 16,
        wide_filters: 16,
        channels: 32,
        bottleneck: 16,
        seed,
        ..Default::default()
    }
}

pub fn task(train: usize, validation: usize, test: usize, noise: f64, seed: u64) -> SyntheticTask {
    generate(&SyntheticConfig {
        train,
        validation,
        test,
        label_noise: noise,
        seed,
        ..Default::default()
    })
}

pub fn build(task: &SyntheticTask, variant: Variant, seed: u64) -> Model {
    Model::with_embedding(&desk_model(variant, task.vocab.len(), seed), task.embedding.clone()).unwrap()
}

pub fn data(task: &SyntheticTask, with_test: bool) -> TrainData {
    TrainData {
        train: task.train.clone(),
        validation: task.validation.clone(),
        test: with_test.then(|| task.test.clone()),
        vocab: task.vocab.clone(),
    }
}
