//! Deterministic fixtures shared by the benchmarks.

use grap::harness::{self, ModelConfig, RunConfig};
use grap::mlp::Activation;
use grap::tasks::{self, TaskSpec};
use grap::{Batch, CompositeModel, Mat, Result, Rng};

/// Loss counts swept by the step benchmarks.
pub const KS: [usize; 4] = [2, 4, 8, 16];

/// Config of the step-cost fixture: a ReLU backbone of three 128-wide
/// layers over `k` mixed pretraining losses.
pub fn step_config(k: usize, batch_size: usize, seed: u64) -> RunConfig {
    RunConfig {
        seed,
        batch_size,
        lr: 0.01,
        model: ModelConfig {
            hidden: vec![128, 128, 128],
            activation: Activation::Relu,
            ..ModelConfig::default()
        },
        task: TaskSpec {
            losses: tasks::mixed_losses(k),
            n_train: batch_size.max(64),
            n_val: 64,
            seed,
            ..TaskSpec::default()
        },
        ..RunConfig::default()
    }
}

/// A freshly initialized model and a fully labeled batch of `batch_size`
/// training rows.
pub fn step_fixture(k: usize, batch_size: usize, seed: u64) -> Result<(CompositeModel, Batch)> {
    let cfg = step_config(k, batch_size, seed);
    let data = tasks::generate(&cfg.task)?;
    let model = harness::build_model(&cfg)?;
    let idx: Vec<usize> = (0..batch_size).collect();
    let mut batch = data.train.select(&idx);
    batch.labeled_mask.iter_mut().for_each(|m| *m = true);
    Ok((model, batch))
}

/// Standard normal `k × n` matrix of per-loss gradients.
pub fn gradient_matrix(k: usize, n: usize, seed: u64) -> Mat {
    let mut rng = Rng::new(seed);
    Mat::random_normal(k, n, 1.0, &mut rng)
}

/// Standard normal vector of length `n`.
pub fn gradient_vector(n: usize, seed: u64) -> Vec<f64> {
    gradient_matrix(1, n, seed).into_vec()
}
