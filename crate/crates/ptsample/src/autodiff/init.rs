//! Weight initialization helpers.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tensor};

/// Xavier-uniform matrix: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("xavier shape")
}

/// Uniform +/- 1/sqrt(fan_in) matrix, the conventional LSTM init.
pub fn fan_in_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("fan-in shape")
}

/// Adds a linear layer (`<prefix>.w`, `<prefix>.b`) with Xavier weights and
/// zero bias.
pub fn insert_linear(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert(format!("{prefix}.w"), xavier_matrix(in_dim, out_dim, rng));
    store.insert(format!("{prefix}.b"), Tensor::vector(vec![0.0; out_dim]));
}

/// Adds batch-norm parameters (`gamma`=1, `beta`=0, zero running mean, unit
/// running variance) under `<prefix>.*`.
pub fn insert_batchnorm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::vector(vec![1.0; dim]));
    store.insert(format!("{prefix}.beta"), Tensor::vector(vec![0.0; dim]));
    store.insert(
        format!("{prefix}.running_mean"),
        Tensor::vector(vec![0.0; dim]),
    );
    store.insert(
        format!("{prefix}.running_var"),
        Tensor::vector(vec![1.0; dim]),
    );
}

/// Adds LSTM cell parameters under `<prefix>.*` with +/- 1/sqrt(hidden)
/// weights and zero biases.
pub fn insert_lstm_cell(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert(
        format!("{prefix}.w_ih"),
        fan_in_matrix(in_dim, 4 * hidden, hidden, rng),
    );
    store.insert(
        format!("{prefix}.w_hh"),
        fan_in_matrix(hidden, 4 * hidden, hidden, rng),
    );
    store.insert(format!("{prefix}.b_ih"), Tensor::vector(vec![0.0; 4 * hidden]));
    store.insert(format!("{prefix}.b_hh"), Tensor::vector(vec![0.0; 4 * hidden]));
}
