//! Per-point feature extraction: a shared MLP over each point followed by
//! feature-wise max pooling into a single global descriptor.
//!
//! Every layer is linear -> batchnorm -> relu, applied identically to each
//! point, so the per-point feature matrix is permutation-equivariant and
//! the pooled global feature is permutation-invariant by construction.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init, Mode, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Feature width shared by the extractor output and the recurrent state.
pub const FEATURE_DIM: usize = 128;

/// Channel widths of the sampler's extractor stem.
pub const STEM_WIDTHS: [usize; 5] = [64, 64, 64, 128, 128];

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Registers a linear+batchnorm stack under `<prefix>.fc<k>` /
/// `<prefix>.bn<k>` mapping 3-D points through `widths`.
pub fn init_pointwise_stack(
    store: &mut ParamStore,
    prefix: &str,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let mut in_dim = 3;
    for (k, &w) in widths.iter().enumerate() {
        init::insert_linear(store, &format!("{prefix}.fc{}", k + 1), in_dim, w, rng);
        init::insert_batchnorm(store, &format!("{prefix}.bn{}", k + 1), w);
        in_dim = w;
    }
}

/// Runs the shared per-point MLP. `points` must be an n x 3 tensor node;
/// returns the n x widths.last() feature matrix.
pub fn pointwise_stack(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    points: Var,
    widths: &[usize],
    mode: Mode,
) -> Result<Var> {
    let shape = tape.value(points).shape().to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::invalid_argument(format!(
            "point input must be n x 3, got {shape:?}"
        )));
    }
    let mut x = points;
    for k in 1..=widths.len() {
        let w = tape.param(store, &format!("{prefix}.fc{k}.w"))?;
        let b = tape.param(store, &format!("{prefix}.fc{k}.b"))?;
        let gamma = tape.param(store, &format!("{prefix}.bn{k}.gamma"))?;
        let beta = tape.param(store, &format!("{prefix}.bn{k}.beta"))?;
        let rm = store.get(&format!("{prefix}.bn{k}.running_mean"))?.data().to_vec();
        let rv = store.get(&format!("{prefix}.bn{k}.running_var"))?.data().to_vec();
        let lin = tape.linear(x, w, b)?;
        let bn = tape.batchnorm(
            lin,
            gamma,
            beta,
            &rm,
            &rv,
            mode,
            &format!("{prefix}.bn{k}"),
            BN_MOMENTUM,
            BN_EPS,
        )?;
        x = tape.relu(bn)?;
    }
    Ok(x)
}

/// Registers the sampler's extractor parameters under `<prefix>.*`.
pub fn init_feature_params(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
    init_pointwise_stack(store, prefix, &STEM_WIDTHS, rng);
}

/// Extracts per-point features X (n x 128) and the pooled global feature
/// g (128) from an n x 3 cloud node.
pub fn extract_features(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    points: Var,
    mode: Mode,
) -> Result<(Var, Var)> {
    let x = pointwise_stack(tape, store, prefix, points, &STEM_WIDTHS, mode)?;
    let g = tape.max_pool_rows(x)?;
    Ok((x, g))
}
