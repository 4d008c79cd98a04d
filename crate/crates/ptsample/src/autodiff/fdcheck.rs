//! Central finite-difference verification of tape gradients.
//!
//! The checker runs one analytic backward pass, then re-evaluates the loss
//! with each probed coordinate nudged by +/- step and compares the slope
//! against the recorded gradient. Large tensors can be spot-checked on a
//! seeded coordinate sample to keep runtimes bounded.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdConfig {
    /// Half-width of the central difference.
    pub step: f64,
    /// Cap on probed coordinates per tensor; `None` checks every one.
    pub max_coords_per_tensor: Option<usize>,
    /// Seed for the coordinate subsample when a cap is set.
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// Worst relative disagreement found by a check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares analytic gradients of `loss` against central differences for
/// the named parameters (all trainable parameters when `names` is empty).
///
/// Relative error uses `|a - fd| / max(|a|, |fd|, 1e-2)` so that tiny
/// gradients near zero do not blow up the ratio.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    names: &[String],
    cfg: &FdConfig,
    loss: F,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::invalid_argument(
            "finite-difference check needs a scalar loss".to_string(),
        ));
    }
    tape.backward(out)?;
    let analytic: BTreeMap<String, Vec<f64>> = tape
        .param_grads()
        .map(|(n, g)| (n.to_string(), g.to_vec()))
        .collect();

    let probe: Vec<String> = if names.is_empty() {
        store.trainable_names()
    } else {
        names.to_vec()
    };

    let mut jobs: Vec<(String, usize, f64)> = Vec::new();
    for name in &probe {
        let grad = analytic.get(name).ok_or_else(|| {
            Error::invalid_argument(format!(
                "parameter '{name}' was never bound by the loss closure"
            ))
        })?;
        let numel = grad.len();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(cap) if cap < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fnv1a_str(name));
                let mut picked = rand::seq::index::sample(&mut rng, numel, cap).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        for c in coords {
            jobs.push((name.clone(), c, grad[c]));
        }
    }

    let results: Vec<Result<(f64, String, usize)>> = jobs
        .par_iter()
        .map(|(name, coord, a)| {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = store.snapshot();
                perturbed.get_mut(name)?.data_mut()[*coord] += delta;
                let mut t = Tape::new();
                let v = loss(&mut t, &perturbed)?;
                let val = t.value(v).item();
                if !val.is_finite() {
                    return Err(Error::invalid_state(format!(
                        "loss became non-finite while probing {name}[{coord}]"
                    )));
                }
                Ok(val)
            };
            let plus = eval(cfg.step)?;
            let minus = eval(-cfg.step)?;
            let fd = (plus - minus) / (2.0 * cfg.step);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            Ok((rel, name.clone(), *coord))
        })
        .collect();

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for r in results {
        let (rel, name, coord) = r?;
        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name, coord));
        }
    }
    Ok(report)
}

fn fnv1a_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
