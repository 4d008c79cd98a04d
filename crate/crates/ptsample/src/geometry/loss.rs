//! Nearest-neighbor distance losses over plain coordinates.
//!
//! Everything here is squared Euclidean and brute force; clouds at desk
//! scale stay small enough that an index structure would not pay for its
//! complexity. The differentiable twins live in [`super::diff`].

use crate::error::{Error, Result};
use crate::geometry::LossConfig;

pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Index and squared distance of the point in `points` closest to `q`;
/// ties go to the lowest index.
pub fn nearest_neighbor(q: [f64; 3], points: &[[f64; 3]]) -> Result<(usize, f64)> {
    if points.is_empty() {
        return Err(Error::invalid_argument(
            "nearest neighbor of an empty cloud".to_string(),
        ));
    }
    let mut best = (0usize, dist2(q, points[0]));
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = dist2(q, *p);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Mean over `s1` of the squared distance to its nearest neighbor in `s2`.
pub fn avg_nn_loss(s1: &[[f64; 3]], s2: &[[f64; 3]]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::invalid_argument(
            "average nearest-neighbor loss over an empty cloud".to_string(),
        ));
    }
    let mut acc = 0.0;
    for &p in s1 {
        acc += nearest_neighbor(p, s2)?.1;
    }
    Ok(acc / s1.len() as f64)
}

/// Worst-case squared distance from a point of `s1` to its nearest
/// neighbor in `s2`.
pub fn max_nn_loss(s1: &[[f64; 3]], s2: &[[f64; 3]]) -> Result<f64> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::invalid_argument(
            "max nearest-neighbor loss over an empty cloud".to_string(),
        ));
    }
    let mut worst = 0.0f64;
    for &p in s1 {
        let d = nearest_neighbor(p, s2)?.1;
        if d > worst {
            worst = d;
        }
    }
    Ok(worst)
}

/// Symmetric Chamfer distance: avg loss in both directions.
pub fn chamfer(s1: &[[f64; 3]], s2: &[[f64; 3]]) -> Result<f64> {
    Ok(avg_nn_loss(s1, s2)? + avg_nn_loss(s2, s1)?)
}

/// The sampling objective
/// `L_a(Q,P) + beta * L_m(Q,P) + (gamma + delta*|Q|) * L_a(P,Q)`.
///
/// The first two terms pull every generated point onto the original cloud;
/// the third pushes the generated set to cover it.
pub fn sampling_loss(q: &[[f64; 3]], p: &[[f64; 3]], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let coverage_w = cfg.gamma + cfg.delta * q.len() as f64;
    Ok(avg_nn_loss(q, p)? + cfg.beta * max_nn_loss(q, p)? + coverage_w * avg_nn_loss(p, q)?)
}
