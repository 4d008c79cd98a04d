//! Differentiable twins of the distance losses.
//!
//! Each loss is a single tape record that caches its arg-selected
//! nearest-neighbor pairs at forward time; the pullback routes gradients
//! through those pairs only (the usual subgradient choice for min/max,
//! which matches finite differences away from ties).

use crate::autodiff::{put_back, take_grad, Tape, TapeOp, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::loss::dist2;
use crate::geometry::LossConfig;

fn cloud_points(tape: &Tape, v: Var, what: &str) -> Result<Vec<[f64; 3]>> {
    let t = tape.value(v);
    if t.shape().len() != 2 || t.shape()[1] != 3 || t.shape()[0] == 0 {
        return Err(Error::invalid_argument(format!(
            "{what} must be a nonempty n x 3 tensor, got {:?}",
            t.shape()
        )));
    }
    t.to_points()
}

struct NnAvgOp {
    s1: Var,
    s2: Var,
    out: Var,
    /// Index into s2 of each s1 row's nearest neighbor.
    pairs: Vec<usize>,
}

impl TapeOp for NnAvgOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let n1 = self.pairs.len();
        let coef = gy[0] * 2.0 / n1 as f64;
        let s1 = values[self.s1.0].data().to_vec();
        let s2 = values[self.s2.0].data().to_vec();
        for (i, &j) in self.pairs.iter().enumerate() {
            for a in 0..3 {
                let d = coef * (s1[i * 3 + a] - s2[j * 3 + a]);
                grads[self.s1.0][i * 3 + a] += d;
                grads[self.s2.0][j * 3 + a] -= d;
            }
        }
        put_back(grads, self.out, gy);
    }
}

struct NnMaxOp {
    s1: Var,
    s2: Var,
    out: Var,
    arg_i: usize,
    arg_j: usize,
}

impl TapeOp for NnMaxOp {
    fn backward(&self, values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let s1 = values[self.s1.0].data().to_vec();
        let s2 = values[self.s2.0].data().to_vec();
        let (i, j) = (self.arg_i, self.arg_j);
        for a in 0..3 {
            let d = gy[0] * 2.0 * (s1[i * 3 + a] - s2[j * 3 + a]);
            grads[self.s1.0][i * 3 + a] += d;
            grads[self.s2.0][j * 3 + a] -= d;
        }
        put_back(grads, self.out, gy);
    }
}

/// Differentiable mean nearest-neighbor loss; gradients reach both clouds.
pub fn avg_nn_var(tape: &mut Tape, s1: Var, s2: Var) -> Result<Var> {
    let p1 = cloud_points(tape, s1, "first cloud")?;
    let p2 = cloud_points(tape, s2, "second cloud")?;
    let mut pairs = Vec::with_capacity(p1.len());
    let mut acc = 0.0;
    for &q in &p1 {
        let (j, d) = crate::geometry::loss::nearest_neighbor(q, &p2)?;
        pairs.push(j);
        acc += d;
    }
    let loss = acc / p1.len() as f64;
    Ok(tape.push(Tensor::scalar(loss), |out| {
        Box::new(NnAvgOp { s1, s2, out, pairs })
    }))
}

/// Differentiable max nearest-neighbor loss; the gradient touches only the
/// arg-selected pair (ties: lowest s1 index).
pub fn max_nn_var(tape: &mut Tape, s1: Var, s2: Var) -> Result<Var> {
    let p1 = cloud_points(tape, s1, "first cloud")?;
    let p2 = cloud_points(tape, s2, "second cloud")?;
    let mut worst = f64::NEG_INFINITY;
    let mut arg = (0usize, 0usize);
    for (i, &q) in p1.iter().enumerate() {
        let (j, d) = crate::geometry::loss::nearest_neighbor(q, &p2)?;
        if d > worst {
            worst = d;
            arg = (i, j);
        }
    }
    Ok(tape.push(Tensor::scalar(worst), |out| {
        Box::new(NnMaxOp {
            s1,
            s2,
            out,
            arg_i: arg.0,
            arg_j: arg.1,
        })
    }))
}

/// Differentiable symmetric Chamfer distance.
pub fn chamfer_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let ab = avg_nn_var(tape, a, b)?;
    let ba = avg_nn_var(tape, b, a)?;
    tape.affine_scalars(&[(1.0, ab), (1.0, ba)])
}

/// Differentiable sampling objective
/// `L_a(Q,P) + beta * L_m(Q,P) + (gamma + delta*|Q|) * L_a(P,Q)`.
pub fn sampling_loss_var(tape: &mut Tape, q: Var, p: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let m = tape.value(q).rows();
    let qp = avg_nn_var(tape, q, p)?;
    let qp_max = max_nn_var(tape, q, p)?;
    let pq = avg_nn_var(tape, p, q)?;
    let coverage_w = cfg.gamma + cfg.delta * m as f64;
    tape.affine_scalars(&[(1.0, qp), (cfg.beta, qp_max), (coverage_w, pq)])
}

/// Re-exported tie-free distance helper for tests in dependent modules.
pub fn min_separation(points: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.min(dist2(*a, *b));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdConfig, ParamStore};
    use crate::geometry::loss::{avg_nn_loss, max_nn_loss, sampling_loss};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect()
    }

    fn store_with_clouds(seed: u64, n1: usize, n2: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.insert("q", Tensor::from_points(&random_points(&mut rng, n1)));
        s.insert("p", Tensor::from_points(&random_points(&mut rng, n2)));
        s
    }

    #[test]
    fn forward_matches_plain_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..30 {
            let n1 = rng.random_range(1..=12);
            let n2 = rng.random_range(1..=12);
            let q = random_points(&mut rng, n1);
            let p = random_points(&mut rng, n2);
            let mut tape = Tape::new();
            let qv = tape.alloc(Tensor::from_points(&q));
            let pv = tape.alloc(Tensor::from_points(&p));
            let avg = avg_nn_var(&mut tape, qv, pv).unwrap();
            let max = max_nn_var(&mut tape, qv, pv).unwrap();
            let cfg = LossConfig {
                beta: 0.6,
                gamma: 1.4,
                delta: 0.02,
                ..LossConfig::default()
            };
            let sl = sampling_loss_var(&mut tape, qv, pv, &cfg).unwrap();
            assert!(
                (tape.value(avg).item() - avg_nn_loss(&q, &p).unwrap()).abs() < 1e-12
            );
            assert!(
                (tape.value(max).item() - max_nn_loss(&q, &p).unwrap()).abs() < 1e-12
            );
            assert!(
                (tape.value(sl).item() - sampling_loss(&q, &p, &cfg).unwrap()).abs() < 1e-12
            );
        }
    }

    #[test]
    fn avg_gradients_match_finite_differences() {
        let store = store_with_clouds(21, 5, 7);
        let report = finite_diff_check(&store, &[], &FdConfig::default(), |tape, s| {
            let q = tape.param(s, "q")?;
            let p = tape.param(s, "p")?;
            avg_nn_var(tape, q, p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn max_gradients_match_finite_differences() {
        let store = store_with_clouds(22, 6, 4);
        let report = finite_diff_check(&store, &[], &FdConfig::default(), |tape, s| {
            let q = tape.param(s, "q")?;
            let p = tape.param(s, "p")?;
            max_nn_var(tape, q, p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn sampling_and_chamfer_gradients_match_finite_differences() {
        let store = store_with_clouds(23, 4, 16);
        let cfg = LossConfig {
            beta: 1.0,
            gamma: 1.0,
            delta: 0.1,
            ..LossConfig::default()
        };
        let report = finite_diff_check(&store, &[], &FdConfig::default(), |tape, s| {
            let q = tape.param(s, "q")?;
            let p = tape.param(s, "p")?;
            sampling_loss_var(tape, q, p, &cfg)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");

        let report = finite_diff_check(&store, &[], &FdConfig::default(), |tape, s| {
            let q = tape.param(s, "q")?;
            let p = tape.param(s, "p")?;
            chamfer_var(tape, q, p)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn max_gradient_touches_only_argmax_pair() {
        let q = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let p = vec![[0.1, 0.0, 0.0], [4.0, 0.0, 0.0]];
        let mut tape = Tape::new();
        let qv = tape.alloc(Tensor::from_points(&q));
        let pv = tape.alloc(Tensor::from_points(&p));
        let l = max_nn_var(&mut tape, qv, pv).unwrap();
        tape.backward(l).unwrap();
        let gq = tape.grad(qv);
        // q[1] is the farthest-from-p point; q[0]'s rows stay zero.
        assert_eq!(&gq[0..3], &[0.0, 0.0, 0.0]);
        assert!((gq[3] - 2.0 * (5.0 - 4.0)).abs() < 1e-12);
        let gp = tape.grad(pv);
        assert_eq!(&gp[0..3], &[0.0, 0.0, 0.0]);
        assert!((gp[3] + 2.0 * (5.0 - 4.0)).abs() < 1e-12);
    }

    #[test]
    fn self_loss_aliasing_is_safe() {
        // Both arguments are the same node: loss is exactly zero and the
        // pullback must not double-borrow the shared gradient buffer.
        let mut tape = Tape::new();
        let s = tape.alloc(Tensor::from_points(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]));
        let l = avg_nn_var(&mut tape, s, s).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l).unwrap();
        assert!(tape.grad(s).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_malformed_clouds() {
        let mut tape = Tape::new();
        let bad = tape.alloc(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let ok = tape.alloc(Tensor::from_points(&[[0.0; 3]]));
        assert!(avg_nn_var(&mut tape, bad, ok).is_err());
        assert!(max_nn_var(&mut tape, ok, bad).is_err());
    }
}
