//! Sequential attention sampler.
//!
//! A cloud is encoded once into per-point features X and a global feature
//! g. A 2-layer recurrent core starts from a learned projection of g,
//! consumes a learnable start token, and at every step scores each point
//! by the dot product of its feature row with the top hidden state. The
//! softmax of those scores weights a convex combination of the input
//! points — the generated "soft" point — which feeds the next step.
//! Because the unroll never looks ahead, a longer sample is a bit-exact
//! extension of a shorter one, which is what lets several target sizes
//! share one unroll during training.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{lstm_cell, LstmCellVars, Mode, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{match_cloud, GeneratedCloud, MatchedCloud, PointCloud};
use crate::pointnet::{extract_features, init_feature_params, FEATURE_DIM};

pub const HIDDEN: usize = 128;
pub const NUM_LAYERS: usize = 2;

/// Creates a freshly initialized sampler parameter store: feature
/// extractor, two recurrent layers, per-layer initial-state projections,
/// and the zero start token.
pub fn init_sampler_params(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_feature_params(&mut store, "feat", &mut rng);
    crate::autodiff::init::insert_lstm_cell(&mut store, "lstm.l0", 3, HIDDEN, &mut rng);
    crate::autodiff::init::insert_lstm_cell(&mut store, "lstm.l1", HIDDEN, HIDDEN, &mut rng);
    for layer in 0..NUM_LAYERS {
        crate::autodiff::init::insert_linear(
            &mut store,
            &format!("init.l{layer}.h"),
            FEATURE_DIM,
            HIDDEN,
            &mut rng,
        );
        crate::autodiff::init::insert_linear(
            &mut store,
            &format!("init.l{layer}.c"),
            FEATURE_DIM,
            HIDDEN,
            &mut rng,
        );
    }
    store.insert("start_token", Tensor::vector(vec![0.0; 3]));
    store
}

/// Per-layer recurrent state on a tape.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

/// Per-step attention scores and coefficients, recorded as plain numbers
/// for inspection and CSV export.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub scores: Vec<Vec<f64>>,
    pub coeffs: Vec<Vec<f64>>,
}

impl AttentionTrace {
    /// CSV dump, one row per (step, point): `step,point_index,score,coeff`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,point_index,score,coeff\n");
        for (t, (srow, crow)) in self.scores.iter().zip(&self.coeffs).enumerate() {
            for (i, (s, c)) in srow.iter().zip(crow).enumerate() {
                let _ = writeln!(out, "{t},{i},{s},{c}");
            }
        }
        out
    }
}

/// Learned initial state: per-layer tanh-squashed linear maps of g.
pub fn init_state(tape: &mut Tape, store: &ParamStore, g: Var) -> Result<SamplerState> {
    let mut h = Vec::with_capacity(NUM_LAYERS);
    let mut c = Vec::with_capacity(NUM_LAYERS);
    for layer in 0..NUM_LAYERS {
        for (target, out) in [("h", &mut h), ("c", &mut c)] {
            let w = tape.param(store, &format!("init.l{layer}.{target}.w"))?;
            let b = tape.param(store, &format!("init.l{layer}.{target}.b"))?;
            let pre = tape.affine_vec(g, w, b)?;
            out.push(tape.tanh(pre)?);
        }
    }
    Ok(SamplerState { h, c })
}

/// Scores every point against the current top-layer hidden state and
/// normalizes: scores_i = x_i . h, coeffs = softmax(scores).
pub fn attention_step(tape: &mut Tape, x: Var, h_top: Var) -> Result<(Var, Var)> {
    let cols = tape.value(x).cols();
    if tape.value(h_top).shape() != [cols] {
        return Err(Error::invalid_argument(format!(
            "attention dims disagree: features {:?} vs hidden {:?}",
            tape.value(x).shape(),
            tape.value(h_top).shape()
        )));
    }
    let scores = tape.matvec(x, h_top)?;
    let coeffs = tape.softmax_rows(scores)?;
    Ok((scores, coeffs))
}

/// The generated point: the coefficient-weighted sum of the cloud's points.
pub fn generate_point(tape: &mut Tape, coeffs: Var, points: Var) -> Result<Var> {
    tape.vecmat(coeffs, points)
}

/// A full differentiable unroll on an existing tape.
pub struct Unrolled {
    /// One generated point node per step, in order.
    pub step_points: Vec<Var>,
    /// All steps stacked into an m x 3 node.
    pub generated: Var,
    pub trace: AttentionTrace,
}

/// Runs the sampler for `m` steps over a cloud node (n x 3). `mode`
/// controls the extractor's batch normalization; recorded running-stat
/// updates stay on the tape for the caller to apply.
pub fn unroll(
    tape: &mut Tape,
    store: &ParamStore,
    points: Var,
    m: usize,
    mode: Mode,
) -> Result<Unrolled> {
    if m == 0 {
        return Err(Error::invalid_argument(
            "cannot sample zero points".to_string(),
        ));
    }
    let (x, g) = extract_features(tape, store, "feat", points, mode)?;
    let mut state = init_state(tape, store, g)?;
    let cells: Vec<LstmCellVars> = (0..NUM_LAYERS)
        .map(|layer| -> Result<LstmCellVars> {
            Ok(LstmCellVars {
                w_ih: tape.param(store, &format!("lstm.l{layer}.w_ih"))?,
                w_hh: tape.param(store, &format!("lstm.l{layer}.w_hh"))?,
                b_ih: tape.param(store, &format!("lstm.l{layer}.b_ih"))?,
                b_hh: tape.param(store, &format!("lstm.l{layer}.b_hh"))?,
            })
        })
        .collect::<Result<_>>()?;

    let (lo, hi) = bounding_box(tape.value(points).data());
    let mut input = tape.param(store, "start_token")?;
    let mut step_points = Vec::with_capacity(m);
    let mut trace = AttentionTrace::default();
    for _ in 0..m {
        let mut layer_in = input;
        for layer in 0..NUM_LAYERS {
            let (h1, c1) = lstm_cell(
                tape,
                layer_in,
                state.h[layer],
                state.c[layer],
                &cells[layer],
            )?;
            state.h[layer] = h1;
            state.c[layer] = c1;
            layer_in = h1;
        }
        let (scores, coeffs) = attention_step(tape, x, state.h[NUM_LAYERS - 1])?;
        let q = generate_point(tape, coeffs, points)?;
        debug_assert!(
            inside_box(tape.value(q).data(), &lo, &hi, 1e-9),
            "generated point escaped the input bounding box"
        );
        trace.scores.push(tape.value(scores).data().to_vec());
        trace.coeffs.push(tape.value(coeffs).data().to_vec());
        step_points.push(q);
        input = q;
    }
    let generated = tape.concat_rows(&step_points)?;
    Ok(Unrolled {
        step_points,
        generated,
        trace,
    })
}

fn bounding_box(flat: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in flat.chunks_exact(3) {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

fn inside_box(q: &[f64], lo: &[f64; 3], hi: &[f64; 3], tol: f64) -> bool {
    (0..3).all(|a| q[a] >= lo[a] - tol && q[a] <= hi[a] + tol)
}

/// Convenience inference entry point: samples `m` soft points from `p`.
/// Pure — any batchnorm statistics recorded in train mode are discarded
/// with the internal tape, so training code should use [`unroll`] directly.
pub fn sample(
    p: &PointCloud,
    store: &ParamStore,
    m: usize,
    mode: Mode,
) -> Result<(GeneratedCloud, AttentionTrace)> {
    let mut tape = Tape::new();
    let points = tape.alloc(p.to_tensor());
    let un = unroll(&mut tape, store, points, m, mode)?;
    let pts = tape.value(un.generated).to_points()?;
    Ok((GeneratedCloud::new(pts, p.len())?, un.trace))
}

/// Samples and projects onto the input cloud, yielding `m` distinct
/// indices.
pub fn sample_matched(p: &PointCloud, store: &ParamStore, m: usize) -> Result<MatchedCloud> {
    let (q, _trace) = sample(p, store, m, Mode::Eval)?;
    match_cloud(&q, p)
}
