//! Downstream task networks: a small point-cloud classifier and a
//! point-cloud autoencoder, plus their losses and the normalized
//! reconstruction error metric.
//!
//! Once trained these networks are frozen; sampler training treats them as
//! a fixed, differentiable black box and checksum tests verify not a byte
//! of them changes.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{init, put_back, take_grad, Mode, ParamStore, Tape, TapeOp, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::diff::chamfer_var;
use crate::geometry::{chamfer, GeneratedCloud, PointCloud};
use crate::pointnet::{init_pointwise_stack, pointwise_stack};

/// Widths of the per-point stem shared by both task networks.
pub const TASK_STEM_WIDTHS: [usize; 3] = [64, 128, 128];
/// Classifier head hidden width.
pub const HEAD_HIDDEN: usize = 64;
/// Decoder hidden width.
pub const DECODER_HIDDEN: usize = 256;
/// Default reconstruction output size.
pub const DEFAULT_N_OUT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    Reconstruction,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Reconstruction => "reconstruction",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "reconstruction" => Ok(TaskKind::Reconstruction),
            other => Err(Error::invalid_argument(format!(
                "unknown task '{other}' (expected classification or reconstruction)"
            ))),
        }
    }
}

/// A task network plus its metadata and frozen flag.
#[derive(Debug, Clone)]
pub struct TaskNetwork {
    pub kind: TaskKind,
    pub params: ParamStore,
    pub num_classes: usize,
    pub n_out: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    kind: String,
    num_classes: usize,
    n_out: usize,
}

impl TaskNetwork {
    /// Fresh classifier: per-point stem, max pool, two-layer dense head.
    pub fn new_classifier(num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid_argument(
                "classifier needs at least 2 classes".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_pointwise_stack(&mut params, "cls", &TASK_STEM_WIDTHS, &mut rng);
        init::insert_linear(&mut params, "cls.head1", 128, HEAD_HIDDEN, &mut rng);
        init::insert_linear(&mut params, "cls.head2", HEAD_HIDDEN, num_classes, &mut rng);
        Ok(TaskNetwork {
            kind: TaskKind::Classification,
            params,
            num_classes,
            n_out: 0,
            frozen: false,
        })
    }

    /// Fresh autoencoder: per-point stem to a 128-wide bottleneck, dense
    /// decoder emitting `n_out` points.
    pub fn new_autoencoder(n_out: usize, seed: u64) -> Result<Self> {
        if n_out == 0 {
            return Err(Error::invalid_argument(
                "autoencoder needs at least one output point".to_string(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_pointwise_stack(&mut params, "enc", &TASK_STEM_WIDTHS, &mut rng);
        init::insert_linear(&mut params, "dec.fc1", 128, DECODER_HIDDEN, &mut rng);
        init::insert_linear(&mut params, "dec.fc2", DECODER_HIDDEN, 3 * n_out, &mut rng);
        Ok(TaskNetwork {
            kind: TaskKind::Reconstruction,
            params,
            num_classes: 0,
            n_out,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Content hash covering every parameter and running statistic.
    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Saves the parameters in the binary checkpoint format plus a JSON
    /// sidecar `<path>.json` describing kind and output sizes.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let meta = TaskMeta {
            kind: self.kind.as_str().to_string(),
            num_classes: self.num_classes,
            n_out: self.n_out,
        };
        let sidecar = sidecar_path(path);
        let text = serde_json::to_string(&meta)
            .map_err(|e| Error::invalid_state(format!("metadata serialization: {e}")))?;
        std::fs::write(&sidecar, text).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        Ok(())
    }

    /// Loads a checkpoint + sidecar pair saved by [`TaskNetwork::save`].
    /// Loaded networks come back frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let params = ParamStore::load(path)?;
        let sidecar = sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        let meta: TaskMeta = serde_json::from_str(&text)
            .map_err(|e| Error::format(0, format!("metadata sidecar: {e}")))?;
        let kind = match meta.kind.as_str() {
            "classification" => TaskKind::Classification,
            "reconstruction" => TaskKind::Reconstruction,
            other => {
                return Err(Error::format(0, format!("unknown task kind '{other}'")));
            }
        };
        Ok(TaskNetwork {
            kind,
            params,
            num_classes: meta.num_classes,
            n_out: meta.n_out,
            frozen: true,
        })
    }

    fn expect_kind(&self, kind: TaskKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid_state(format!(
                "task network is {}, expected {}",
                self.kind.as_str(),
                kind.as_str()
            )));
        }
        Ok(())
    }

    fn guard_mode(&self, mode: Mode) -> Result<()> {
        if self.frozen && mode == Mode::Train {
            return Err(Error::invalid_state(
                "frozen task network cannot run in train mode".to_string(),
            ));
        }
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Classifier forward on a tape: n x 3 cloud node to class logits.
pub fn classify_var(tape: &mut Tape, net: &TaskNetwork, cloud: Var, mode: Mode) -> Result<Var> {
    net.expect_kind(TaskKind::Classification)?;
    net.guard_mode(mode)?;
    let x = pointwise_stack(tape, &net.params, "cls", cloud, &TASK_STEM_WIDTHS, mode)?;
    let pooled = tape.max_pool_rows(x)?;
    let w1 = tape.param(&net.params, "cls.head1.w")?;
    let b1 = tape.param(&net.params, "cls.head1.b")?;
    let hidden = tape.affine_vec(pooled, w1, b1)?;
    let hidden = tape.relu(hidden)?;
    let w2 = tape.param(&net.params, "cls.head2.w")?;
    let b2 = tape.param(&net.params, "cls.head2.b")?;
    tape.affine_vec(hidden, w2, b2)
}

/// Eval-mode logits for a plain cloud.
pub fn classify(p: &PointCloud, net: &TaskNetwork) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let cloud = tape.alloc(p.to_tensor());
    let logits = classify_var(&mut tape, net, cloud, Mode::Eval)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Index of the highest logit (ties: lowest index).
pub fn predict(p: &PointCloud, net: &TaskNetwork) -> Result<usize> {
    let logits = classify(p, net)?;
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Autoencoder forward on a tape: n x 3 cloud node to n_out x 3 output.
pub fn reconstruct_var(tape: &mut Tape, net: &TaskNetwork, cloud: Var, mode: Mode) -> Result<Var> {
    net.expect_kind(TaskKind::Reconstruction)?;
    net.guard_mode(mode)?;
    let x = pointwise_stack(tape, &net.params, "enc", cloud, &TASK_STEM_WIDTHS, mode)?;
    let bottleneck = tape.max_pool_rows(x)?;
    let w1 = tape.param(&net.params, "dec.fc1.w")?;
    let b1 = tape.param(&net.params, "dec.fc1.b")?;
    let hidden = tape.affine_vec(bottleneck, w1, b1)?;
    let hidden = tape.relu(hidden)?;
    let w2 = tape.param(&net.params, "dec.fc2.w")?;
    let b2 = tape.param(&net.params, "dec.fc2.b")?;
    let flat = tape.affine_vec(hidden, w2, b2)?;
    tape.reshape(flat, vec![net.n_out, 3])
}

/// Eval-mode reconstruction of a plain cloud.
pub fn reconstruct(p: &PointCloud, net: &TaskNetwork) -> Result<GeneratedCloud> {
    let mut tape = Tape::new();
    let cloud = tape.alloc(p.to_tensor());
    let out = reconstruct_var(&mut tape, net, cloud, Mode::Eval)?;
    GeneratedCloud::new(tape.value(out).to_points()?, p.len())
}

/// Target of the classification loss.
#[derive(Debug, Clone)]
pub enum CeTarget {
    /// Ground-truth class index.
    Hard(usize),
    /// Full probability distribution (teacher output).
    Soft(Vec<f64>),
}

struct CrossEntropyOp {
    logits: Var,
    out: Var,
    target: Vec<f64>,
    probs: Vec<f64>,
    inv_temp: f64,
}

impl TapeOp for CrossEntropyOp {
    fn backward(&self, _values: &[Tensor], grads: &mut [Vec<f64>]) {
        let gy = take_grad(grads, self.out);
        let g = gy[0] * self.inv_temp;
        let gl = &mut grads[self.logits.0];
        for i in 0..self.target.len() {
            gl[i] += g * (self.probs[i] - self.target[i]);
        }
        put_back(grads, self.out, gy);
    }
}

/// Cross-entropy of `logits` against a hard or soft target, with optional
/// temperature scaling of the logits (used for distillation).
pub fn cross_entropy_logits(
    tape: &mut Tape,
    logits: Var,
    target: &CeTarget,
    temperature: f64,
) -> Result<Var> {
    let z = tape.value(logits);
    let k = match z.shape() {
        [k] => *k,
        other => {
            return Err(Error::invalid_argument(format!(
                "logits must be rank 1, got {other:?}"
            )))
        }
    };
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid_argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let t = match target {
        CeTarget::Hard(idx) => {
            if *idx >= k {
                return Err(Error::invalid_argument(format!(
                    "class index {idx} out of range for {k} classes"
                )));
            }
            let mut t = vec![0.0; k];
            t[*idx] = 1.0;
            t
        }
        CeTarget::Soft(p) => {
            if p.len() != k {
                return Err(Error::invalid_argument(format!(
                    "soft target length {} does not match {k} classes",
                    p.len()
                )));
            }
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid_argument(
                    "soft target must be a probability distribution".to_string(),
                ));
            }
            p.clone()
        }
    };
    let inv_temp = 1.0 / temperature;
    let scaled: Vec<f64> = z.data().iter().map(|v| v * inv_temp).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let probs: Vec<f64> = scaled.iter().map(|v| (v - lse).exp()).collect();
    let loss: f64 = t
        .iter()
        .zip(&scaled)
        .map(|(ti, zi)| -ti * (zi - lse))
        .sum();
    Ok(tape.push(Tensor::scalar(loss), |out| {
        Box::new(CrossEntropyOp {
            logits,
            out,
            target: t,
            probs,
            inv_temp,
        })
    }))
}

/// Reconstruction task loss: symmetric Chamfer distance between the
/// decoder output and the target cloud (P when supervised, T(P) under
/// distillation).
pub fn task_loss_reconstruction(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    chamfer_var(tape, recon, target)
}

/// Normalized reconstruction error: CD(P, T(Q)) / CD(P, T(P)).
pub fn nre(q_points: &[[f64; 3]], p: &PointCloud, net: &TaskNetwork) -> Result<f64> {
    let q_cloud = PointCloud::new(q_points.to_vec())?;
    let tq = reconstruct(&q_cloud, net)?;
    let tp = reconstruct(p, net)?;
    let denom = chamfer(p.points(), &tp.points)?;
    if denom == 0.0 {
        return Err(Error::invalid_state(
            "degenerate autoencoder: zero self-reconstruction error".to_string(),
        ));
    }
    Ok(chamfer(p.points(), &tq.points)? / denom)
}
