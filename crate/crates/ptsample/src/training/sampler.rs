//! The three sampler training regimes: supervised, teacher-distilled, and
//! joint multi-size. All of them share one engine; a single-size supervised
//! run is literally the joint run with a one-element size set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamState, Mode, ParamStore, Tape, Tensor, Var};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::diff::{chamfer_var, sampling_loss_var};
use crate::geometry::PointCloud;
use crate::sampler::{init_sampler_params, unroll};
use crate::tasknet::{
    classify, classify_var, cross_entropy_logits, reconstruct, reconstruct_var, CeTarget,
    TaskKind, TaskNetwork,
};
use crate::training::config::validate_sizes;
use crate::training::task::ItemGrads;
use crate::training::{Metrics, TrainConfig};

/// Parameter-name prefix of the recurrent cells, the part of the model that
/// gradient clipping protects.
const RECURRENT_PREFIX: &str = "lstm.";

/// What the task loss compares the teacher's output on a sample against.
#[derive(Debug, Clone)]
pub enum TaskTarget {
    /// Ground-truth class index (supervised classification).
    Label(usize),
    /// Teacher probability distribution (distilled classification).
    Soft(Vec<f64>),
    /// Reference cloud for reconstruction: the input cloud itself when
    /// supervised, the teacher's own reconstruction when distilled.
    Cloud(Vec<[f64; 3]>),
}

/// A trained sampler: its parameters plus the training log.
#[derive(Debug, Clone)]
pub struct SamplerRun {
    pub params: ParamStore,
    pub metrics: Metrics,
}

/// Numerically stable softmax of a temperature-scaled logit vector.
fn softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Teacher outputs on the full clouds, computed once up front: class
/// probabilities (softened by the distillation temperature) for a
/// classifier, reconstructions for an autoencoder.
fn teacher_targets(
    teacher: &TaskNetwork,
    clouds: &[&PointCloud],
    temperature: f64,
) -> Result<Vec<TaskTarget>> {
    clouds
        .par_iter()
        .map(|p| match teacher.kind {
            TaskKind::Classification => {
                Ok(TaskTarget::Soft(softmax(&classify(p, teacher)?, temperature)))
            }
            TaskKind::Reconstruction => {
                Ok(TaskTarget::Cloud(reconstruct(p, teacher)?.points))
            }
        })
        .collect()
}

/// Unrolls the sampler once to the largest size and sums, over every
/// requested prefix, the task loss plus `lambda` times the sampling loss.
/// Returns the total-loss node and the per-item (task, sampling) values.
pub fn total_loss_var(
    tape: &mut Tape,
    store: &ParamStore,
    teacher: &TaskNetwork,
    cloud: &PointCloud,
    target: &TaskTarget,
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<(Var, f64, f64)> {
    let points = tape.alloc(cloud.to_tensor());
    let m_max = *sizes.last().unwrap();
    let un = unroll(tape, store, points, m_max, Mode::Train)?;

    let mut weighted = Vec::with_capacity(2 * sizes.len());
    let mut task_value = 0.0;
    let mut samp_value = 0.0;
    for &c in sizes {
        let q = if c == m_max {
            un.generated
        } else {
            tape.concat_rows(&un.step_points[..c])?
        };
        let task = match target {
            TaskTarget::Label(y) => {
                let logits = classify_var(tape, teacher, q, Mode::Eval)?;
                cross_entropy_logits(tape, logits, &CeTarget::Hard(*y), 1.0)?
            }
            TaskTarget::Soft(probs) => {
                let logits = classify_var(tape, teacher, q, Mode::Eval)?;
                cross_entropy_logits(
                    tape,
                    logits,
                    &CeTarget::Soft(probs.clone()),
                    cfg.kd_temperature,
                )?
            }
            TaskTarget::Cloud(reference) => {
                let out = reconstruct_var(tape, teacher, q, Mode::Eval)?;
                let reference = tape.alloc(Tensor::from_points(reference));
                chamfer_var(tape, out, reference)?
            }
        };
        let samp = sampling_loss_var(tape, q, points, &cfg.loss)?;
        task_value += tape.value(task).item();
        samp_value += tape.value(samp).item();
        weighted.push((1.0, task));
        weighted.push((cfg.loss.lambda, samp));
    }
    let total = tape.affine_scalars(&weighted)?;
    Ok((total, task_value, samp_value))
}

/// Forward + backward for one cloud; gradients are pre-scaled by
/// `1 / batch_len`. Gradients that flowed into the (frozen) teacher are
/// dropped here; only sampler parameters come back.
fn sampler_item_grads(
    store: &ParamStore,
    teacher: &TaskNetwork,
    cloud: &PointCloud,
    target: &TaskTarget,
    sizes: &[usize],
    cfg: &TrainConfig,
    batch_len: usize,
) -> Result<(ItemGrads, f64, f64)> {
    let mut tape = Tape::new();
    let (total, task_value, samp_value) =
        total_loss_var(&mut tape, store, teacher, cloud, target, sizes, cfg)?;
    let loss_value = tape.value(total).item();
    let scaled = tape.scale(total, 1.0 / batch_len as f64)?;
    tape.backward(scaled)?;
    let grads = tape
        .param_grads()
        .filter(|(n, _)| store.contains(n))
        .map(|(n, g)| (n.to_string(), g.to_vec()))
        .collect();
    Ok((
        ItemGrads {
            grads,
            stats: tape.take_stat_updates(),
            loss: loss_value,
        },
        task_value,
        samp_value,
    ))
}

/// Scales the gradients of every parameter under `prefix` so their joint
/// norm is at most `max_norm`. Returns the pre-clip norm.
pub(crate) fn clip_global_norm(store: &mut ParamStore, prefix: &str, max_norm: f64) -> f64 {
    let mut squared = 0.0;
    for (name, t) in store.iter_mut() {
        if name.starts_with(prefix) {
            if let Some(g) = &t.grad {
                squared += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let norm = squared.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (name, t) in store.iter_mut() {
            if name.starts_with(prefix) {
                if let Some(g) = &mut t.grad {
                    g.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
    }
    norm
}

/// The shared optimizer loop over (cloud, target) pairs.
fn train_sampler_core(
    clouds: &[&PointCloud],
    targets: &[TaskTarget],
    teacher: &TaskNetwork,
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<SamplerRun> {
    cfg.validate()?;
    if clouds.is_empty() {
        return Err(Error::invalid_argument(
            "sampler training needs at least one cloud".to_string(),
        ));
    }
    debug_assert_eq!(clouds.len(), targets.len());
    let n = clouds[0].len();
    if let Some(bad) = clouds.iter().position(|c| c.len() != n) {
        return Err(Error::invalid_argument(format!(
            "cloud {bad} has {} points but cloud 0 has {n}",
            clouds[bad].len()
        )));
    }
    validate_sizes(sizes, n)?;
    if !teacher.frozen() {
        return Err(Error::invalid_state(
            "teacher network must be frozen before sampler training".to_string(),
        ));
    }
    let teacher_checksum = teacher.checksum();

    let mut store = init_sampler_params(cfg.seed);
    let batch = cfg.batch_size.min(clouds.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(cfg.lr);
    let mut metrics = Metrics::new();

    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..clouds.len()).collect();
        order.shuffle(&mut rng);

        let mut task_sum = 0.0;
        let mut samp_sum = 0.0;
        let mut total_sum = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<(ItemGrads, f64, f64)> = chunk
                .par_iter()
                .map(|&i| {
                    sampler_item_grads(
                        &store,
                        teacher,
                        clouds[i],
                        &targets[i],
                        sizes,
                        cfg,
                        chunk.len(),
                    )
                })
                .collect::<Result<_>>()?;
            for (item, task_value, samp_value) in &items {
                store.accumulate_grads(
                    item.grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())),
                )?;
                store.apply_stat_updates(&item.stats)?;
                task_sum += task_value;
                samp_sum += samp_value;
                total_sum += item.loss;
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut store, RECURRENT_PREFIX, max_norm);
            }
            adam_step(&mut store, &mut state)?;
        }

        let count = clouds.len() as f64;
        metrics.push(epoch, "train", "task_loss", None, task_sum / count);
        metrics.push(epoch, "train", "sampling_loss", None, samp_sum / count);
        metrics.push(epoch, "train", "total_loss", None, total_sum / count);
        metrics.push(epoch, "train", "lr", None, state.lr);
        if let Some(dir) = &cfg.checkpoint_dir {
            if (epoch + 1) % cfg.decay_every == 0 {
                store.save(&dir.join(format!("sampler-epoch{:04}.apsw", epoch + 1)))?;
            }
        }
    }

    if teacher.checksum() != teacher_checksum {
        return Err(Error::invalid_state(
            "teacher network changed during sampler training".to_string(),
        ));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        store.save(&dir.join("sampler-final.apsw"))?;
    }
    Ok(SamplerRun {
        params: store,
        metrics,
    })
}

/// Joint multi-size training on the dataset's train split: one unroll per
/// cloud to the largest size, loss summed over every size's prefix.
pub fn train_sampler_joint(
    ds: &Dataset,
    teacher: &TaskNetwork,
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<SamplerRun> {
    ds.validate()?;
    let train = ds.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid_argument(
            "dataset has no training items".to_string(),
        ));
    }
    let mut clouds = Vec::with_capacity(train.len());
    let mut targets = Vec::with_capacity(train.len());
    for &i in &train {
        let it = &ds.items[i];
        clouds.push(&it.cloud);
        targets.push(match teacher.kind {
            TaskKind::Classification => TaskTarget::Label(it.label.ok_or_else(|| {
                Error::invalid_argument(format!("item {i} has no label"))
            })?),
            TaskKind::Reconstruction => TaskTarget::Cloud(it.cloud.points().to_vec()),
        });
    }
    train_sampler_core(&clouds, &targets, teacher, sizes, cfg)
}

/// Single-size supervised training: the joint engine with one size.
pub fn train_sampler_supervised(
    ds: &Dataset,
    teacher: &TaskNetwork,
    m: usize,
    cfg: &TrainConfig,
) -> Result<SamplerRun> {
    train_sampler_joint(ds, teacher, &[m], cfg)
}

/// Teacher-distilled training: targets come from the frozen teacher's own
/// outputs on the full clouds, computed once before the first epoch. The
/// signature takes bare clouds, so labels cannot reach this path.
pub fn train_sampler_kd(
    clouds: &[PointCloud],
    teacher: &TaskNetwork,
    m: usize,
    cfg: &TrainConfig,
) -> Result<SamplerRun> {
    if !teacher.frozen() {
        return Err(Error::invalid_state(
            "teacher network must be frozen before sampler training".to_string(),
        ));
    }
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let targets = teacher_targets(teacher, &refs, cfg.kd_temperature)?;
    train_sampler_core(&refs, &targets, teacher, &[m], cfg)
}
