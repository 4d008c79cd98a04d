//! Pre-training loop for the task networks (classifier and autoencoder).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{adam_step, AdamState, Mode, StatUpdate, Tape};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::chamfer;
use crate::geometry::diff::chamfer_var;
use crate::geometry::PointCloud;
use crate::tasknet::{
    classify_var, cross_entropy_logits, predict, reconstruct, reconstruct_var, CeTarget,
    TaskKind, TaskNetwork,
};
use crate::training::{Metrics, TrainConfig};

/// Backward results of one cloud, applied to the store in batch order.
pub(crate) struct ItemGrads {
    pub grads: Vec<(String, Vec<f64>)>,
    pub stats: Vec<StatUpdate>,
    pub loss: f64,
}

/// Forward + backward for one cloud. The loss node is scaled by
/// `1 / batch_len` before backward, so accumulated gradients average over
/// the batch; the reported loss value is the unscaled per-item loss.
fn task_item_grads(
    net: &TaskNetwork,
    cloud: &PointCloud,
    label: Option<usize>,
    batch_len: usize,
) -> Result<ItemGrads> {
    let mut tape = Tape::new();
    let points = tape.alloc(cloud.to_tensor());
    let loss = match net.kind {
        TaskKind::Classification => {
            let y = label.ok_or_else(|| {
                Error::invalid_argument("classification training needs labels".to_string())
            })?;
            let logits = classify_var(&mut tape, net, points, Mode::Train)?;
            cross_entropy_logits(&mut tape, logits, &CeTarget::Hard(y), 1.0)?
        }
        TaskKind::Reconstruction => {
            let out = reconstruct_var(&mut tape, net, points, Mode::Train)?;
            chamfer_var(&mut tape, out, points)?
        }
    };
    let value = tape.value(loss).item();
    let scaled = tape.scale(loss, 1.0 / batch_len as f64)?;
    tape.backward(scaled)?;
    Ok(ItemGrads {
        grads: tape
            .param_grads()
            .map(|(n, g)| (n.to_string(), g.to_vec()))
            .collect(),
        stats: tape.take_stat_updates(),
        loss: value,
    })
}

/// Held-out metric: classification accuracy or mean self-reconstruction
/// error, depending on the network kind.
fn task_eval_metric(
    net: &TaskNetwork,
    ds: &Dataset,
    indices: &[usize],
) -> Result<(&'static str, f64)> {
    match net.kind {
        TaskKind::Classification => {
            let correct: usize = indices
                .par_iter()
                .map(|&i| {
                    let it = &ds.items[i];
                    let y = it.label.ok_or_else(|| {
                        Error::invalid_argument(format!("item {i} has no label"))
                    })?;
                    Ok(usize::from(predict(&it.cloud, net)? == y))
                })
                .collect::<Result<Vec<_>>>()?
                .iter()
                .sum();
            Ok(("accuracy", correct as f64 / indices.len() as f64))
        }
        TaskKind::Reconstruction => {
            let total: f64 = indices
                .par_iter()
                .map(|&i| {
                    let p = &ds.items[i].cloud;
                    let out = reconstruct(p, net)?;
                    chamfer(p.points(), &out.points)
                })
                .collect::<Result<Vec<_>>>()?
                .iter()
                .sum();
            Ok(("recon_error", total / indices.len() as f64))
        }
    }
}

/// Trains a fresh task network of the given kind on the dataset's train
/// split with Adam and the stepped lr schedule, evaluating on the val split
/// each epoch. Returns the network frozen, plus the metric log. When a
/// validation split exists, the returned parameters are the best
/// validation snapshot rather than the last epoch's.
///
/// The run is deterministic for a fixed config: shuffling comes from the
/// config seed and per-cloud gradients are reduced in batch order.
pub fn train_task_net(
    ds: &Dataset,
    kind: TaskKind,
    cfg: &TrainConfig,
) -> Result<(TaskNetwork, Metrics)> {
    cfg.validate()?;
    ds.validate()?;
    let train = ds.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid_argument(
            "dataset has no training items".to_string(),
        ));
    }
    let mut net = match kind {
        TaskKind::Classification => {
            if ds.class_names.len() < 2 {
                return Err(Error::invalid_argument(format!(
                    "classification needs at least two named classes, dataset has {}",
                    ds.class_names.len()
                )));
            }
            TaskNetwork::new_classifier(ds.class_names.len(), cfg.seed)?
        }
        TaskKind::Reconstruction => {
            TaskNetwork::new_autoencoder(ds.points_per_cloud(), cfg.seed)?
        }
    };

    let batch = cfg.batch_size.min(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(cfg.lr);
    let mut metrics = Metrics::new();
    let val = ds.split_indices(Split::Val);
    // Snapshot of the best validation-metric parameters seen so far
    // (accuracy prefers high, reconstruction error prefers low); the
    // last epoch is not necessarily the best one.
    let mut best: Option<(f64, crate::autodiff::ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        state.lr = cfg.lr_at(epoch);
        let mut order = train.clone();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let items: Vec<ItemGrads> = chunk
                .par_iter()
                .map(|&i| {
                    let it = &ds.items[i];
                    task_item_grads(&net, &it.cloud, it.label, chunk.len())
                })
                .collect::<Result<_>>()?;
            for item in &items {
                net.params
                    .accumulate_grads(item.grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())))?;
                net.params.apply_stat_updates(&item.stats)?;
            }
            adam_step(&mut net.params, &mut state)?;
            epoch_loss += items.iter().map(|g| g.loss).sum::<f64>();
        }

        metrics.push(epoch, "train", "task_loss", None, epoch_loss / train.len() as f64);
        metrics.push(epoch, "train", "lr", None, state.lr);
        if !val.is_empty() {
            let (name, value) = task_eval_metric(&net, ds, &val)?;
            metrics.push(epoch, "val", name, None, value);
            let improved = match (kind, &best) {
                (_, None) => true,
                (TaskKind::Classification, Some((b, _))) => value > *b,
                (TaskKind::Reconstruction, Some((b, _))) => value < *b,
            };
            if improved {
                best = Some((value, net.params.clone()));
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if (epoch + 1) % cfg.decay_every == 0 {
                net.save(&dir.join(format!("task-epoch{:04}.apsw", epoch + 1)))?;
            }
        }
    }

    // Hand back the best validation snapshot when one exists; with no
    // validation split the final parameters stand.
    if let Some((_, params)) = best {
        net.params = params;
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        net.save(&dir.join("task-final.apsw"))?;
    }
    net.freeze();
    Ok((net, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, ShapeFamily, DEFAULT_FRACTIONS};

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::classification()
        }
    }

    fn two_class_set(per_class: usize, n: usize) -> Dataset {
        generate_synthetic(
            &[ShapeFamily::Sphere, ShapeFamily::Cube],
            per_class,
            n,
            0.02,
            21,
            DEFAULT_FRACTIONS,
        )
        .unwrap()
    }

    #[test]
    fn classifier_loss_strictly_decreases_over_first_epochs() {
        let ds = two_class_set(10, 32);
        // Full-batch steps with a small rate, so the descent is smooth even
        // at this tiny scale.
        let cfg = TrainConfig {
            batch_size: 128,
            lr: 0.0001,
            ..tiny_config(5)
        };
        let (_, metrics) = train_task_net(&ds, TaskKind::Classification, &cfg).unwrap();
        let losses = metrics.series("train", "task_loss", None);
        assert_eq!(losses.len(), 5);
        for w in losses.windows(2) {
            assert!(
                w[1].1 < w[0].1,
                "loss did not decrease: {} -> {}",
                w[0].1,
                w[1].1
            );
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let ds = two_class_set(6, 24);
        let cfg = tiny_config(2);
        let (a, _) = train_task_net(&ds, TaskKind::Classification, &cfg).unwrap();
        let (b, _) = train_task_net(&ds, TaskKind::Classification, &cfg).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(a.checksum(), b.checksum());
        let mut other = cfg.clone();
        other.seed = 4;
        let (c, _) = train_task_net(&ds, TaskKind::Classification, &other).unwrap();
        assert_ne!(a.params.to_bytes(), c.params.to_bytes());
    }

    #[test]
    fn small_classifier_fits_its_training_set() {
        let ds = two_class_set(12, 32);
        let (net, _) =
            train_task_net(&ds, TaskKind::Classification, &tiny_config(30)).unwrap();
        assert!(net.frozen());
        let train = ds.split_indices(Split::Train);
        let (_, acc) = task_eval_metric(&net, &ds, &train).unwrap();
        assert!(acc >= 0.9, "train accuracy {acc}");
    }

    #[test]
    fn autoencoder_loss_decreases_and_is_deterministic() {
        let ds = generate_synthetic(
            &[ShapeFamily::Torus],
            8,
            24,
            0.02,
            5,
            DEFAULT_FRACTIONS,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::reconstruction()
        };
        let (net, metrics) = train_task_net(&ds, TaskKind::Reconstruction, &cfg).unwrap();
        assert_eq!(net.n_out, 24);
        let losses = metrics.series("train", "task_loss", None);
        assert!(losses.last().unwrap().1 < losses[0].1);
        let (again, m2) = train_task_net(&ds, TaskKind::Reconstruction, &cfg).unwrap();
        assert_eq!(net.params.to_bytes(), again.params.to_bytes());
        assert_eq!(metrics, m2);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset {
            items: Vec::new(),
            class_names: vec!["a".to_string(), "b".to_string()],
        };
        assert!(train_task_net(&ds, TaskKind::Classification, &tiny_config(1)).is_err());
    }

    #[test]
    fn checkpoints_land_on_decay_boundaries() {
        let dir = tempfile::tempdir().unwrap();
        let ds = two_class_set(4, 16);
        let cfg = TrainConfig {
            epochs: 3,
            decay_every: 1,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..tiny_config(3)
        };
        train_task_net(&ds, TaskKind::Classification, &cfg).unwrap();
        for name in [
            "task-epoch0001.apsw",
            "task-epoch0002.apsw",
            "task-epoch0003.apsw",
            "task-final.apsw",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let loaded = TaskNetwork::load(&dir.path().join("task-final.apsw")).unwrap();
        assert!(loaded.frozen());
        assert_eq!(loaded.num_classes, 2);
    }
}
