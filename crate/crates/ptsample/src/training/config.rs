//! Hyperparameters and schedules shared by the training loops.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::geometry::LossConfig;

/// Knobs for one training run. The per-task constructors carry the default
/// learning rate and loss weights for that task; everything else is shared.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Upper bound on the minibatch size; clamped to the training-set size.
    pub batch_size: usize,
    /// Initial learning rate; decays by `lr_decay` every `decay_every`
    /// epochs.
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Sampling-loss shape and its weight in the total objective.
    pub loss: LossConfig,
    pub seed: u64,
    /// Global-norm clip applied to the recurrent parameters each step;
    /// `None` disables clipping (useful for gradient checks).
    pub clip_norm: Option<f64>,
    /// Softens the teacher's distribution in the distilled task loss;
    /// 1.0 uses the teacher's probabilities as-is.
    pub kd_temperature: f64,
    /// Where to write checkpoints at every lr-decay boundary and at the
    /// end; `None` writes nothing.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults for classification: lr 0.01, sampling-loss weight 30.
    pub fn classification() -> Self {
        TrainConfig {
            epochs: 400,
            batch_size: 128,
            lr: 0.01,
            lr_decay: 0.7,
            decay_every: 20,
            loss: LossConfig::classification(),
            seed: 0,
            clip_norm: Some(5.0),
            kd_temperature: 1.0,
            checkpoint_dir: None,
        }
    }

    /// Defaults for reconstruction: lr 0.0005, sampling-loss weight 0.01.
    pub fn reconstruction() -> Self {
        TrainConfig {
            lr: 0.0005,
            loss: LossConfig::reconstruction(),
            ..TrainConfig::classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid_argument("epochs must be positive".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_argument(
                "batch size must be positive".to_string(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid_argument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid_argument(format!(
                "lr decay factor must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.decay_every == 0 {
            return Err(Error::invalid_argument(
                "decay interval must be positive".to_string(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid_argument(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        if !(self.kd_temperature.is_finite() && self.kd_temperature > 0.0) {
            return Err(Error::invalid_argument(format!(
                "distillation temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        self.loss.validate()
    }

    /// The stepped-decay schedule: `lr * lr_decay ^ floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// Validates a set of sample sizes against the cloud size `n`: nonempty,
/// strictly ascending, all positive, largest at most `n`.
pub fn validate_sizes(sizes: &[usize], n: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::invalid_argument(
            "need at least one sample size".to_string(),
        ));
    }
    if sizes[0] == 0 {
        return Err(Error::invalid_argument(
            "sample sizes must be positive".to_string(),
        ));
    }
    if let Some(w) = sizes.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::invalid_argument(format!(
            "sample sizes must be strictly ascending, got {} before {}",
            w[0], w[1]
        )));
    }
    let max = *sizes.last().unwrap();
    if max > n {
        return Err(Error::invalid_argument(format!(
            "largest sample size {max} exceeds cloud size {n}"
        )));
    }
    Ok(())
}
