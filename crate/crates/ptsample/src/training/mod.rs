//! Training loops for the task networks and the sampler, shared schedules
//! and metric plumbing, and the evaluation/timing protocol.

mod config;
mod eval;
mod metrics;
mod sampler;
mod task;

pub use config::{validate_sizes, TrainConfig};
pub(crate) use eval::sample_once;
pub use eval::{evaluate, EvalOptions, Method, Variant, DEFAULT_VOXEL_CELL};
pub use metrics::{MetricRow, Metrics};
pub use sampler::{total_loss_var, TaskTarget};
pub use sampler::{
    train_sampler_joint, train_sampler_kd, train_sampler_supervised, SamplerRun,
};
pub use task::train_task_net;
