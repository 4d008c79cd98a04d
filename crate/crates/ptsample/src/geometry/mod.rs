//! Point-cloud types, distance losses, and non-learned samplers.

pub mod diff;
mod loss;
mod sampling;
mod types;

pub use loss::{avg_nn_loss, chamfer, max_nn_loss, nearest_neighbor, sampling_loss};
pub use sampling::{fps, fps_extend, match_cloud, random_sample, voxel_sample};
pub use types::{GeneratedCloud, LossConfig, MatchedCloud, PointCloud};
