//! Point-cloud value types shared across the crate.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// An immutable cloud of at least one finite 3-D point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid_argument(
                "point cloud needs at least one point".to_string(),
            ));
        }
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::invalid_argument(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty clouds
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// Axis-aligned bounding box as (min corner, max corner).
    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// The sub-cloud at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let mut pts = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self.points.get(i).ok_or_else(|| {
                Error::invalid_argument(format!(
                    "index {i} out of bounds for cloud of {}",
                    self.len()
                ))
            })?;
            pts.push(*p);
        }
        PointCloud::new(pts)
    }

    /// Row-major n x 3 tensor of coordinates.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        PointCloud::new(t.to_points()?)
    }
}

/// Output of the differentiable sampler: free points that are convex
/// combinations of a parent cloud's points (and therefore lie inside its
/// bounding box).
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCloud {
    pub points: Vec<[f64; 3]>,
    pub parent_n: usize,
}

impl GeneratedCloud {
    pub fn new(points: Vec<[f64; 3]>, parent_n: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid_argument(
                "generated cloud needs at least one point".to_string(),
            ));
        }
        Ok(GeneratedCloud { points, parent_n })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A subset of a parent cloud, stored as distinct indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedCloud {
    indices: Vec<usize>,
}

impl MatchedCloud {
    pub fn new(indices: Vec<usize>, parent_n: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid_argument(
                "matched cloud needs at least one index".to_string(),
            ));
        }
        let mut seen = vec![false; parent_n];
        for &i in &indices {
            if i >= parent_n {
                return Err(Error::invalid_argument(format!(
                    "index {i} out of bounds for parent of {parent_n}"
                )));
            }
            if seen[i] {
                return Err(Error::invalid_argument(format!("duplicate index {i}")));
            }
            seen[i] = true;
        }
        Ok(MatchedCloud { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Hyperparameters of the sampling loss and its weight in the total
/// training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the max nearest-neighbor term.
    pub beta: f64,
    /// Constant part of the coverage-term weight.
    pub gamma: f64,
    /// Per-sample-count part of the coverage-term weight.
    pub delta: f64,
    /// Weight of the sampling loss inside the total task objective.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            gamma: 1.0,
            delta: 0.0,
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn classification() -> Self {
        LossConfig {
            lambda: 30.0,
            ..LossConfig::default()
        }
    }

    pub fn reconstruction() -> Self {
        LossConfig {
            lambda: 0.01,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid_argument(format!(
                    "loss hyperparameter {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}
