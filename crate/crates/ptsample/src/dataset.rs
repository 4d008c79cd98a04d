//! Synthetic point-cloud datasets: parametric surface shapes, labeled
//! train/val/test splits, and a compact binary file format.
//!
//! Clouds are sampled area-uniformly from analytic surfaces, jittered with
//! isotropic Gaussian noise, and normalized so the (analytic) centroid sits
//! at the origin and the farthest point has norm exactly 1. Coordinates are
//! quantized to f32 at generation time so that a dataset written to disk and
//! read back is bit-identical to the one in memory.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Magic bytes at the start of a serialized dataset file.
const DATASET_MAGIC: &[u8; 4] = b"APSB";
/// Current dataset file format version.
const DATASET_VERSION: u16 = 1;

/// Default standard deviation of the surface jitter.
pub const DEFAULT_SIGMA: f64 = 0.02;
/// Default train/val/test fractions.
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.85, 0.05, 0.10);

/// The analytic surface families the generator knows how to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
}

impl ShapeFamily {
    /// All families, in canonical (label) order.
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Cone,
        ShapeFamily::Torus,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeFamily::Sphere),
            "cube" => Ok(ShapeFamily::Cube),
            "cylinder" => Ok(ShapeFamily::Cylinder),
            "cone" => Ok(ShapeFamily::Cone),
            "torus" => Ok(ShapeFamily::Torus),
            other => Err(Error::invalid_argument(format!(
                "unknown shape family {other:?} (expected sphere, cube, cylinder, cone, or torus)"
            ))),
        }
    }
}

/// Everything needed to generate one cloud deterministically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub family: ShapeFamily,
    /// Number of surface samples. At least 8.
    pub n: usize,
    /// Standard deviation of the per-coordinate Gaussian jitter.
    pub sigma: f64,
    /// RNG seed for this particular cloud.
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, n: usize, sigma: f64, seed: u64) -> Result<Self> {
        if n < 8 {
            return Err(Error::invalid_argument(format!(
                "shape needs at least 8 points, got {n}"
            )));
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::invalid_argument(format!(
                "jitter sigma must be finite and non-negative, got {sigma}"
            )));
        }
        Ok(ShapeSpec {
            family,
            n,
            sigma,
            seed,
        })
    }
}

/// One point on the unit sphere, uniform by area.
fn sphere_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// One point on the surface of the cube [-1, 1]^3, uniform by area.
fn cube_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let face: usize = rng.random_range(0..6);
    let u: f64 = rng.random_range(-1.0..=1.0);
    let v: f64 = rng.random_range(-1.0..=1.0);
    let s = if face % 2 == 0 { 1.0 } else { -1.0 };
    match face / 2 {
        0 => [s, u, v],
        1 => [u, s, v],
        _ => [u, v, s],
    }
}

/// Cylinder proportions: radius and half-height of the canonical cylinder.
const CYL_RADIUS: f64 = 0.6;
const CYL_HALF_HEIGHT: f64 = 1.0;

/// One point on a capped cylinder (radius `CYL_RADIUS`, height
/// `2 * CYL_HALF_HEIGHT`, axis z), uniform by area across wall and caps.
fn cylinder_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Wall area 2. pi . r . h vs. cap area 2 . pi . r^2: ratio h : r.
    let wall_weight = 2.0 * CYL_HALF_HEIGHT;
    let cap_weight = CYL_RADIUS;
    let pick: f64 = rng.random_range(0.0..wall_weight + cap_weight);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    if pick < wall_weight {
        let z: f64 = rng.random_range(-CYL_HALF_HEIGHT..=CYL_HALF_HEIGHT);
        [CYL_RADIUS * phi.cos(), CYL_RADIUS * phi.sin(), z]
    } else {
        let rho = CYL_RADIUS * rng.random_range(0.0f64..=1.0).sqrt();
        let z = if rng.random_bool(0.5) {
            CYL_HALF_HEIGHT
        } else {
            -CYL_HALF_HEIGHT
        };
        [rho * phi.cos(), rho * phi.sin(), z]
    }
}

/// Cone proportions: base radius and half-height of the canonical cone.
const CONE_RADIUS: f64 = 0.8;
const CONE_HALF_HEIGHT: f64 = 1.0;

/// z-offset that moves the cone's surface-area centroid to the origin.
///
/// With the apex at z = h and the base disk at z = -h, the lateral surface
/// (area pi.r.l, centroid two thirds of the way down from the apex) and the
/// base disk (area pi.r^2, centroid at -h) average to
/// (l.(h - 2/3 . 2h) + r.(-h)) / (l + r).
fn cone_centroid_z() -> f64 {
    let h = CONE_HALF_HEIGHT;
    let r = CONE_RADIUS;
    let l = ((2.0 * h) * (2.0 * h) + r * r).sqrt();
    (l * (-h / 3.0) + r * (-h)) / (l + r)
}

/// One point on a closed cone (apex up, axis z), uniform by area across the
/// lateral surface and the base disk, shifted so the area centroid is the
/// origin.
fn cone_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = CONE_HALF_HEIGHT;
    let r = CONE_RADIUS;
    let l = ((2.0 * h) * (2.0 * h) + r * r).sqrt();
    // Lateral area pi.r.l vs. base area pi.r^2: ratio l : r.
    let pick: f64 = rng.random_range(0.0..l + r);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let dz = -cone_centroid_z();
    if pick < l {
        // Radius grows linearly from the apex, so area density grows with
        // the distance from it; sqrt of a uniform gives the right profile.
        let f = rng.random_range(0.0f64..=1.0).sqrt();
        [
            f * r * phi.cos(),
            f * r * phi.sin(),
            h - f * 2.0 * h + dz,
        ]
    } else {
        let rho = r * rng.random_range(0.0f64..=1.0).sqrt();
        [rho * phi.cos(), rho * phi.sin(), -h + dz]
    }
}

/// Torus proportions: center-circle radius and tube radius.
const TORUS_MAJOR: f64 = 0.75;
const TORUS_MINOR: f64 = 0.3;

/// One point on a torus (axis z), uniform by area.
///
/// The tube angle is drawn by rejection: surface area per unit angle is
/// proportional to `R + r cos(psi)`, which is largest on the outer equator.
fn torus_point(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let psi = loop {
        let candidate: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let accept: f64 = rng.random_range(0.0..=1.0);
        if accept * (TORUS_MAJOR + TORUS_MINOR)
            <= TORUS_MAJOR + TORUS_MINOR * candidate.cos()
        {
            break candidate;
        }
    };
    let ring = TORUS_MAJOR + TORUS_MINOR * psi.cos();
    [
        ring * theta.cos(),
        ring * theta.sin(),
        TORUS_MINOR * psi.sin(),
    ]
}

/// Generate one cloud from a spec: sample the surface, jitter, normalize to
/// max norm 1, and quantize coordinates to f32 precision.
///
/// Every shape is constructed with its surface-area centroid at the origin,
/// so normalization is a pure rescale and a noiseless sphere keeps all its
/// points at norm 1.
pub fn generate_cloud(spec: &ShapeSpec) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = if spec.sigma > 0.0 {
        Some(Normal::new(0.0, spec.sigma).map_err(|e| {
            Error::invalid_argument(format!("bad jitter sigma {}: {e}", spec.sigma))
        })?)
    } else {
        None
    };

    let mut points = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let mut p = match spec.family {
            ShapeFamily::Sphere => sphere_point(&mut rng),
            ShapeFamily::Cube => cube_point(&mut rng),
            ShapeFamily::Cylinder => cylinder_point(&mut rng),
            ShapeFamily::Cone => cone_point(&mut rng),
            ShapeFamily::Torus => torus_point(&mut rng),
        };
        if let Some(normal) = &jitter {
            for c in &mut p {
                *c += normal.sample(&mut rng);
            }
        }
        points.push(p);
    }

    let max_norm = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm <= 0.0 {
        return Err(Error::invalid_state(
            "degenerate cloud: all points at the origin".to_string(),
        ));
    }
    for p in &mut points {
        for c in p.iter_mut() {
            // Quantize so save/load through the f32 file format is lossless.
            *c = (*c / max_norm) as f32 as f64;
        }
    }
    PointCloud::new(points)
}

/// Which partition of the dataset an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(&self) -> char {
        match self {
            Split::Train => 't',
            Split::Val => 'v',
            Split::Test => 'e',
        }
    }

    fn from_code(c: char) -> Result<Split> {
        match c {
            't' => Ok(Split::Train),
            'v' => Ok(Split::Val),
            'e' => Ok(Split::Test),
            other => Err(Error::invalid_argument(format!(
                "unknown split code {other:?}"
            ))),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid_argument(format!(
                "unknown split '{other}' (expected train, val, or test)"
            ))),
        }
    }
}

/// One cloud plus its (optional) class label and split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub cloud: PointCloud,
    pub label: Option<usize>,
    pub split: Split,
}

/// A collection of same-sized clouds with labels, class names, and a
/// train/val/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
    pub class_names: Vec<String>,
}

/// Sidecar JSON next to the binary file, carrying what the binary format
/// does not: class names and the split assignment (one code per item).
#[derive(Serialize, Deserialize)]
struct DatasetSidecar {
    class_names: Vec<String>,
    splits: String,
}

impl Dataset {
    /// Number of items.
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Points per cloud (uniform across the dataset).
    pub fn points_per_cloud(&self) -> usize {
        self.items.first().map_or(0, |it| it.cloud.len())
    }

    /// Indices of the items in the given split, in dataset order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Validate the invariants the rest of the library relies on: at least
    /// one item, uniform cloud size, and labels within the class table.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .items
            .first()
            .ok_or_else(|| Error::invalid_state("dataset is empty".to_string()))?;
        let n = first.cloud.len();
        for (i, it) in self.items.iter().enumerate() {
            if it.cloud.len() != n {
                return Err(Error::invalid_state(format!(
                    "item {i} has {} points but item 0 has {n}",
                    it.cloud.len()
                )));
            }
            // Labels are only checked against the class table when one is
            // present; a bare binary file carries labels but no names.
            if let (Some(label), false) = (it.label, self.class_names.is_empty()) {
                if label >= self.class_names.len() {
                    return Err(Error::invalid_state(format!(
                        "item {i} has label {label} but only {} classes are named",
                        self.class_names.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Serialize to bytes: magic, version, item count, then for each item
    /// the point count, the label (-1 when absent), and the coordinates as
    /// little-endian f32 triples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.items.len() as u32).to_le_bytes());
        for it in &self.items {
            buf.extend_from_slice(&(it.cloud.len() as u32).to_le_bytes());
            let label: i32 = it.label.map_or(-1, |l| l as i32);
            buf.extend_from_slice(&label.to_le_bytes());
            for p in it.cloud.points() {
                for &c in p {
                    buf.extend_from_slice(&(c as f32).to_le_bytes());
                }
            }
        }
        buf
    }

    /// Inverse of [`Dataset::to_bytes`]. Splits default to `Train` and the
    /// class-name table to empty; the sidecar, when present, fills both in.
    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut cursor = Cursor::new(bytes);
        let magic = cursor.take(4, "magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(cursor.take(2, "version")?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version} (expected {DATASET_VERSION})"),
            ));
        }
        let count = u32::from_le_bytes(cursor.take(4, "item count")?.try_into().unwrap());
        let mut items = Vec::with_capacity(count as usize);
        for i in 0..count {
            let at = cursor.pos as u64;
            let n =
                u32::from_le_bytes(cursor.take(4, "point count")?.try_into().unwrap()) as usize;
            if n == 0 {
                return Err(Error::format(at, format!("item {i} has zero points")));
            }
            let raw_label =
                i32::from_le_bytes(cursor.take(4, "label")?.try_into().unwrap());
            let label = match raw_label {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => {
                    return Err(Error::format(
                        at + 4,
                        format!("item {i} has invalid label {l}"),
                    ))
                }
            };
            let coords = cursor.take(12 * n, "coordinates")?;
            let mut points = Vec::with_capacity(n);
            for chunk in coords.chunks_exact(12) {
                let mut p = [0.0f64; 3];
                for (a, c) in chunk.chunks_exact(4).enumerate() {
                    p[a] = f32::from_le_bytes(c.try_into().unwrap()) as f64;
                }
                points.push(p);
            }
            items.push(DatasetItem {
                cloud: PointCloud::new(points)
                    .map_err(|e| Error::format(at, format!("item {i}: {e}")))?,
                label,
                split: Split::Train,
            });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::format(
                cursor.pos as u64,
                format!("{} trailing bytes after last item", bytes.len() - cursor.pos),
            ));
        }
        let ds = Dataset {
            items,
            class_names: Vec::new(),
        };
        ds.validate()
            .map_err(|e| Error::format(8, e.to_string()))?;
        Ok(ds)
    }

    /// Write the binary file plus a `.json` sidecar with class names and
    /// split codes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut file = fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))?;

        let sidecar = DatasetSidecar {
            class_names: self.class_names.clone(),
            splits: self.items.iter().map(|it| it.split.code()).collect(),
        };
        let sidecar_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        fs::write(&sidecar_path, json)
            .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
        Ok(())
    }

    /// Read a dataset back; the sidecar is optional (all items default to
    /// the train split without one).
    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut ds = Dataset::from_bytes(&bytes)?;

        let sidecar_path = sidecar_path(path);
        if sidecar_path.exists() {
            let json = fs::read_to_string(&sidecar_path)
                .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
            let sidecar: DatasetSidecar = serde_json::from_str(&json).map_err(|e| {
                Error::invalid_argument(format!(
                    "bad dataset sidecar {}: {e}",
                    sidecar_path.display()
                ))
            })?;
            if sidecar.splits.chars().count() != ds.items.len() {
                return Err(Error::invalid_argument(format!(
                    "sidecar has {} split codes for {} items",
                    sidecar.splits.chars().count(),
                    ds.items.len()
                )));
            }
            for (it, code) in ds.items.iter_mut().zip(sidecar.splits.chars()) {
                it.split = Split::from_code(code)?;
            }
            ds.class_names = sidecar.class_names;
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Byte-slice reader that reports the offset of whatever is missing.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated file: needed {len} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// Number of items out of `count` that go to train/val/test under the given
/// fractions. Train and val round to nearest; test takes the remainder.
fn split_counts(count: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (ft, fv, fe) = fractions;
    for f in [ft, fv, fe] {
        if !f.is_finite() || f < 0.0 {
            return Err(Error::invalid_argument(format!(
                "split fractions must be finite and non-negative, got {fractions:?}"
            )));
        }
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::invalid_argument(format!(
            "split fractions must sum to 1, got {fractions:?}"
        )));
    }
    let train = (ft * count as f64).round() as usize;
    let val = (fv * count as f64).round() as usize;
    if train + val > count {
        return Err(Error::invalid_argument(format!(
            "split fractions {fractions:?} oversubscribe {count} items"
        )));
    }
    Ok((train, val, count - train - val))
}

/// Generate a labeled synthetic dataset: `per_class` clouds for each family,
/// each with `n_points` samples and the given jitter, partitioned per class
/// into train/val/test by `fractions`.
///
/// Cloud `i` of the dataset is generated from seed `seed ^ i`, so any one
/// cloud can be regenerated without the others and the whole dataset is a
/// pure function of its arguments.
pub fn generate_synthetic(
    families: &[ShapeFamily],
    per_class: usize,
    n_points: usize,
    sigma: f64,
    seed: u64,
    fractions: (f64, f64, f64),
) -> Result<Dataset> {
    if families.is_empty() {
        return Err(Error::invalid_argument(
            "need at least one shape family".to_string(),
        ));
    }
    if per_class == 0 {
        return Err(Error::invalid_argument(
            "need at least one cloud per class".to_string(),
        ));
    }
    let (train, val, _test) = split_counts(per_class, fractions)?;

    let specs: Vec<(ShapeSpec, usize, Split)> = families
        .iter()
        .enumerate()
        .flat_map(|(label, &family)| {
            (0..per_class).map(move |j| {
                let index = label * per_class + j;
                let split = if j < train {
                    Split::Train
                } else if j < train + val {
                    Split::Val
                } else {
                    Split::Test
                };
                (family, label, index, split)
            })
        })
        .map(|(family, label, index, split)| {
            ShapeSpec::new(family, n_points, sigma, seed ^ index as u64)
                .map(|s| (s, label, split))
        })
        .collect::<Result<_>>()?;

    let items: Vec<DatasetItem> = specs
        .par_iter()
        .map(|(spec, label, split)| {
            generate_cloud(spec).map(|cloud| DatasetItem {
                cloud,
                label: Some(*label),
                split: *split,
            })
        })
        .collect::<Result<_>>()?;

    let ds = Dataset {
        items,
        class_names: families.iter().map(|f| f.name().to_string()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::chamfer;

    #[test]
    fn noiseless_sphere_points_sit_on_the_unit_sphere() {
        let spec = ShapeSpec::new(ShapeFamily::Sphere, 256, 0.0, 7).unwrap();
        let cloud = generate_cloud(&spec).unwrap();
        for p in cloud.points() {
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
    }

    #[test]
    fn every_family_generates_normalized_in_bounds_clouds() {
        for (i, family) in ShapeFamily::ALL.iter().enumerate() {
            let spec = ShapeSpec::new(*family, 128, DEFAULT_SIGMA, 100 + i as u64).unwrap();
            let cloud = generate_cloud(&spec).unwrap();
            assert_eq!(cloud.len(), 128);
            let max_norm = cloud
                .points()
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0f64, f64::max);
            assert!((max_norm - 1.0).abs() < 1e-6, "{family}: max norm {max_norm}");
            let (lo, hi) = cloud.bbox();
            for a in 0..3 {
                assert!(lo[a] >= -1.0 && hi[a] <= 1.0, "{family} out of bounds");
            }
        }
    }

    #[test]
    fn shapes_are_close_to_centered() {
        // The surface-area centroid of every canonical shape is the origin,
        // so the empirical centroid shrinks like 1/sqrt(n).
        for (i, family) in ShapeFamily::ALL.iter().enumerate() {
            let spec = ShapeSpec::new(*family, 20_000, 0.0, 40 + i as u64).unwrap();
            let cloud = generate_cloud(&spec).unwrap();
            let mut centroid = [0.0f64; 3];
            for p in cloud.points() {
                for a in 0..3 {
                    centroid[a] += p[a];
                }
            }
            for c in &mut centroid {
                *c /= cloud.len() as f64;
            }
            let norm =
                (centroid[0] * centroid[0] + centroid[1] * centroid[1] + centroid[2] * centroid[2])
                    .sqrt();
            assert!(norm < 0.02, "{family}: centroid norm {norm}");
        }
    }

    #[test]
    fn same_spec_generates_identical_clouds() {
        let spec = ShapeSpec::new(ShapeFamily::Torus, 64, DEFAULT_SIGMA, 9).unwrap();
        let a = generate_cloud(&spec).unwrap();
        let b = generate_cloud(&spec).unwrap();
        assert_eq!(a, b);
        let other = ShapeSpec::new(ShapeFamily::Torus, 64, DEFAULT_SIGMA, 10).unwrap();
        assert_ne!(generate_cloud(&other).unwrap(), a);
    }

    #[test]
    fn spec_rejects_bad_arguments() {
        assert!(ShapeSpec::new(ShapeFamily::Cube, 7, 0.02, 0).is_err());
        assert!(ShapeSpec::new(ShapeFamily::Cube, 8, -0.1, 0).is_err());
        assert!(ShapeSpec::new(ShapeFamily::Cube, 8, f64::NAN, 0).is_err());
        assert!(ShapeSpec::new(ShapeFamily::Cube, 8, 0.0, 0).is_ok());
    }

    #[test]
    fn family_names_round_trip() {
        for family in ShapeFamily::ALL {
            assert_eq!(family.name().parse::<ShapeFamily>().unwrap(), family);
        }
        assert!("pyramid".parse::<ShapeFamily>().is_err());
    }

    #[test]
    fn splits_are_disjoint_exhaustive_and_sized_by_fraction() {
        let ds = generate_synthetic(&ShapeFamily::ALL, 40, 32, 0.02, 5, DEFAULT_FRACTIONS)
            .unwrap();
        assert_eq!(ds.len(), 200);
        let train = ds.split_indices(Split::Train);
        let val = ds.split_indices(Split::Val);
        let test = ds.split_indices(Split::Test);
        assert_eq!(train.len() + val.len() + test.len(), ds.len());
        // 40 per class at 85/5/10 -> 34/2/4 per class.
        assert_eq!(train.len(), 5 * 34);
        assert_eq!(val.len(), 5 * 2);
        assert_eq!(test.len(), 5 * 4);
        // Every class appears in every split.
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut seen = [false; 5];
            for i in ds.split_indices(split) {
                seen[ds.items[i].label.unwrap()] = true;
            }
            assert!(seen.iter().all(|&s| s), "{split:?} missing a class");
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_synthetic(&ShapeFamily::ALL, 4, 16, 0.02, 11, DEFAULT_FRACTIONS)
            .unwrap();
        let b = generate_synthetic(&ShapeFamily::ALL, 4, 16, 0.02, 11, DEFAULT_FRACTIONS)
            .unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_synthetic(&ShapeFamily::ALL, 4, 16, 0.02, 12, DEFAULT_FRACTIONS)
            .unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.apsb");
        let ds = generate_synthetic(&ShapeFamily::ALL, 6, 24, 0.02, 3, DEFAULT_FRACTIONS)
            .unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
        assert_eq!(ds.to_bytes(), back.to_bytes());
    }

    #[test]
    fn unlabeled_items_round_trip_through_label_minus_one() {
        let spec = ShapeSpec::new(ShapeFamily::Cube, 16, 0.0, 1).unwrap();
        let ds = Dataset {
            items: vec![DatasetItem {
                cloud: generate_cloud(&spec).unwrap(),
                label: None,
                split: Split::Train,
            }],
            class_names: Vec::new(),
        };
        let back = Dataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back.items[0].label, None);
    }

    #[test]
    fn truncated_file_reports_the_failing_offset() {
        let ds = generate_synthetic(&[ShapeFamily::Sphere], 2, 16, 0.0, 0, (1.0, 0.0, 0.0))
            .unwrap();
        let bytes = ds.to_bytes();
        let cut = bytes.len() - 5;
        let err = Dataset::from_bytes(&bytes[..cut]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset <= cut as u64, "offset {offset}"),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes_are_format_errors() {
        let ds = generate_synthetic(&[ShapeFamily::Sphere], 1, 16, 0.0, 0, (1.0, 0.0, 0.0))
            .unwrap();
        let mut bytes = ds.to_bytes();
        bytes.push(0);
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Format { .. })
        ));
        let mut bad = ds.to_bytes();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn mixed_cloud_sizes_are_rejected_on_load() {
        let spec_a = ShapeSpec::new(ShapeFamily::Cube, 16, 0.0, 1).unwrap();
        let spec_b = ShapeSpec::new(ShapeFamily::Cube, 24, 0.0, 2).unwrap();
        let ds = Dataset {
            items: vec![
                DatasetItem {
                    cloud: generate_cloud(&spec_a).unwrap(),
                    label: None,
                    split: Split::Train,
                },
                DatasetItem {
                    cloud: generate_cloud(&spec_b).unwrap(),
                    label: None,
                    split: Split::Train,
                },
            ],
            class_names: Vec::new(),
        };
        assert!(ds.validate().is_err());
        assert!(matches!(
            Dataset::from_bytes(&ds.to_bytes()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn nearest_neighbor_chamfer_separates_the_families() {
        // A label-blind sanity check that the five families are actually
        // distinguishable: classify each test cloud by the label of its
        // chamfer-nearest train cloud.
        let ds = generate_synthetic(&ShapeFamily::ALL, 20, 64, 0.02, 17, DEFAULT_FRACTIONS)
            .unwrap();
        let train = ds.split_indices(Split::Train);
        let test = ds.split_indices(Split::Test);
        assert!(test.len() >= 10);
        let mut correct = 0;
        for &ti in &test {
            let mut best = (f64::INFINITY, 0);
            for &si in &train {
                let d = chamfer(&ds.items[si].cloud.points(), &ds.items[ti].cloud.points())
                    .unwrap();
                if d < best.0 {
                    best = (d, si);
                }
            }
            if ds.items[best.1].label == ds.items[ti].label {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / test.len() as f64;
        assert!(accuracy >= 0.9, "1-NN chamfer accuracy {accuracy}");
    }
}
