//! Evaluation of trained samplers and classical baselines against a frozen
//! task network: per-size accuracy or reconstruction error, plus optional
//! wall-clock sampling time.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::autodiff::{Mode, ParamStore};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::geometry::{fps, random_sample, voxel_sample, PointCloud};
use crate::sampler::{sample, sample_matched};
use crate::tasknet::{nre, predict, TaskKind, TaskNetwork};
use crate::training::Metrics;

/// Default voxel edge length for the voxel-grid baseline, in units of the
/// normalized cloud extent.
pub const DEFAULT_VOXEL_CELL: f64 = 0.5;

/// How a learned sampler's output is turned into the evaluated cloud:
/// generated points as-is, or matched back to input points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Generate,
    Match,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g" | "generate" => Ok(Variant::Generate),
            "m" | "match" => Ok(Variant::Match),
            other => Err(Error::invalid_argument(format!(
                "unknown variant {other:?} (expected g or m)"
            ))),
        }
    }
}

/// A sampling method under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Learned {
        store: &'a ParamStore,
        variant: Variant,
    },
    Fps {
        start: usize,
    },
    Random {
        seed: u64,
    },
    Voxel {
        initial_cell: f64,
    },
}

impl Method<'_> {
    /// Whether the method selects a subset of the input (and therefore
    /// cannot produce more points than the cloud has).
    fn selects_subset(&self) -> bool {
        !matches!(
            self,
            Method::Learned {
                variant: Variant::Generate,
                ..
            }
        )
    }
}

/// Timing knobs: `timing_runs == 0` skips timing entirely.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub timing_runs: usize,
    pub warmups: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            timing_runs: 0,
            warmups: 3,
        }
    }
}

impl EvalOptions {
    /// The timing protocol: median of 20 runs after 3 warmups.
    pub fn timed() -> Self {
        EvalOptions {
            timing_runs: 20,
            warmups: 3,
        }
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Runs one method on one cloud. `index` seeds the random baseline per
/// cloud so the whole evaluation is deterministic.
pub(crate) fn sample_once(
    method: &Method,
    p: &PointCloud,
    m: usize,
    index: u64,
) -> Result<Vec<[f64; 3]>> {
    Ok(match method {
        Method::Learned {
            store,
            variant: Variant::Generate,
        } => sample(p, store, m, Mode::Eval)?.0.points,
        Method::Learned {
            store,
            variant: Variant::Match,
        } => {
            let matched = sample_matched(p, store, m)?;
            p.select(matched.indices())?.points().to_vec()
        }
        Method::Fps { start } => p.select(fps(p, m, *start)?.indices())?.points().to_vec(),
        Method::Random { seed } => p
            .select(random_sample(p, m, seed ^ index)?.indices())?
            .points()
            .to_vec(),
        Method::Voxel { initial_cell } => p
            .select(voxel_sample(p, m, *initial_cell)?.indices())?
            .points()
            .to_vec(),
    })
}

/// Median of a slice (average of the two middles for even lengths).
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Evaluates a method at every size on one dataset split: classification
/// accuracy or mean relative reconstruction error, depending on the task
/// network, plus median per-cloud sampling time in milliseconds when
/// requested.
pub fn evaluate(
    method: &Method,
    teacher: &TaskNetwork,
    ds: &Dataset,
    split: Split,
    sizes: &[usize],
    opts: &EvalOptions,
) -> Result<Metrics> {
    ds.validate()?;
    let indices = ds.split_indices(split);
    if indices.is_empty() {
        return Err(Error::invalid_argument(format!(
            "dataset has no items in the {} split",
            split_name(split)
        )));
    }
    if sizes.is_empty() {
        return Err(Error::invalid_argument(
            "need at least one sample size".to_string(),
        ));
    }
    let n = ds.points_per_cloud();
    for &m in sizes {
        if m == 0 {
            return Err(Error::invalid_argument(
                "sample sizes must be positive".to_string(),
            ));
        }
        if method.selects_subset() && m > n {
            return Err(Error::invalid_argument(format!(
                "cannot select {m} points from clouds of {n}"
            )));
        }
    }

    let mut metrics = Metrics::new();
    for &m in sizes {
        let sampled: Vec<Vec<[f64; 3]>> = indices
            .par_iter()
            .map(|&i| sample_once(method, &ds.items[i].cloud, m, i as u64))
            .collect::<Result<_>>()?;

        match teacher.kind {
            TaskKind::Classification => {
                let correct: usize = indices
                    .par_iter()
                    .zip(&sampled)
                    .map(|(&i, q)| {
                        let y = ds.items[i].label.ok_or_else(|| {
                            Error::invalid_argument(format!("item {i} has no label"))
                        })?;
                        let q = PointCloud::new(q.clone())?;
                        Ok(usize::from(predict(&q, teacher)? == y))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .iter()
                    .sum();
                metrics.push(
                    0,
                    split_name(split),
                    "accuracy",
                    Some(m),
                    correct as f64 / indices.len() as f64,
                );
            }
            TaskKind::Reconstruction => {
                let total: f64 = indices
                    .par_iter()
                    .zip(&sampled)
                    .map(|(&i, q)| nre(q, &ds.items[i].cloud, teacher))
                    .collect::<Result<Vec<_>>>()?
                    .iter()
                    .sum();
                metrics.push(
                    0,
                    split_name(split),
                    "nre",
                    Some(m),
                    total / indices.len() as f64,
                );
            }
        }

        if opts.timing_runs > 0 {
            let mut per_run_ms = Vec::with_capacity(opts.timing_runs);
            for run in 0..opts.warmups + opts.timing_runs {
                let start = Instant::now();
                for &i in &indices {
                    sample_once(method, &ds.items[i].cloud, m, i as u64)?;
                }
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                if run >= opts.warmups {
                    per_run_ms.push(elapsed / indices.len() as f64);
                }
            }
            metrics.push(
                0,
                split_name(split),
                "time_ms",
                Some(m),
                median(&mut per_run_ms),
            );
        }
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, ShapeFamily};
    use crate::sampler::init_sampler_params;

    fn tiny_dataset(n: usize) -> Dataset {
        generate_synthetic(
            &[ShapeFamily::Sphere, ShapeFamily::Cube],
            6,
            n,
            0.02,
            31,
            (0.5, 0.0, 0.5),
        )
        .unwrap()
    }

    fn frozen_classifier() -> TaskNetwork {
        let mut t = TaskNetwork::new_classifier(2, 55).unwrap();
        t.freeze();
        t
    }

    #[test]
    fn full_size_fps_equals_full_cloud_accuracy() {
        let ds = tiny_dataset(16);
        let teacher = frozen_classifier();
        let metrics = evaluate(
            &Method::Fps { start: 0 },
            &teacher,
            &ds,
            Split::Test,
            &[16],
            &EvalOptions::default(),
        )
        .unwrap();
        let mut correct = 0;
        let test = ds.split_indices(Split::Test);
        for &i in &test {
            let it = &ds.items[i];
            if predict(&it.cloud, &teacher).unwrap() == it.label.unwrap() {
                correct += 1;
            }
        }
        let full = correct as f64 / test.len() as f64;
        assert_eq!(metrics.last("test", "accuracy", Some(16)), Some(full));
    }

    #[test]
    fn subset_methods_reject_oversized_requests_but_generation_allows_them() {
        let ds = tiny_dataset(12);
        let teacher = frozen_classifier();
        let store = init_sampler_params(1);
        let opts = EvalOptions::default();
        for method in [
            Method::Learned {
                store: &store,
                variant: Variant::Match,
            },
            Method::Fps { start: 0 },
            Method::Random { seed: 0 },
            Method::Voxel {
                initial_cell: DEFAULT_VOXEL_CELL,
            },
        ] {
            assert!(
                evaluate(&method, &teacher, &ds, Split::Test, &[13], &opts).is_err(),
                "{method:?} accepted m > n"
            );
        }
        let generated = evaluate(
            &Method::Learned {
                store: &store,
                variant: Variant::Generate,
            },
            &teacher,
            &ds,
            Split::Test,
            &[13],
            &opts,
        )
        .unwrap();
        assert!(generated.last("test", "accuracy", Some(13)).is_some());
    }

    #[test]
    fn evaluation_is_deterministic_including_the_random_baseline() {
        let ds = tiny_dataset(12);
        let teacher = frozen_classifier();
        let opts = EvalOptions::default();
        let method = Method::Random { seed: 9 };
        let a = evaluate(&method, &teacher, &ds, Split::Test, &[4, 8], &opts).unwrap();
        let b = evaluate(&method, &teacher, &ds, Split::Test, &[4, 8], &opts).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn reconstruction_evaluation_reports_relative_error() {
        let ds = tiny_dataset(12);
        let mut teacher = TaskNetwork::new_autoencoder(12, 3).unwrap();
        teacher.freeze();
        let metrics = evaluate(
            &Method::Fps { start: 0 },
            &teacher,
            &ds,
            Split::Test,
            &[6],
            &EvalOptions::default(),
        )
        .unwrap();
        let v = metrics.last("test", "nre", Some(6)).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn timing_rows_appear_when_requested() {
        let ds = tiny_dataset(12);
        let teacher = frozen_classifier();
        let opts = EvalOptions {
            timing_runs: 4,
            warmups: 1,
        };
        let metrics = evaluate(
            &Method::Fps { start: 0 },
            &teacher,
            &ds,
            Split::Test,
            &[4],
            &opts,
        )
        .unwrap();
        let t = metrics.last("test", "time_ms", Some(4)).unwrap();
        assert!(t > 0.0);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("g".parse::<Variant>().unwrap(), Variant::Generate);
        assert_eq!("match".parse::<Variant>().unwrap(), Variant::Match);
        assert!("x".parse::<Variant>().is_err());
    }
}
