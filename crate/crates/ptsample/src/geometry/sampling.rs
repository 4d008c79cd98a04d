//! Non-learned samplers and the generated-to-subset matching step.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::loss::{dist2, nearest_neighbor};
use crate::geometry::{GeneratedCloud, MatchedCloud, PointCloud};

/// Farthest-point sampling: starts at `start_index`, then repeatedly picks
/// the point maximizing the distance to the already-selected set. Ties go
/// to the lowest index, so the result is fully deterministic.
pub fn fps(p: &PointCloud, m: usize, start_index: usize) -> Result<MatchedCloud> {
    if start_index >= p.len() {
        return Err(Error::invalid_argument(format!(
            "start index {start_index} out of bounds for cloud of {}",
            p.len()
        )));
    }
    fps_extend(p, &[start_index], m)
}

/// FPS continuation: treats `seed_indices` as already selected and extends
/// the set to `m` total indices. Seeds must be distinct and in bounds;
/// they are returned first, in their given order.
pub fn fps_extend(p: &PointCloud, seed_indices: &[usize], m: usize) -> Result<MatchedCloud> {
    let n = p.len();
    if m > n {
        return Err(Error::invalid_argument(format!(
            "cannot select {m} of {n} points"
        )));
    }
    if seed_indices.is_empty() || seed_indices.len() > m {
        return Err(Error::invalid_argument(format!(
            "seed set of {} incompatible with target {m}",
            seed_indices.len()
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    // Squared distance from each point to the selected set so far.
    let mut min_d2 = vec![f64::INFINITY; n];
    for &s in seed_indices {
        if s >= n {
            return Err(Error::invalid_argument(format!(
                "seed index {s} out of bounds for cloud of {n}"
            )));
        }
        if taken[s] {
            return Err(Error::invalid_argument(format!("duplicate seed index {s}")));
        }
        taken[s] = true;
        selected.push(s);
    }
    for &s in &selected {
        let ps = p.point(s);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let cand = dist2(p.point(i), ps);
            if cand < *d {
                *d = cand;
            }
        }
    }
    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d2[i] > best_d {
                best = i;
                best_d = min_d2[i];
            }
        }
        taken[best] = true;
        selected.push(best);
        let pb = p.point(best);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let cand = dist2(p.point(i), pb);
            if cand < *d {
                *d = cand;
            }
        }
    }
    MatchedCloud::new(selected, n)
}

/// Uniform sample of `m` distinct indices, reproducible per seed.
pub fn random_sample(p: &PointCloud, m: usize, seed: u64) -> Result<MatchedCloud> {
    let n = p.len();
    if m > n {
        return Err(Error::invalid_argument(format!(
            "cannot select {m} of {n} points"
        )));
    }
    if m == 0 {
        return Err(Error::invalid_argument("cannot select 0 points".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = rand::seq::index::sample(&mut rng, n, m).into_vec();
    MatchedCloud::new(indices, n)
}

/// Grid-based sampler. Points are bucketed into cubic cells; the point
/// nearest each occupied cell's centroid survives. Too many survivors are
/// thinned by FPS (starting at the lowest surviving index); too few trigger
/// a cell-size halving, up to 20 refinements, after which FPS over the full
/// cloud tops up the deficit.
pub fn voxel_sample(p: &PointCloud, m: usize, initial_cell_size: f64) -> Result<MatchedCloud> {
    let n = p.len();
    if m > n {
        return Err(Error::invalid_argument(format!(
            "cannot select {m} of {n} points"
        )));
    }
    if !(initial_cell_size.is_finite() && initial_cell_size > 0.0) {
        return Err(Error::invalid_argument(format!(
            "cell size must be positive, got {initial_cell_size}"
        )));
    }
    let (lo, _) = p.bbox();
    let mut cell = initial_cell_size;
    let mut survivors = Vec::new();
    for _ in 0..=20 {
        survivors = voxel_survivors(p, lo, cell);
        if survivors.len() >= m {
            break;
        }
        cell *= 0.5;
    }
    if survivors.len() == m {
        return MatchedCloud::new(survivors, n);
    }
    if survivors.len() > m {
        // Thin by FPS over the survivor sub-cloud, then map back.
        let sub = p.select(&survivors)?;
        let picked = fps(&sub, m, 0)?;
        let indices = picked.indices().iter().map(|&i| survivors[i]).collect();
        return MatchedCloud::new(indices, n);
    }
    // Refinement exhausted (duplicate-heavy cloud): top up from the rest.
    fps_extend(p, &survivors, m)
}

/// One bucketing pass: survivor index per occupied cell, ordered by cell
/// key for determinism.
fn voxel_survivors(p: &PointCloud, lo: [f64; 3], cell: f64) -> Vec<usize> {
    let mut cells: BTreeMap<(i64, i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, pt) in p.points().iter().enumerate() {
        let key = (
            ((pt[0] - lo[0]) / cell).floor() as i64,
            ((pt[1] - lo[1]) / cell).floor() as i64,
            ((pt[2] - lo[2]) / cell).floor() as i64,
        );
        cells.entry(key).or_default().push(i);
    }
    let mut survivors = Vec::with_capacity(cells.len());
    for members in cells.values() {
        let mut centroid = [0.0; 3];
        for &i in members {
            let pt = p.point(i);
            for a in 0..3 {
                centroid[a] += pt[a];
            }
        }
        for c in centroid.iter_mut() {
            *c /= members.len() as f64;
        }
        let mut best = members[0];
        let mut best_d = dist2(p.point(best), centroid);
        for &i in &members[1..] {
            let d = dist2(p.point(i), centroid);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        survivors.push(best);
    }
    survivors
}

/// Projects a generated cloud onto its parent: each generated point maps to
/// its nearest parent point, duplicate targets collapse to their first
/// occurrence, and FPS (continuing from the kept set) fills the deficit so
/// the output always has exactly `|Q|` distinct indices.
pub fn match_cloud(q: &GeneratedCloud, p: &PointCloud) -> Result<MatchedCloud> {
    let n = p.len();
    let m = q.len();
    if m > n {
        return Err(Error::invalid_argument(format!(
            "cannot match {m} generated points into a cloud of {n}"
        )));
    }
    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(m);
    for &qp in &q.points {
        let (idx, _) = nearest_neighbor(qp, p.points())?;
        if !taken[idx] {
            taken[idx] = true;
            selected.push(idx);
        }
    }
    if selected.len() < m {
        return fps_extend(p, &selected, m);
    }
    MatchedCloud::new(selected, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    /// Independent greedy reference: recomputes every candidate's distance
    /// to the selected set from scratch at each step.
    fn fps_oracle(p: &PointCloud, m: usize, start: usize) -> Vec<usize> {
        let mut selected = vec![start];
        while selected.len() < m {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..p.len() {
                if selected.contains(&i) {
                    continue;
                }
                let d = selected
                    .iter()
                    .map(|&s| dist2(p.point(i), p.point(s)))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best = i;
                    best_d = d;
                }
            }
            selected.push(best);
        }
        selected
    }

    #[test]
    fn fps_square_corners() {
        let p = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        let got = fps(&p, 2, 0).unwrap();
        assert_eq!(got.indices(), &[0, 3]);
    }

    #[test]
    fn fps_full_selection_starts_at_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cloud(&mut rng, 9);
        let got = fps(&p, 9, 4).unwrap();
        assert_eq!(got.indices()[0], 4);
        let mut all: Vec<usize> = got.indices().to_vec();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn fps_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..100 {
            let n = rng.random_range(2..=64);
            let m = rng.random_range(1..=n.min(12));
            let start = rng.random_range(0..n);
            let p = random_cloud(&mut rng, n);
            let got = fps(&p, m, start).unwrap();
            let want = fps_oracle(&p, m, start);
            assert_eq!(got.indices(), want.as_slice(), "trial {trial}");
        }
    }

    #[test]
    fn fps_errors() {
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(7), 4);
        assert!(fps(&p, 5, 0).is_err());
        assert!(fps(&p, 2, 4).is_err());
    }

    #[test]
    fn fps_coverage_beats_random_sampling() {
        // Minimum pairwise distance of the FPS set should beat a random
        // subset of equal size nearly always.
        fn min_pairwise(p: &PointCloud, idx: &[usize]) -> f64 {
            let mut best = f64::INFINITY;
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    best = best.min(dist2(p.point(i), p.point(j)));
                }
            }
            best
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut wins = 0;
        for trial in 0..100 {
            let p = random_cloud(&mut rng, 64);
            let f = fps(&p, 8, 0).unwrap();
            let r = random_sample(&p, 8, trial).unwrap();
            if min_pairwise(&p, f.indices()) >= min_pairwise(&p, r.indices()) {
                wins += 1;
            }
        }
        assert!(wins >= 95, "fps beat random in only {wins}/100 trials");
    }

    #[test]
    fn random_sample_permutation_and_reproducibility() {
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(9), 10);
        let a = random_sample(&p, 10, 42).unwrap();
        let mut sorted = a.indices().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let b = random_sample(&p, 10, 42).unwrap();
        assert_eq!(a.indices(), b.indices());
        let c = random_sample(&p, 10, 43).unwrap();
        assert_ne!(a.indices(), c.indices());
    }

    #[test]
    fn random_sample_is_uniform() {
        // 10,000 draws of one index from four points: each frequency should
        // sit within 3 sigma of 2500 (sigma = sqrt(10000 * .25 * .75)).
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(10), 4);
        let mut counts = [0usize; 4];
        for seed in 0..10_000u64 {
            counts[random_sample(&p, 1, seed).unwrap().indices()[0]] += 1;
        }
        let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 2500.0).abs() < 3.0 * sigma,
                "index {i} drawn {c} times"
            );
        }
    }

    #[test]
    fn voxel_single_cell_picks_global_centroid_point() {
        let p = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.4, 0.4, 0.0], // nearest the centroid (0.35, 0.35, 0)
        ])
        .unwrap();
        let got = voxel_sample(&p, 1, 100.0).unwrap();
        assert_eq!(got.indices(), &[3]);
    }

    #[test]
    fn voxel_identity_when_already_one_per_cell() {
        // Unit-spaced points with cell size 0.9: one point per cell.
        let p = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
        ])
        .unwrap();
        let got = voxel_sample(&p, 3, 0.9).unwrap();
        let mut idx = got.indices().to_vec();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2]);
    }

    #[test]
    fn voxel_two_blobs_selects_one_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pts = Vec::new();
        for _ in 0..8 {
            pts.push([
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                0.0,
            ]);
        }
        for _ in 0..8 {
            pts.push([
                10.0 + rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                0.0,
            ]);
        }
        let p = PointCloud::new(pts).unwrap();
        let got = voxel_sample(&p, 2, 5.0).unwrap();
        let blob = |i: usize| usize::from(i >= 8);
        assert_ne!(
            blob(got.indices()[0]),
            blob(got.indices()[1]),
            "both picks landed in one blob: {:?}",
            got.indices()
        );
    }

    #[test]
    fn voxel_duplicate_heavy_cloud_tops_up_with_fps() {
        // Two distinct coordinates but m=3: refinement can never produce
        // more than 2 survivors, so the FPS top-up must kick in.
        let p = PointCloud::new(vec![
            [0.0; 3],
            [0.0; 3],
            [1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
        ])
        .unwrap();
        let got = voxel_sample(&p, 3, 1.0).unwrap();
        assert_eq!(got.len(), 3);
        let mut idx = got.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 3, "indices must stay distinct");
    }

    #[test]
    fn voxel_rejects_bad_cell_size() {
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(12), 4);
        assert!(voxel_sample(&p, 2, 0.0).is_err());
        assert!(voxel_sample(&p, 2, -1.0).is_err());
        assert!(voxel_sample(&p, 9, 1.0).is_err());
    }

    #[test]
    fn match_identity_when_q_equals_p_points() {
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(13), 6);
        let q = GeneratedCloud::new(vec![p.point(2), p.point(0), p.point(5)], 6).unwrap();
        let got = match_cloud(&q, &p).unwrap();
        assert_eq!(got.indices(), &[2, 0, 5]);
    }

    #[test]
    fn match_duplicates_fill_with_farthest_corner() {
        let p = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ])
        .unwrap();
        // Both generated points sit nearest corner 3.
        let q = GeneratedCloud::new(vec![[0.9, 0.9, 0.0], [0.95, 0.85, 0.0]], 4).unwrap();
        let got = match_cloud(&q, &p).unwrap();
        // Corner 0 is farthest from corner 3.
        assert_eq!(got.indices(), &[3, 0]);
    }

    #[test]
    fn match_output_always_distinct_and_sized() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let n = rng.random_range(4..=32);
            let m = rng.random_range(1..=n);
            let p = random_cloud(&mut rng, n);
            let q = GeneratedCloud::new(
                (0..m)
                    .map(|_| {
                        [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ]
                    })
                    .collect(),
                n,
            )
            .unwrap();
            let got = match_cloud(&q, &p).unwrap();
            assert_eq!(got.len(), m);
            let mut idx = got.indices().to_vec();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), m);
            assert!(idx.iter().all(|&i| i < n));
        }
    }

    #[test]
    fn match_all_duplicate_q() {
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(15), 8);
        let q = GeneratedCloud::new(vec![[0.1, 0.2, 0.3]; 5], 8).unwrap();
        let got = match_cloud(&q, &p).unwrap();
        assert_eq!(got.len(), 5);
        let mut idx = got.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 5);
    }

    #[test]
    fn match_rejects_oversized_q() {
        let p = random_cloud(&mut ChaCha8Rng::seed_from_u64(16), 3);
        let q = GeneratedCloud::new(vec![[0.0; 3]; 4], 3).unwrap();
        assert!(match_cloud(&q, &p).is_err());
    }
}
