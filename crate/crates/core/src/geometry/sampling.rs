use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cloud::{dist2, PointCloud};
use super::Point;
use crate::error::{Error, Result};

/// Where farthest point sampling starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FpsStart {
    /// Always index 0.
    FirstIndex,
    /// A start index drawn from a generator seeded with this value.
    Seeded(u64),
    /// The point farthest from the cloud centroid (lowest index on ties),
    /// which does not depend on the order the points are stored in.
    FarthestFromCentroid,
}

/// Greedy max-min subset selection. Each pick maximizes the distance to the
/// already chosen set; ties go to the lowest index.
pub fn fps(cloud: &PointCloud, n_s: usize, start: FpsStart) -> Result<Vec<usize>> {
    let pts = cloud.points();
    let n = pts.len();
    if n_s == 0 || n_s > n {
        return Err(Error::Argument(format!(
            "cannot sample {n_s} seeds from {n} points"
        )));
    }
    let first = match start {
        FpsStart::FirstIndex => 0,
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
        FpsStart::FarthestFromCentroid => {
            let c = cloud.centroid();
            let d = |p: &Point| (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum::<f64>();
            let mut best = 0;
            for i in 1..n {
                if d(&pts[i]) > d(&pts[best]) {
                    best = i;
                }
            }
            best
        }
    };
    let mut chosen = Vec::with_capacity(n_s);
    let mut taken = vec![false; n];
    let mut to_set = vec![f64::INFINITY; n];
    let mut cur = first;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == n_s {
            break;
        }
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = dist2(&pts[i], &pts[cur]);
            if d < to_set[i] {
                to_set[i] = d;
            }
            if to_set[i] > best_d {
                best_d = to_set[i];
                best = i;
            }
        }
        cur = best;
    }
    Ok(chosen)
}

/// Seed centroids with their K nearest neighbours, stored centroid-relative.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centroids: Vec<Point>,
    /// `n_groups * k` points, neighbourhood-major, relative to the centroid.
    pub neighborhoods: Vec<Point>,
    /// Source index of every neighbourhood point, same layout.
    pub neighbor_indices: Vec<usize>,
    pub seed_indices: Vec<usize>,
    pub k: usize,
}

impl PatchSet {
    pub fn n_groups(&self) -> usize {
        self.centroids.len()
    }

    pub fn neighborhood(&self, i: usize) -> &[Point] {
        &self.neighborhoods[i * self.k..(i + 1) * self.k]
    }

    /// Absolute coordinates of the points in neighbourhood `i`.
    pub fn absolute(&self, i: usize) -> Vec<Point> {
        let c = self.centroids[i];
        self.neighborhood(i)
            .iter()
            .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            .collect()
    }
}

/// Groups the cloud around `seeds`: the `k` nearest points per seed by
/// Euclidean distance (seed included), ties by ascending index.
pub fn knn_group(cloud: &PointCloud, seeds: &[usize], k: usize) -> Result<PatchSet> {
    let pts = cloud.points();
    if k == 0 || k > pts.len() {
        return Err(Error::Argument(format!(
            "cannot take {k} neighbours from {} points",
            pts.len()
        )));
    }
    if let Some(&bad) = seeds.iter().find(|&&s| s >= pts.len()) {
        return Err(Error::Argument(format!("seed index {bad} out of range")));
    }
    let mut neighborhoods = Vec::with_capacity(seeds.len() * k);
    let mut neighbor_indices = Vec::with_capacity(seeds.len() * k);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(pts.len());
    for &s in seeds {
        let c = pts[s];
        order.clear();
        order.extend(pts.iter().enumerate().map(|(i, p)| (dist2(p, &c), i)));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
            order.truncate(k);
        }
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &(_, i) in order.iter() {
            let p = pts[i];
            neighborhoods.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            neighbor_indices.push(i);
        }
    }
    Ok(PatchSet {
        centroids: seeds.iter().map(|&s| pts[s]).collect(),
        neighborhoods,
        neighbor_indices,
        seed_indices: seeds.to_vec(),
        k,
    })
}

/// FPS followed by KNN grouping.
pub fn group(cloud: &PointCloud, n_s: usize, k: usize, start: FpsStart) -> Result<PatchSet> {
    let seeds = fps(cloud, n_s, start)?;
    knn_group(cloud, &seeds, k)
}
