//! Per-(class, stride) clustering of feature collections.
//!
//! Four regimes are supported: a single cluster (`One`), k-means with the
//! number of clusters picked by silhouette from a grid, k-means with a forced
//! cluster count, and a density method built on mutual-reachability distances
//! (core distance, minimum spanning tree, cut at the largest weight gap).
//! Centroids are always the arithmetic mean of the members; noise points are
//! left out of every centroid.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{mean_vector, Distance};
use crate::error::{Error, Result};

/// Assignment label of points that belong to no cluster.
pub const NOISE: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    #[default]
    One,
    #[serde(rename = "kmeans")]
    KMeans,
    #[serde(rename = "kmeans_forced")]
    KMeansForced,
    Density,
}

impl ClusterMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusterMethod::One => "one",
            ClusterMethod::KMeans => "kmeans",
            ClusterMethod::KMeansForced => "kmeans_forced",
            ClusterMethod::Density => "density",
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "one" => Ok(ClusterMethod::One),
            "kmeans" => Ok(ClusterMethod::KMeans),
            "kmeans_forced" | "kmeans10" | "kmeans-forced" => Ok(ClusterMethod::KMeansForced),
            "density" | "hdbscan" => Ok(ClusterMethod::Density),
            other => Err(Error::Config(format!("unknown cluster method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub method: ClusterMethod,
    pub k_grid: Vec<usize>,
    pub forced_k: usize,
    pub min_cluster_size_grid: Vec<usize>,
    pub seed: u64,
    pub max_iters: usize,
    /// Relative centroid movement below which Lloyd iterations stop.
    pub tol: f64,
    /// Below this many samples the silhouette search is skipped.
    pub silhouette_min_samples: usize,
    /// Silhouette is evaluated on a seeded subsample of at most this size.
    pub silhouette_sample_cap: usize,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            method: ClusterMethod::One,
            k_grid: (2..=10).collect(),
            forced_k: 10,
            min_cluster_size_grid: vec![5, 10, 15],
            seed: 0,
            max_iters: 300,
            tol: 1e-6,
            silhouette_min_samples: 20,
            silhouette_sample_cap: 2000,
        }
    }
}

impl ClusterSpec {
    pub fn with_method(method: ClusterMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() || self.k_grid.iter().any(|&k| k < 2) {
            return Err(Error::Config("k_grid must be nonempty with every k >= 2".into()));
        }
        if self.forced_k < 2 {
            return Err(Error::Config("forced_k must be >= 2".into()));
        }
        if self.min_cluster_size_grid.is_empty() || self.min_cluster_size_grid.iter().any(|&m| m < 2)
        {
            return Err(Error::Config(
                "min_cluster_size_grid must be nonempty with every size >= 2".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster id per sample, [`NOISE`] for noise.
    pub assignments: Vec<i64>,
    pub centroids: Vec<Vec<f64>>,
    pub silhouette: Option<f64>,
    pub method_used: ClusterMethod,
    /// Set when k-means ended with coincident centroids (zero-variance input).
    pub degenerate: bool,
}

impl ClusterResult {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Data("points have inconsistent dimensionality".into()));
    }
    Ok(dim)
}

fn centroids_from(points: &[Vec<f64>], assignments: &[i64], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|j| {
            mean_vector(
                points
                    .iter()
                    .zip(assignments)
                    .filter(|(_, &a)| a == j as i64)
                    .map(|(p, _)| p.as_slice()),
            )
            .unwrap_or_default()
        })
        .collect()
}

fn kmeans_pp_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(points[rng.random_range(0..n)].clone());
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_l2(p, &seeds[0])).collect();
    while seeds.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_l2(p, &c));
        }
        seeds.push(c);
    }
    seeds
}

/// Lloyd's k-means from k-means++ seeds; squared Euclidean assignment.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterResult> {
    kmeans_traced(points, k, seed, max_iters, tol).map(|(r, _)| r)
}

/// Like [`kmeans`], also returning the within-cluster sum of squares after
/// every iteration.
pub fn kmeans_traced(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<(ClusterResult, Vec<f64>)> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            got: points.len(),
        });
    }
    check_points(points)?;
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seeds(points, k, &mut rng);
    let mut assignments = vec![0i64; n];
    let mut history = Vec::new();
    let mut reseeded = false;

    for _ in 0..max_iters.max(1) {
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_l2(p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            assignments[i] = best as i64;
            dists[i] = best_d;
        }

        // relocate empty clusters to the points farthest from their centroid
        reseeded = false;
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a as usize] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| counts[assignments[i] as usize] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = donor {
                counts[assignments[i] as usize] -= 1;
                assignments[i] = j as i64;
                counts[j] = 1;
                dists[i] = 0.0;
                reseeded = true;
            }
        }

        let updated = centroids_from(points, &assignments, k);
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_l2(p, &updated[a as usize]))
            .sum();
        history.push(inertia);

        let shift: f64 = updated.iter().zip(&centroids).map(|(a, b)| sq_l2(a, b)).sum();
        let scale: f64 = centroids.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum();
        centroids = updated;
        if shift.sqrt() <= tol * scale.sqrt() {
            break;
        }
    }

    let mut degenerate = reseeded;
    for a in 0..k {
        for b in a + 1..k {
            if sq_l2(&centroids[a], &centroids[b]) == 0.0 {
                degenerate = true;
            }
        }
    }
    Ok((
        ClusterResult {
            assignments,
            centroids,
            silhouette: None,
            method_used: ClusterMethod::KMeans,
            degenerate,
        },
        history,
    ))
}

/// Mean silhouette over non-noise samples.
///
/// Singleton clusters use an intra-cluster distance of 0.
pub fn silhouette_score(points: &[Vec<f64>], assignments: &[i64], distance: Distance) -> Result<f64> {
    if points.len() != assignments.len() {
        return Err(Error::Data("points and assignments differ in length".into()));
    }
    let members: Vec<usize> = (0..points.len()).filter(|&i| assignments[i] != NOISE).collect();
    let mut labels: Vec<i64> = members.iter().map(|&i| assignments[i]).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Undefined(format!(
            "silhouette needs at least 2 clusters, found {}",
            labels.len()
        )));
    }
    let slot = |a: i64| labels.binary_search(&a).unwrap();
    let mut sizes = vec![0usize; labels.len()];
    for &i in &members {
        sizes[slot(assignments[i])] += 1;
    }

    let mut total = 0.0;
    let mut sums = vec![0.0; labels.len()];
    for &i in &members {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for &j in &members {
            if i != j {
                sums[slot(assignments[j])] += distance.eval(&points[i], &points[j])?;
            }
        }
        let own = slot(assignments[i]);
        let a = if sizes[own] > 1 {
            sums[own] / (sizes[own] - 1) as f64
        } else {
            0.0
        };
        let b = (0..labels.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        total += if denom > 0.0 { (b - a) / denom } else { 0.0 };
    }
    Ok(total / members.len() as f64)
}

/// Silhouette on at most `cap` samples drawn with a seeded shuffle.
pub fn silhouette_score_sampled(
    points: &[Vec<f64>],
    assignments: &[i64],
    distance: Distance,
    cap: usize,
    seed: u64,
) -> Result<f64> {
    if cap == 0 || points.len() <= cap {
        return silhouette_score(points, assignments, distance);
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5111_4e77));
    idx.truncate(cap);
    idx.sort_unstable();
    let pts: Vec<Vec<f64>> = idx.iter().map(|&i| points[i].clone()).collect();
    let asg: Vec<i64> = idx.iter().map(|&i| assignments[i]).collect();
    silhouette_score(&pts, &asg, distance)
}

/// Weighted edge of a spanning tree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Distance from each point to its `k`-th nearest other point.
pub fn core_distances(points: &[Vec<f64>], k: usize, distance: Distance) -> Result<Vec<f64>> {
    let n = points.len();
    let mut out = Vec::with_capacity(n);
    let mut row = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        for j in 0..n {
            if i != j {
                row.push(distance.eval(&points[i], &points[j])?);
            }
        }
        if row.is_empty() {
            out.push(0.0);
            continue;
        }
        let kth = k.clamp(1, row.len()) - 1;
        let (_, v, _) = row.select_nth_unstable_by(kth, f64::total_cmp);
        out.push(*v);
    }
    Ok(out)
}

/// Prim's minimum spanning tree over mutual-reachability distances.
pub fn mutual_reachability_mst(
    points: &[Vec<f64>],
    core: &[f64],
    distance: Distance,
) -> Result<Vec<MstEdge>> {
    let n = points.len();
    if n < 2 {
        return Ok(Vec::new());
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0usize;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = distance.eval(&points[current], &points[j])?;
            let mr = d.max(core[current]).max(core[j]);
            if mr < best[j] {
                best[j] = mr;
                parent[j] = current;
            }
        }
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .expect("at least one vertex outside the tree");
        in_tree[next] = true;
        edges.push(MstEdge {
            a: parent[next],
            b: next,
            weight: best[next],
        });
        current = next;
    }
    Ok(edges)
}

/// Cut level at the largest gap between consecutive sorted edge weights;
/// `None` when every weight is equal.
pub fn largest_gap_cut(weights: &[f64]) -> Option<f64> {
    let mut w = weights.to_vec();
    w.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for pair in w.windows(2) {
        let gap = pair[1] - pair[0];
        if gap > 0.0 && best.is_none_or(|(g, _)| gap > g) {
            best = Some((gap, pair[0]));
        }
    }
    best.map(|(_, level)| level)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Labels components of the forest left after removing edges heavier than
/// `cut`; components smaller than `min_size` become noise. Cluster ids follow
/// the smallest member index.
pub fn label_components(n: usize, edges: &[MstEdge], cut: Option<f64>, min_size: usize) -> Vec<i64> {
    let mut parent: Vec<usize> = (0..n).collect();
    for e in edges {
        if cut.is_none_or(|c| e.weight <= c) {
            let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut size = vec![0usize; n];
    for &r in &roots {
        size[r] += 1;
    }
    let mut label_of = vec![NOISE; n];
    let mut next = 0i64;
    let mut out = vec![NOISE; n];
    for i in 0..n {
        let r = roots[i];
        if size[r] < min_size {
            continue;
        }
        if label_of[r] == NOISE {
            label_of[r] = next;
            next += 1;
        }
        out[i] = label_of[r];
    }
    out
}

/// Density clustering over mutual-reachability distances.
pub fn density_cluster(
    points: &[Vec<f64>],
    min_cluster_size: usize,
    distance: Distance,
) -> Result<ClusterResult> {
    if min_cluster_size == 0 {
        return Err(Error::Config("min_cluster_size must be >= 1".into()));
    }
    if points.len() < min_cluster_size {
        return Err(Error::InsufficientSamples {
            needed: min_cluster_size,
            got: points.len(),
        });
    }
    check_points(points)?;
    let core = core_distances(points, min_cluster_size, distance)?;
    let mst = mutual_reachability_mst(points, &core, distance)?;
    let weights: Vec<f64> = mst.iter().map(|e| e.weight).collect();
    let assignments = label_components(points.len(), &mst, largest_gap_cut(&weights), min_cluster_size);
    let k = assignments.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    if k == 0 {
        return Err(Error::AllNoise);
    }
    let centroids = centroids_from(points, &assignments, k);
    Ok(ClusterResult {
        assignments,
        centroids,
        silhouette: None,
        method_used: ClusterMethod::Density,
        degenerate: false,
    })
}

fn one_cluster(points: &[Vec<f64>]) -> ClusterResult {
    ClusterResult {
        assignments: vec![0; points.len()],
        centroids: vec![mean_vector(points.iter().map(Vec::as_slice)).unwrap_or_default()],
        silhouette: None,
        method_used: ClusterMethod::One,
        degenerate: false,
    }
}

fn pick_best(candidates: Vec<ClusterResult>) -> Option<ClusterResult> {
    // highest silhouette wins; undefined ranks last; earlier grid entries win ties
    let mut best: Option<ClusterResult> = None;
    for c in candidates {
        let better = match (&best, c.silhouette) {
            (None, _) => true,
            (Some(b), Some(s)) => b.silhouette.is_none_or(|bs| s > bs),
            (Some(_), None) => false,
        };
        if better {
            best = Some(c);
        }
    }
    best
}

/// Clusters `points` according to `spec`.
pub fn fit_clusters(points: &[Vec<f64>], spec: &ClusterSpec, distance: Distance) -> Result<ClusterResult> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    check_points(points)?;
    let n = points.len();
    let search = n >= spec.silhouette_min_samples;
    let score = |r: &ClusterResult| -> Result<Option<f64>> {
        match silhouette_score_sampled(points, &r.assignments, distance, spec.silhouette_sample_cap, spec.seed) {
            Ok(s) => Ok(Some(s)),
            Err(Error::Undefined(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    match spec.method {
        ClusterMethod::One => Ok(one_cluster(points)),
        ClusterMethod::KMeansForced => kmeans(points, spec.forced_k, spec.seed, spec.max_iters, spec.tol),
        ClusterMethod::KMeans => {
            let mut grid: Vec<usize> = spec.k_grid.iter().copied().filter(|&k| k <= n).collect();
            grid.sort_unstable();
            grid.dedup();
            let smallest = spec.k_grid.iter().copied().min().unwrap_or(2);
            if grid.is_empty() {
                return Err(Error::InsufficientSamples { needed: smallest, got: n });
            }
            if !search {
                return kmeans(points, grid[0], spec.seed, spec.max_iters, spec.tol);
            }
            let mut candidates = Vec::with_capacity(grid.len());
            for k in grid {
                let mut r = kmeans(points, k, spec.seed, spec.max_iters, spec.tol)?;
                r.silhouette = score(&r)?;
                candidates.push(r);
            }
            Ok(pick_best(candidates).expect("grid is nonempty"))
        }
        ClusterMethod::Density => {
            let grid: Vec<usize> = spec
                .min_cluster_size_grid
                .iter()
                .copied()
                .filter(|&m| m <= n)
                .collect();
            if grid.is_empty() {
                let smallest = spec.min_cluster_size_grid.iter().copied().min().unwrap_or(2);
                return Err(Error::InsufficientSamples { needed: smallest, got: n });
            }
            let grid = if search { grid } else { grid[..1].to_vec() };
            let mut candidates = Vec::new();
            for m in grid {
                match density_cluster(points, m, distance) {
                    Ok(mut r) => {
                        if search {
                            r.silhouette = score(&r)?;
                        }
                        candidates.push(r);
                    }
                    Err(Error::AllNoise) => continue,
                    Err(e) => return Err(e),
                }
            }
            pick_best(candidates).ok_or(Error::AllNoise)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(centres: &[(f64, f64)], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, &(x, y)) in centres.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![x + noise.sample(&mut rng), y + noise.sample(&mut rng)]);
                labels.push(c);
            }
        }
        (pts, labels)
    }

    fn assert_centroids_are_means(points: &[Vec<f64>], r: &ClusterResult) {
        for (j, c) in r.centroids.iter().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&r.assignments)
                .filter(|(_, &a)| a == j as i64)
                .map(|(p, _)| p)
                .collect();
            assert!(!members.is_empty());
            for d in 0..c.len() {
                let m = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                assert!((c[d] - m).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn identical_points_k2_is_flagged() {
        let pts = vec![vec![1.5, -2.0]; 8];
        let r = kmeans(&pts, 2, 7, 300, 1e-6).unwrap();
        assert!(r.degenerate);
        assert!(r.centroids.iter().any(|c| c == &vec![1.5, -2.0]));
        assert_centroids_are_means(&pts, &r);
    }

    #[test]
    fn two_blobs_recovered() {
        let (pts, labels) = blobs(&[(-10.0, 0.0), (10.0, 0.0)], 50, 0.1, 3);
        let r = kmeans(&pts, 2, 11, 300, 1e-6).unwrap();
        for blob in 0..2 {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == blob).map(|(p, _)| p).collect();
            let mx = members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64;
            let my = members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64;
            let best = r
                .centroids
                .iter()
                .map(|c| ((c[0] - mx).powi(2) + (c[1] - my).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "blob {blob} centroid off by {best}");
        }
    }

    #[test]
    fn k1_is_global_mean() {
        let (pts, _) = blobs(&[(1.0, 2.0), (5.0, -3.0)], 20, 1.0, 5);
        let r = kmeans(&pts, 1, 0, 300, 1e-6).unwrap();
        let mean = mean_vector(pts.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(r.centroids, vec![mean]);
    }

    #[test]
    fn too_few_points_for_k() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            kmeans(&pts, 3, 0, 10, 1e-6),
            Err(Error::InsufficientSamples { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn silhouette_two_singletons_is_one() {
        let pts = vec![vec![0.0], vec![1.0]];
        assert_eq!(silhouette_score(&pts, &[0, 1], Distance::L2).unwrap(), 1.0);
    }

    #[test]
    fn silhouette_hand_computed_four_points() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        // every point: a = 1, b = (10 + sqrt(101)) / 2
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        let expected = (b - 1.0) / b;
        let got = silhouette_score(&pts, &[0, 0, 1, 1], Distance::L2).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn silhouette_of_arbitrary_split_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| vec![normal.sample(&mut rng), normal.sample(&mut rng)])
            .collect();
        let asg: Vec<i64> = (0..200).map(|i| (i % 2) as i64).collect();
        assert!(silhouette_score(&pts, &asg, Distance::L2).unwrap().abs() < 0.3);
    }

    #[test]
    fn silhouette_single_cluster_undefined() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(matches!(
            silhouette_score(&pts, &[0, 0, NOISE], Distance::L2),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn density_three_tight_blobs() {
        let (pts, labels) = blobs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], 30, 0.05, 9);
        let r = density_cluster(&pts, 5, Distance::L2).unwrap();
        assert_eq!(r.num_clusters(), 3);
        assert!(r.assignments.iter().all(|&a| a != NOISE));
        // blob membership agrees with cluster membership
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(labels[i] == labels[j], r.assignments[i] == r.assignments[j]);
            }
        }
        assert_centroids_are_means(&pts, &r);
    }

    /// Kruskal over the full mutual-reachability matrix.
    fn kruskal_weights(points: &[Vec<f64>], k: usize) -> Vec<f64> {
        let n = points.len();
        let d = |i: usize, j: usize| Distance::L2.eval(&points[i], &points[j]).unwrap();
        let core: Vec<f64> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d(i, j)).collect();
                row.sort_by(f64::total_cmp);
                row[k.min(row.len()) - 1]
            })
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                edges.push((d(i, j).max(core[i]).max(core[j]), i, j));
            }
        }
        edges.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut parent: Vec<usize> = (0..n).collect();
        let mut out = Vec::new();
        for (w, i, j) in edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
                out.push(w);
            }
        }
        out
    }

    #[test]
    fn uniform_scatter_is_noise_or_single_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|_| vec![rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0])
            .collect();
        let core = core_distances(&pts, 15, Distance::L2).unwrap();
        let mst = mutual_reachability_mst(&pts, &core, Distance::L2).unwrap();
        let mut prim: Vec<f64> = mst.iter().map(|e| e.weight).collect();
        prim.sort_by(f64::total_cmp);
        let kruskal = kruskal_weights(&pts, 15);
        for (a, b) in prim.iter().zip(&kruskal) {
            assert!((a - b).abs() < 1e-12);
        }
        match density_cluster(&pts, 15, Distance::L2) {
            Err(Error::AllNoise) => {}
            Ok(r) => assert_eq!(r.num_clusters(), 1),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn duplicate_points_form_one_cluster() {
        let pts = vec![vec![3.0, 3.0]; 12];
        let r = density_cluster(&pts, 5, Distance::L2).unwrap();
        assert_eq!(r.num_clusters(), 1);
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn fit_one_is_mean() {
        let (pts, _) = blobs(&[(0.0, 0.0)], 7, 1.0, 2);
        let r = fit_clusters(&pts, &ClusterSpec::with_method(ClusterMethod::One), Distance::L2).unwrap();
        assert_eq!(r.num_clusters(), 1);
        assert_eq!(r.centroids[0], mean_vector(pts.iter().map(Vec::as_slice)).unwrap());
    }

    #[test]
    fn fit_kmeans_prefers_three_on_three_blobs() {
        let (pts, _) = blobs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], 30, 0.5, 4);
        let spec = ClusterSpec {
            method: ClusterMethod::KMeans,
            k_grid: vec![2, 3],
            ..ClusterSpec::default()
        };
        let r2 = kmeans(&pts, 2, spec.seed, spec.max_iters, spec.tol).unwrap();
        let r3 = kmeans(&pts, 3, spec.seed, spec.max_iters, spec.tol).unwrap();
        let s2 = silhouette_score(&pts, &r2.assignments, Distance::L2).unwrap();
        let s3 = silhouette_score(&pts, &r3.assignments, Distance::L2).unwrap();
        assert!(s3 > s2);
        let r = fit_clusters(&pts, &spec, Distance::L2).unwrap();
        assert_eq!(r.num_clusters(), 3);
        assert_eq!(r.silhouette, Some(s3));
    }

    #[test]
    fn fit_forced_gives_ten() {
        let (pts, _) = blobs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], 30, 0.5, 4);
        let r = fit_clusters(&pts, &ClusterSpec::with_method(ClusterMethod::KMeansForced), Distance::L2).unwrap();
        assert_eq!(r.num_clusters(), 10);
        assert_centroids_are_means(&pts, &r);
    }

    #[test]
    fn fit_small_sample_skips_silhouette() {
        let (pts, _) = blobs(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], 5, 0.5, 4);
        let spec = ClusterSpec::with_method(ClusterMethod::KMeans);
        let r = fit_clusters(&pts, &spec, Distance::L2).unwrap();
        assert_eq!(r.num_clusters(), 2);
        assert_eq!(r.silhouette, None);
    }

    #[test]
    fn fit_density_excludes_noise() {
        let (mut pts, _) = blobs(&[(0.0, 0.0), (10.0, 0.0)], 30, 0.05, 8);
        pts.push(vec![5.0, 12.0]);
        let r = fit_clusters(&pts, &ClusterSpec::with_method(ClusterMethod::Density), Distance::L2).unwrap();
        assert_eq!(*r.assignments.last().unwrap(), NOISE);
        assert_eq!(r.num_clusters(), 2);
        assert_centroids_are_means(&pts, &r);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn kmeans_invariants(seed in 0u64..1000, k in 1usize..5, n in 5usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let (r, history) = kmeans_traced(&pts, k, seed, 300, 1e-6).unwrap();
            assert_centroids_are_means(&pts, &r);
            for w in history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            let again = kmeans(&pts, k, seed, 300, 1e-6).unwrap();
            prop_assert_eq!(&again, &r);
            if k == 1 {
                let one = fit_clusters(&pts, &ClusterSpec::with_method(ClusterMethod::One), Distance::L2).unwrap();
                prop_assert_eq!(&one.centroids, &r.centroids);
                prop_assert_eq!(&one.assignments, &r.assignments);
            }
        }

        #[test]
        fn density_centroids_are_means(seed in 0u64..500, n in 10usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|i| vec![(i % 2) as f64 * 20.0 + rng.random::<f64>(), rng.random::<f64>()])
                .collect();
            if let Ok(r) = density_cluster(&pts, 4, Distance::L1) {
                assert_centroids_are_means(&pts, &r);
                let again = density_cluster(&pts, 4, Distance::L1).unwrap();
                prop_assert_eq!(again, r);
            }
        }
    }
}
