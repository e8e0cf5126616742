//! Service and edge-node clustering.
//!
//! WK-means groups service time series by 1-D Wasserstein distance with a
//! deterministic sorted-mean initialization and medoid center updates.
//! Edge nodes are grouped by K-means over per-service statistical feature
//! vectors, with the cluster count chosen by silhouette score.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::NodeDataset;
use crate::metrics::{silhouette_from_matrix, DistanceKind, MetricsError};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("no items to cluster")]
    EmptyInput,
    #[error("requested {requested} clusters for {available} items")]
    TooManyClusters { requested: usize, available: usize },
    #[error("cluster count must be at least 2, got {0}")]
    TooFewClusters(usize),
    #[error("max iterations must be at least 1")]
    NoIterations,
    #[error("empty cluster-count range")]
    EmptyRange,
    #[error("distance computation failed: {0}")]
    Distance(#[from] MetricsError),
    #[error("partitions must cover the same item count: {0} vs {1}")]
    PartitionSizeMismatch(usize, usize),
}

/// A clustering assignment in canonical form: clusters are numbered by first
/// occurrence, so two assignments that differ only by a label permutation
/// compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Self {
        let mut map: Vec<Option<usize>> = Vec::new();
        let mut next = 0usize;
        let labels = labels
            .into_iter()
            .map(|l| {
                if l >= map.len() {
                    map.resize(l + 1, None);
                }
                *map[l].get_or_insert_with(|| {
                    let id = next;
                    next += 1;
                    id
                })
            })
            .collect();
        Self { labels }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Item indices belonging to cluster `c`, in ascending order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Adjusted Rand index between two partitions of the same item set.
pub fn adjusted_rand_index(a: &Partition, b: &Partition) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same items");
    let n = a.len();
    let (ka, kb) = (a.num_clusters(), b.num_clusters());
    let mut table = vec![vec![0u64; kb]; ka];
    for i in 0..n {
        table[a.labels()[i]][b.labels()[i]] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&x| choose2(x)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = (sum_a + sum_b) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        1.0
    } else {
        (sum_ij - expected) / (max_index - expected)
    }
}

/// Per-node feature vector: for each service, (mean, population std, max,
/// min) of raw MB volume over the full observation window.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub node_id: String,
    pub vector: Vec<f64>,
}

pub fn node_features(dataset: &NodeDataset) -> NodeFeatures {
    let mut vector = Vec::with_capacity(4 * dataset.num_services());
    for s in dataset.series() {
        let v = s.values();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        vector.extend_from_slice(&[mean, var.sqrt(), max, min]);
    }
    NodeFeatures {
        node_id: dataset.node_id().to_string(),
        vector,
    }
}

/// Index of the member minimizing the summed Wasserstein distance to all
/// other members; ties go to the lowest index.
pub fn wd_medoid(members: &[Vec<f64>]) -> usize {
    medoid_with(members, &DistanceKind::default()).expect("wasserstein on valid series")
}

fn medoid_with(members: &[Vec<f64>], dist: &DistanceKind) -> Result<usize, ClusterError> {
    assert!(!members.is_empty(), "medoid of empty cluster");
    let mut best = 0;
    let mut best_sum = f64::INFINITY;
    for (i, mi) in members.iter().enumerate() {
        let mut sum = 0.0;
        for (j, mj) in members.iter().enumerate() {
            if i != j {
                sum += dist.distance(mi, mj)?;
            }
        }
        if sum < best_sum {
            best_sum = sum;
            best = i;
        }
    }
    Ok(best)
}

/// WK-means service clustering with the default Wasserstein distance.
pub fn wkmeans(series: &[Vec<f64>], n: usize, max_iter: usize) -> Result<Partition, ClusterError> {
    cluster_series(series, n, max_iter, &DistanceKind::default())
}

/// K-means-style clustering of series under an arbitrary distance kernel.
///
/// Initialization sorts services by mean volume, splits the sorted order into
/// `n` segments with boundaries at multiples of `floor(S/n)` (remainder
/// absorbed by the final segment), and takes each segment's lower-median
/// service as the initial center. Assignment ties go to the lowest center
/// index; centers are updated to the cluster medoid; iteration stops when
/// labels are unchanged or after `max_iter` assignment passes.
pub fn cluster_series(
    series: &[Vec<f64>],
    n: usize,
    max_iter: usize,
    dist: &DistanceKind,
) -> Result<Partition, ClusterError> {
    let s = series.len();
    if s == 0 {
        return Err(ClusterError::EmptyInput);
    }
    if n < 2 {
        return Err(ClusterError::TooFewClusters(n));
    }
    if n > s {
        return Err(ClusterError::TooManyClusters {
            requested: n,
            available: s,
        });
    }
    if max_iter < 1 {
        return Err(ClusterError::NoIterations);
    }

    // Pairwise distances up front; every later step only consults this.
    let mut dmat = vec![vec![0.0; s]; s];
    for i in 0..s {
        for j in (i + 1)..s {
            let d = dist.distance(&series[i], &series[j])?;
            dmat[i][j] = d;
            dmat[j][i] = d;
        }
    }

    // Sort by mean volume and slice into n segments.
    let means: Vec<f64> = series
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap().then(a.cmp(&b)));
    let width = s / n;
    let mut labels = vec![0usize; s];
    let mut centers = Vec::with_capacity(n);
    for c in 0..n {
        let from = c * width;
        let to = if c == n - 1 { s } else { (c + 1) * width };
        let segment = &order[from..to];
        for &idx in segment {
            labels[idx] = c;
        }
        // Lower-median member of the segment (segment is sorted by mean).
        centers.push(segment[(segment.len() - 1) / 2]);
    }

    let assign = |centers: &[usize]| -> Vec<usize> {
        (0..s)
            .map(|i| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (c, &ci) in centers.iter().enumerate() {
                    let d = dmat[i][ci];
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };

    for iter in 0..max_iter {
        let new_labels = assign(&centers);
        let converged = new_labels == labels && iter > 0;
        labels = new_labels;
        if converged {
            break;
        }
        // Medoid update; an emptied cluster keeps its previous center.
        for c in 0..n {
            let members: Vec<usize> = (0..s).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut best = members[0];
            let mut best_sum = f64::INFINITY;
            for &i in &members {
                let sum: f64 = members.iter().map(|&j| dmat[i][j]).sum();
                if sum < best_sum {
                    best_sum = sum;
                    best = i;
                }
            }
            centers[c] = best;
        }
    }
    Ok(Partition::new(labels))
}

/// Lloyd's algorithm on z-score-standardized feature vectors with greedy
/// farthest-point seeding, multiple restarts, and deterministic behavior
/// derived from `seed`. The best-inertia run wins.
pub fn kmeans(
    features: &[NodeFeatures],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<Partition, ClusterError> {
    let n = features.len();
    if n == 0 {
        return Err(ClusterError::EmptyInput);
    }
    if k < 2 {
        return Err(ClusterError::TooFewClusters(k));
    }
    if k > n {
        return Err(ClusterError::TooManyClusters {
            requested: k,
            available: n,
        });
    }
    let points = standardize(features);
    let dims = points[0].len();

    let sqdist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    let mut best_labels: Option<Vec<usize>> = None;
    let mut best_inertia = f64::INFINITY;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
        // Greedy farthest-point seeding.
        let mut center_idx = vec![rng.gen_range(0..n)];
        while center_idx.len() < k {
            let mut far = 0;
            let mut far_d = -1.0;
            for i in 0..n {
                let d = center_idx
                    .iter()
                    .map(|&c| sqdist(&points[i], &points[c]))
                    .fold(f64::INFINITY, f64::min);
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            center_idx.push(far);
        }
        let mut centroids: Vec<Vec<f64>> =
            center_idx.iter().map(|&i| points[i].clone()).collect();

        let mut labels = vec![usize::MAX; n];
        for _ in 0..200 {
            let new_labels: Vec<usize> = points
                .iter()
                .map(|p| {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (c, cen) in centroids.iter().enumerate() {
                        let d = sqdist(p, cen);
                        if d < best_d {
                            best_d = d;
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            let changed = new_labels != labels;
            labels = new_labels;
            // Means update with empty-cluster repair.
            let mut counts = vec![0usize; k];
            let mut sums = vec![vec![0.0; dims]; k];
            for (p, &l) in points.iter().zip(&labels) {
                counts[l] += 1;
                for (s, v) in sums[l].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] == 0 {
                    // Move in the point farthest from its current centroid.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            sqdist(&points[a], &centroids[labels[a]])
                                .partial_cmp(&sqdist(&points[b], &centroids[labels[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    centroids[c] = points[far].clone();
                } else {
                    for (s, cen) in sums[c].iter().zip(centroids[c].iter_mut()) {
                        *cen = s / counts[c] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| sqdist(p, &centroids[l]))
            .sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_labels = Some(labels);
        }
    }
    Ok(Partition::new(best_labels.expect("at least one restart")))
}

fn standardize(features: &[NodeFeatures]) -> Vec<Vec<f64>> {
    let n = features.len();
    let dims = features[0].vector.len();
    let mut out = vec![vec![0.0; dims]; n];
    for d in 0..dims {
        let mean = features.iter().map(|f| f.vector[d]).sum::<f64>() / n as f64;
        let var = features
            .iter()
            .map(|f| (f.vector[d] - mean) * (f.vector[d] - mean))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        for (i, f) in features.iter().enumerate() {
            out[i][d] = if std > 0.0 { (f.vector[d] - mean) / std } else { 0.0 };
        }
    }
    out
}

/// Run a series clusterer for every `k` in the inclusive range, score each
/// result by silhouette under the same distance, and return the best `k`
/// (ties to the smallest) plus the per-k scores. Degenerate single-cluster
/// results score 0.
pub fn choose_k_series(
    series: &[Vec<f64>],
    k_range: (usize, usize),
    dist: &DistanceKind,
    max_iter: usize,
) -> Result<(usize, Vec<(usize, f64)>), ClusterError> {
    let (lo, hi) = k_range;
    if lo > hi || lo < 2 || hi > series.len() {
        return Err(ClusterError::EmptyRange);
    }
    let mut dmat = vec![vec![0.0; series.len()]; series.len()];
    for i in 0..series.len() {
        for j in (i + 1)..series.len() {
            let d = dist.distance(&series[i], &series[j])?;
            dmat[i][j] = d;
            dmat[j][i] = d;
        }
    }
    let mut scores = Vec::new();
    for k in lo..=hi {
        let part = cluster_series(series, k, max_iter, dist)?;
        let score = match silhouette_from_matrix(&dmat, &part) {
            Ok(s) => s,
            Err(MetricsError::SingleCluster) => 0.0,
            Err(e) => return Err(e.into()),
        };
        scores.push((k, score));
    }
    Ok((argmax_k(&scores), scores))
}

/// Same selection loop for node features under K-means, scored by silhouette
/// with Euclidean distance in the standardized feature space.
pub fn choose_k_nodes(
    features: &[NodeFeatures],
    k_range: (usize, usize),
    restarts: usize,
    seed: u64,
) -> Result<(usize, Vec<(usize, f64)>), ClusterError> {
    let (lo, hi) = k_range;
    if lo > hi || lo < 2 || hi > features.len() {
        return Err(ClusterError::EmptyRange);
    }
    let points = standardize(features);
    let mut dmat = vec![vec![0.0; points.len()]; points.len()];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = DistanceKind::Euclidean.distance(&points[i], &points[j])?;
            dmat[i][j] = d;
            dmat[j][i] = d;
        }
    }
    let mut scores = Vec::new();
    for k in lo..=hi {
        let part = kmeans(features, k, restarts, seed)?;
        let score = match silhouette_from_matrix(&dmat, &part) {
            Ok(s) => s,
            Err(MetricsError::SingleCluster) => 0.0,
            Err(e) => return Err(e.into()),
        };
        scores.push((k, score));
    }
    Ok((argmax_k(&scores), scores))
}

fn argmax_k(scores: &[(usize, f64)]) -> usize {
    let mut best = scores[0];
    for &(k, s) in &scores[1..] {
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Most frequent canonical clustering pattern; ties go to the pattern held by
/// the highest-total-volume node.
pub fn vote_global_pattern(
    partitions: &[Partition],
    node_volumes: &[f64],
) -> Result<Partition, ClusterError> {
    if partitions.is_empty() {
        return Err(ClusterError::EmptyInput);
    }
    let item_count = partitions[0].len();
    for p in partitions {
        if p.len() != item_count {
            return Err(ClusterError::PartitionSizeMismatch(item_count, p.len()));
        }
    }
    assert_eq!(partitions.len(), node_volumes.len());

    // (count, max holder volume) per distinct pattern, insertion-ordered.
    let mut distinct: Vec<(&Partition, usize, f64)> = Vec::new();
    for (p, &vol) in partitions.iter().zip(node_volumes) {
        match distinct.iter_mut().find(|(q, _, _)| *q == p) {
            Some(entry) => {
                entry.1 += 1;
                entry.2 = entry.2.max(vol);
            }
            None => distinct.push((p, 1, vol)),
        }
    }
    let winner = distinct
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.2.partial_cmp(&b.2).unwrap()))
        .unwrap();
    Ok(winner.0.clone())
}

/// Node with the maximum total raw volume; ties to the lexicographically
/// smallest node id.
pub fn select_reference<'a>(cluster_members: impl IntoIterator<Item = &'a NodeDataset>) -> String {
    pick_by_volume(cluster_members, true)
}

/// Node with the minimum total raw volume; ties to the lexicographically
/// smallest node id. Used for the control-experiment transfer scheme.
pub fn select_lowest_volume<'a>(
    cluster_members: impl IntoIterator<Item = &'a NodeDataset>,
) -> String {
    pick_by_volume(cluster_members, false)
}

fn pick_by_volume<'a>(
    members: impl IntoIterator<Item = &'a NodeDataset>,
    highest: bool,
) -> String {
    let mut best: Option<(f64, &str)> = None;
    for ds in members {
        let vol = ds.total_volume();
        let better = match best {
            None => true,
            Some((bv, bid)) => {
                if (vol - bv).abs() == 0.0 {
                    ds.node_id() < bid
                } else if highest {
                    vol > bv
                } else {
                    vol < bv
                }
            }
        };
        if better {
            best = Some((vol, ds.node_id()));
        }
    }
    best.expect("non-empty cluster").1.to_string()
}
