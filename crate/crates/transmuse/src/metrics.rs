//! Distance kernels, forecast error metrics, and silhouette scoring.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::Partition;
use crate::mat::Matrix;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input sequence")]
    EmptyInput,
    #[error("unsupported wasserstein order p={0}, need p >= 1")]
    BadOrder(u32),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("cosine distance undefined for a zero vector")]
    ZeroVector,
    #[error("silhouette requires at least two clusters")]
    SingleCluster,
    #[error("non-finite value in input")]
    NonFinite,
}

/// How two series are compared as distributions for the Wasserstein kernel.
///
/// `ValueDistribution` treats a series as the empirical distribution of its
/// magnitudes and ignores time order. `TemporalMass` places mass
/// `x_t / sum(x)` at coordinate `t` with ground metric `|t - t'|`, so the
/// temporal shape of the series matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WassersteinMode {
    #[default]
    ValueDistribution,
    TemporalMass,
}

/// Distance kernel selector shared by the clustering routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DistanceKind {
    Wasserstein { p: u32, mode: WassersteinMode },
    Euclidean,
    Cosine,
}

impl Default for DistanceKind {
    fn default() -> Self {
        DistanceKind::Wasserstein {
            p: 1,
            mode: WassersteinMode::ValueDistribution,
        }
    }
}

impl DistanceKind {
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
        match *self {
            DistanceKind::Wasserstein { p, mode } => match mode {
                WassersteinMode::ValueDistribution => wasserstein_1d(x, y, p),
                WassersteinMode::TemporalMass => wasserstein_temporal(x, y, p),
            },
            DistanceKind::Euclidean => euclidean_dist(x, y),
            DistanceKind::Cosine => cosine_dist(x, y),
        }
    }
}

/// 1-D Wasserstein distance between two value sequences viewed as empirical
/// distributions with uniform weights.
///
/// Equal lengths use the closed form over ascending-sorted values:
/// `((1/n) * sum |x_(i) - y_(i)|^p)^(1/p)`. Unequal lengths integrate the
/// quantile functions on a common grid of `n_x * n_y` intervals.
pub fn wasserstein_1d(x: &[f64], y: &[f64], p: u32) -> Result<f64, MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if p < 1 {
        return Err(MetricsError::BadOrder(p));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let pf = p as f64;
    if xs.len() == ys.len() {
        let n = xs.len() as f64;
        let sum: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(a, b)| (a - b).abs().powf(pf))
            .sum();
        return Ok((sum / n).powf(1.0 / pf));
    }

    let (nx, ny) = (xs.len(), ys.len());
    let grid = nx * ny;
    let mut sum = 0.0;
    for t in 0..grid {
        let u = (t as f64 + 0.5) / grid as f64;
        let qx = xs[((u * nx as f64) as usize).min(nx - 1)];
        let qy = ys[((u * ny as f64) as usize).min(ny - 1)];
        sum += (qx - qy).abs().powf(pf);
    }
    Ok((sum / grid as f64).powf(1.0 / pf))
}

/// Wasserstein distance in temporal-mass mode: mass `x_t / sum(x)` sits at
/// coordinate `t`, ground metric `|t - t'|`. An all-zero series is treated as
/// uniform mass over its support.
pub fn wasserstein_temporal(x: &[f64], y: &[f64], p: u32) -> Result<f64, MetricsError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if p < 1 {
        return Err(MetricsError::BadOrder(p));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let wx = normalized_mass(x);
    let wy = normalized_mass(y);
    let cx: Vec<f64> = (0..x.len()).map(|t| t as f64).collect();
    let cy: Vec<f64> = (0..y.len()).map(|t| t as f64).collect();
    Ok(wasserstein_discrete(&cx, &wx, &cy, &wy, p as f64))
}

fn normalized_mass(x: &[f64]) -> Vec<f64> {
    let total: f64 = x.iter().sum();
    if total > 0.0 {
        x.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / x.len() as f64; x.len()]
    }
}

/// W_p between two weighted discrete distributions on sorted supports, via
/// quantile-function integration over the merged CDF breakpoints.
fn wasserstein_discrete(xv: &[f64], xw: &[f64], yv: &[f64], yw: &[f64], p: f64) -> f64 {
    let (mut i, mut j) = (0usize, 0usize);
    let (mut cx, mut cy) = (xw[0], yw[0]);
    let mut prev_u = 0.0;
    let mut total = 0.0;
    loop {
        let next_u = cx.min(cy).min(1.0);
        let du = next_u - prev_u;
        if du > 0.0 {
            total += du * (xv[i] - yv[j]).abs().powf(p);
        }
        prev_u = next_u;
        if prev_u >= 1.0 - 1e-12 {
            break;
        }
        if cx <= cy {
            i += 1;
            cx += xw[i.min(xw.len() - 1)];
        } else {
            j += 1;
            cy += yw[j.min(yw.len() - 1)];
        }
        if i >= xv.len() || j >= yv.len() {
            break;
        }
    }
    total.powf(1.0 / p)
}

pub fn euclidean_dist(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

pub fn cosine_dist(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nx * ny))
}

/// Mean absolute error over an F x S forecast matrix pair.
pub fn mae(truth: &Matrix, pred: &Matrix) -> Result<f64, MetricsError> {
    check_shapes(truth, pred)?;
    let n = (truth.rows() * truth.cols()) as f64;
    Ok(truth
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// Root mean square error over an F x S forecast matrix pair.
pub fn rmse(truth: &Matrix, pred: &Matrix) -> Result<f64, MetricsError> {
    check_shapes(truth, pred)?;
    let n = (truth.rows() * truth.cols()) as f64;
    Ok((truth
        .data()
        .iter()
        .zip(pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
        .sqrt())
}

fn check_shapes(a: &Matrix, b: &Matrix) -> Result<(), MetricsError> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(MetricsError::ShapeMismatch(
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
        ));
    }
    Ok(())
}

/// Silhouette score for `items` under `labels`, using `dist` for pairwise
/// distances. Singleton-cluster items contribute 0, as do items where both
/// the intra- and nearest-cluster mean distances are 0.
pub fn silhouette(
    items: &[Vec<f64>],
    labels: &Partition,
    dist: &DistanceKind,
) -> Result<f64, MetricsError> {
    let n = items.len();
    assert_eq!(n, labels.len(), "labels must cover every item");
    let mut dmat = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist.distance(&items[i], &items[j])?;
            dmat[i][j] = d;
            dmat[j][i] = d;
        }
    }
    silhouette_from_matrix(&dmat, labels)
}

/// Silhouette score from a precomputed symmetric distance matrix.
pub fn silhouette_from_matrix(
    dmat: &[Vec<f64>],
    labels: &Partition,
) -> Result<f64, MetricsError> {
    let n = dmat.len();
    let k = labels.num_clusters();
    if k < 2 {
        return Err(MetricsError::SingleCluster);
    }
    let mut cluster_sizes = vec![0usize; k];
    for &l in labels.labels() {
        cluster_sizes[l] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let li = labels.labels()[i];
        if cluster_sizes[li] == 1 {
            continue; // contributes 0
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels.labels()[j]] += dmat[i][j];
            }
        }
        let a = sums[li] / (cluster_sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li && cluster_sizes[c] > 0)
            .map(|c| sums[c] / cluster_sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}
