//! Ingestion, normalization, splitting, and windowing of multi-service
//! traffic time series.
//!
//! CSV schema (UTF-8, header row): `timestamp,node_id,service_id,volume_mb`
//! with a 0-based integer minute index, contiguous service ids, and
//! non-negative decimal volumes. Rows may appear in any order; missing
//! (node, service, timestamp) cells are filled with 0.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::mat::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("validation error at line {line}: {msg}")]
    InvalidRow { line: u64, msg: String },
    #[error("series must be non-empty with finite, non-negative values")]
    InvalidSeries,
    #[error("dataset series are inconsistent: {0}")]
    InconsistentDataset(String),
    #[error("normalization stats missing service {0}")]
    StatsMissingService(usize),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("split produces an empty segment (length {length}, fractions {fractions:?})")]
    EmptySegment {
        length: usize,
        fractions: (f64, f64, f64),
    },
    #[error("dataset too short to window: length {length} < T+F = {needed}")]
    TooShort { length: usize, needed: usize },
    #[error("invalid window parameters: T, F and stride must be >= 1")]
    BadWindowParams,
}

/// One service's traffic volume sequence at one node (MB per time step).
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceSeries {
    service_id: usize,
    values: Vec<f64>,
}

impl ServiceSeries {
    pub fn new(service_id: usize, values: Vec<f64>) -> Result<Self, DataError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::InvalidSeries);
        }
        Ok(Self { service_id, values })
    }

    pub fn service_id(&self) -> usize {
        self.service_id
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Aligned collection of per-service series for one edge node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDataset {
    node_id: String,
    series: Vec<ServiceSeries>,
    length: usize,
}

impl NodeDataset {
    pub fn new(node_id: impl Into<String>, series: Vec<ServiceSeries>) -> Result<Self, DataError> {
        if series.is_empty() {
            return Err(DataError::InconsistentDataset("no series".into()));
        }
        let length = series[0].len();
        for (k, s) in series.iter().enumerate() {
            if s.len() != length {
                return Err(DataError::InconsistentDataset(format!(
                    "series {k} has length {} != {length}",
                    s.len()
                )));
            }
            if s.service_id() != k {
                return Err(DataError::InconsistentDataset(format!(
                    "service ids must be contiguous 0..K-1, found {} at position {k}",
                    s.service_id()
                )));
            }
        }
        Ok(Self {
            node_id: node_id.into(),
            series,
            length,
        })
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn series(&self) -> &[ServiceSeries] {
        &self.series
    }

    pub fn num_services(&self) -> usize {
        self.series.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn value(&self, service: usize, t: usize) -> f64 {
        self.series[service].values()[t]
    }

    /// Total raw volume over all services and time steps.
    pub fn total_volume(&self) -> f64 {
        self.series
            .iter()
            .map(|s| s.values().iter().sum::<f64>())
            .sum()
    }
}

/// Per-service (min, max) pairs of raw volume, derived from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    ranges: Vec<(f64, f64)>,
}

impl NormStats {
    pub fn new(ranges: Vec<(f64, f64)>) -> Self {
        assert!(ranges.iter().all(|(lo, hi)| lo <= hi), "min must be <= max");
        Self { ranges }
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn num_services(&self) -> usize {
        self.ranges.len()
    }
}

/// One supervised forecasting sample: `T` input steps followed by `F` target
/// steps, both over all `K` services.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: Matrix,
    pub target: Matrix,
    pub origin_index: usize,
}

/// Load the CSV schema into one `NodeDataset` per distinct node, aligned on
/// the global timestamp range and service id range. Nodes come back sorted by
/// node id. Duplicate (node, service, timestamp) cells are rejected.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<NodeDataset>, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| DataError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;

    let mut cells: BTreeMap<String, BTreeMap<(usize, u64), f64>> = BTreeMap::new();
    let mut max_ts = 0u64;
    let mut max_service = 0usize;
    let mut seen_any = false;

    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            return Err(DataError::Parse {
                line,
                msg: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let ts: u64 = parse_field(&record[0], "timestamp", line)?;
        let node = record[1].to_string();
        let service: usize = parse_field(&record[2], "service_id", line)?;
        let volume: f64 = parse_field(&record[3], "volume_mb", line)?;
        if !volume.is_finite() || volume < 0.0 {
            return Err(DataError::InvalidRow {
                line,
                msg: format!("volume_mb must be finite and non-negative, got {volume}"),
            });
        }
        max_ts = max_ts.max(ts);
        max_service = max_service.max(service);
        seen_any = true;
        if cells
            .entry(node.clone())
            .or_default()
            .insert((service, ts), volume)
            .is_some()
        {
            return Err(DataError::InvalidRow {
                line,
                msg: format!("duplicate cell for node {node}, service {service}, timestamp {ts}"),
            });
        }
    }

    if !seen_any {
        return Err(DataError::InconsistentDataset("csv contains no rows".into()));
    }

    let length = (max_ts + 1) as usize;
    let num_services = max_service + 1;
    let mut out = Vec::with_capacity(cells.len());
    for (node_id, node_cells) in cells {
        let mut series = Vec::with_capacity(num_services);
        for k in 0..num_services {
            let values: Vec<f64> = (0..length)
                .map(|t| node_cells.get(&(k, t as u64)).copied().unwrap_or(0.0))
                .collect();
            series.push(ServiceSeries::new(k, values)?);
        }
        out.push(NodeDataset::new(node_id, series)?);
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, line: u64) -> Result<T, DataError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e| DataError::Parse {
        line,
        msg: format!("bad {name} {raw:?}: {e}"),
    })
}

/// Write datasets back out in the CSV schema (used by the `gen` subcommand).
pub fn write_csv(datasets: &[NodeDataset], path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "timestamp,node_id,service_id,volume_mb")?;
    for ds in datasets {
        for s in ds.series() {
            for (t, v) in s.values().iter().enumerate() {
                writeln!(f, "{t},{},{},{v}", ds.node_id(), s.service_id())?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Map every value of service `k` to `(v - min_k) / (max_k - min_k)`.
///
/// Without `stats` the per-service ranges are computed from `dataset` itself.
/// With external `stats` (the training split's), outputs are clamped to
/// [0, 1]. A degenerate `min == max` service maps to all zeros.
pub fn normalize(
    dataset: &NodeDataset,
    stats: Option<&NormStats>,
) -> Result<(NodeDataset, NormStats), DataError> {
    let external = stats.is_some();
    let stats = match stats {
        Some(s) => {
            if s.num_services() < dataset.num_services() {
                return Err(DataError::StatsMissingService(s.num_services()));
            }
            s.clone()
        }
        None => {
            let ranges = dataset
                .series()
                .iter()
                .map(|s| {
                    let lo = s.values().iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = s.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi)
                })
                .collect();
            NormStats::new(ranges)
        }
    };
    let series = dataset
        .series()
        .iter()
        .map(|s| {
            let (lo, hi) = stats.ranges()[s.service_id()];
            let span = hi - lo;
            let values = s
                .values()
                .iter()
                .map(|&v| {
                    if span == 0.0 {
                        0.0
                    } else {
                        let x = (v - lo) / span;
                        if external {
                            x.clamp(0.0, 1.0)
                        } else {
                            x
                        }
                    }
                })
                .collect();
            ServiceSeries::new(s.service_id(), values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let normalized = NodeDataset::new(dataset.node_id(), series)?;
    Ok((normalized, stats))
}

/// Inverse of [`normalize`] on in-range values: `v * (max_k - min_k) + min_k`.
pub fn denormalize_dataset(
    dataset: &NodeDataset,
    stats: &NormStats,
) -> Result<NodeDataset, DataError> {
    if stats.num_services() < dataset.num_services() {
        return Err(DataError::StatsMissingService(stats.num_services()));
    }
    let series = dataset
        .series()
        .iter()
        .map(|s| {
            let (lo, hi) = stats.ranges()[s.service_id()];
            let values = s.values().iter().map(|&v| v * (hi - lo) + lo).collect();
            ServiceSeries::new(s.service_id(), values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    NodeDataset::new(dataset.node_id(), series)
}

/// Denormalize a time-by-service matrix whose columns are the listed
/// services.
pub fn denormalize_matrix(
    m: &Matrix,
    services: &[usize],
    stats: &NormStats,
) -> Result<Matrix, DataError> {
    assert_eq!(m.cols(), services.len());
    let mut out = m.clone();
    for (j, &k) in services.iter().enumerate() {
        let (lo, hi) = *stats
            .ranges()
            .get(k)
            .ok_or(DataError::StatsMissingService(k))?;
        for i in 0..out.rows() {
            out[(i, j)] = out[(i, j)] * (hi - lo) + lo;
        }
    }
    Ok(out)
}

/// Contiguous chronological split: train gets `floor(L * f_train)` steps, val
/// the next `floor(L * f_val)`, test the remainder.
pub fn split(
    dataset: &NodeDataset,
    fractions: (f64, f64, f64),
) -> Result<(NodeDataset, NodeDataset, NodeDataset), DataError> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
        return Err(DataError::InvalidFractions(format!(
            "fractions must be positive, got {fractions:?}"
        )));
    }
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(format!(
            "fractions must sum to 1, got {fractions:?}"
        )));
    }
    let length = dataset.length();
    let n_train = (length as f64 * ft).floor() as usize;
    let n_val = (length as f64 * fv).floor() as usize;
    let n_test = length - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DataError::EmptySegment { length, fractions });
    }
    let slice = |from: usize, to: usize| -> Result<NodeDataset, DataError> {
        let series = dataset
            .series()
            .iter()
            .map(|s| ServiceSeries::new(s.service_id(), s.values()[from..to].to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        NodeDataset::new(dataset.node_id(), series)
    };
    Ok((
        slice(0, n_train)?,
        slice(n_train, n_train + n_val)?,
        slice(n_train + n_val, length)?,
    ))
}

/// Sliding windows at origins `0, stride, 2*stride, ...` while
/// `origin + T + F <= length`.
pub fn window(
    dataset: &NodeDataset,
    t: usize,
    f: usize,
    stride: usize,
) -> Result<Vec<WindowSample>, DataError> {
    if t < 1 || f < 1 || stride < 1 {
        return Err(DataError::BadWindowParams);
    }
    let length = dataset.length();
    if length < t + f {
        return Err(DataError::TooShort {
            length,
            needed: t + f,
        });
    }
    let k = dataset.num_services();
    let mut samples = Vec::new();
    let mut origin = 0;
    while origin + t + f <= length {
        let mut input = Matrix::zeros(t, k);
        let mut target = Matrix::zeros(f, k);
        for s in 0..k {
            for i in 0..t {
                input[(i, s)] = dataset.value(s, origin + i);
            }
            for i in 0..f {
                target[(i, s)] = dataset.value(s, origin + t + i);
            }
        }
        samples.push(WindowSample {
            input,
            target,
            origin_index: origin,
        });
        origin += stride;
    }
    Ok(samples)
}
