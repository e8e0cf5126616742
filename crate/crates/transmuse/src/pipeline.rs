//! End-to-end experiment orchestration.
//!
//! A run flows through five stages: data acquisition (CSV or the synthetic
//! generator), per-node preprocessing (split, normalize, window), node
//! clustering into cohorts, per-cohort service clustering with
//! global-pattern voting, and model training plus transfer evaluation under
//! the configured schemes. All randomness derives from the experiment seed;
//! two runs of the same config produce identical reports.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    self, choose_k_nodes, choose_k_series, cluster_series, node_features, vote_global_pattern,
    ClusterError, Partition,
};
use crate::data::{
    self, denormalize_matrix, normalize, split, window, DataError, NodeDataset, NormStats,
    WindowSample,
};
use crate::metrics::DistanceKind;
use crate::synth::{GenConfig, SynthError};
use crate::tmtpn::{self, ModelError, TmtpnConfig, TmtpnModel};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Where the raw traffic comes from: a CSV file on disk or the built-in
/// generator. In TOML, exactly one of `csv = "path"` or a `[synth]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Csv { csv: PathBuf },
    Synth { synth: GenConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Windowing {
    pub input_len: usize,
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    /// Inclusive candidate range for the service cluster count.
    #[serde(default = "default_service_k")]
    pub service_k: (usize, usize),
    /// Inclusive candidate range for the node cluster count.
    #[serde(default = "default_node_k")]
    pub node_k: (usize, usize),
    #[serde(default = "default_wkmeans_max_iter")]
    pub wkmeans_max_iter: usize,
    #[serde(default = "default_kmeans_restarts")]
    pub kmeans_restarts: usize,
}

fn default_service_k() -> (usize, usize) {
    (2, 5)
}

fn default_node_k() -> (usize, usize) {
    (2, 4)
}

fn default_wkmeans_max_iter() -> usize {
    50
}

fn default_kmeans_restarts() -> usize {
    8
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            service_k: default_service_k(),
            node_k: default_node_k(),
            wkmeans_max_iter: default_wkmeans_max_iter(),
            kmeans_restarts: default_kmeans_restarts(),
        }
    }
}

/// Forecaster hyperparameters shared by every trained model; window shape
/// and service count are filled in per model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    pub d_model: usize,
    pub num_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            d_model: 32,
            num_heads: 4,
            enc_layers: 1,
            dec_layers: 1,
            d_ffn: 64,
            dropout: 0.1,
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 10,
        }
    }
}

/// How forecasting models are placed on nodes for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Every node trains and evaluates its own models.
    Original,
    /// Each cohort's highest-volume reference node trains the models; all
    /// cohort members evaluate them.
    Transmuse,
    /// Control: models come from each cohort's lowest-volume node instead.
    CtrlExp,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Original => "original",
            Scheme::Transmuse => "transmuse",
            Scheme::CtrlExp => "ctrl_exp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub data: DataSource,
    pub windowing: Windowing,
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub model: ModelHyper,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
}

fn default_split() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::Original, Scheme::Transmuse, Scheme::CtrlExp]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

/// Clustering result in the on-disk JSON schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub labels: Vec<usize>,
    pub silhouette_by_k: Vec<(usize, f64)>,
    pub reference_nodes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeReport {
    /// Model source node per cohort (cohort index as string). Empty for the
    /// `original` scheme, where every node is its own source.
    pub sources: BTreeMap<String, String>,
    pub per_node: BTreeMap<String, NodeMetrics>,
    pub mean_mae: f64,
    pub mean_rmse: f64,
}

/// Transfer-evaluation report. Stage timings are recorded in memory but
/// never serialized, so two runs of the same config produce byte-identical
/// JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub seed: u64,
    pub node_ids: Vec<String>,
    pub node_clusters: ClusterReport,
    /// Per-cohort lowest-volume node, parallel to
    /// `node_clusters.reference_nodes`.
    pub control_nodes: Vec<String>,
    /// Globally voted service grouping, shared by every node.
    pub service_clusters: ClusterReport,
    pub schemes: BTreeMap<String, SchemeReport>,
    /// Wall-clock seconds per pipeline stage; excluded from serialization.
    #[serde(skip)]
    pub stage_seconds: BTreeMap<String, f64>,
}

impl TransferReport {
    pub fn to_json(&self) -> Result<String, PipelineError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Flat CSV companion: one row per (scheme, node).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scheme,node_id,mae,rmse\n");
        for (scheme, rep) in &self.schemes {
            for (node, m) in &rep.per_node {
                out.push_str(&format!("{scheme},{node},{},{}\n", m.mae, m.rmse));
            }
        }
        out
    }
}

/// Everything a full run produces, including the trained models so callers
/// can persist them.
#[derive(Debug)]
pub struct PipelineRun {
    pub report: TransferReport,
    /// (source node id, service group) -> trained model.
    pub models: BTreeMap<(String, Vec<usize>), TmtpnModel>,
}

struct NodePrepared {
    node_id: String,
    /// Per-service raw values of the training split, for service clustering.
    train_raw: NodeDataset,
    stats: NormStats,
    train_windows: Vec<WindowSample>,
    val_windows: Vec<WindowSample>,
    /// Normalized test inputs paired with raw-volume targets.
    test_windows: Vec<WindowSample>,
    test_raw_windows: Vec<WindowSample>,
}

/// Stage 1: acquire the per-node datasets, sorted by node id.
pub fn load_data(config: &ExperimentConfig) -> Result<Vec<NodeDataset>, PipelineError> {
    let mut datasets = match &config.data {
        DataSource::Csv { csv } => data::load_csv(csv)?,
        DataSource::Synth { synth } => crate::synth::generate(synth)?.0,
    };
    datasets.sort_by(|a, b| a.node_id().cmp(b.node_id()));
    Ok(datasets)
}

fn prepare(config: &ExperimentConfig, datasets: &[NodeDataset]) -> Result<Vec<NodePrepared>, PipelineError> {
    let w = config.windowing;
    if w.input_len == 0 || w.horizon == 0 || w.stride == 0 {
        return Err(PipelineError::Config(
            "windowing fields must be at least 1".into(),
        ));
    }
    let mut out = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let (train, val, test) = split(ds, config.split)?;
        let (train_n, stats) = normalize(&train, None)?;
        let (val_n, _) = normalize(&val, Some(&stats))?;
        let (test_n, _) = normalize(&test, Some(&stats))?;
        out.push(NodePrepared {
            node_id: ds.node_id().to_string(),
            train_raw: train,
            train_windows: window(&train_n, w.input_len, w.horizon, w.stride)?,
            val_windows: window(&val_n, w.input_len, w.horizon, w.stride)?,
            test_windows: window(&test_n, w.input_len, w.horizon, w.stride)?,
            test_raw_windows: window(&test, w.input_len, w.horizon, w.stride)?,
            stats,
        });
    }
    Ok(out)
}

/// Stage 3: cohort assignment via silhouette-selected K-means on per-node
/// statistical features. Fewer than two nodes, or an infeasible k range,
/// collapses to a single cohort.
pub fn cluster_nodes(
    datasets: &[NodeDataset],
    clustering: &ClusteringConfig,
    seed: u64,
) -> Result<(Partition, Vec<(usize, f64)>), PipelineError> {
    let n = datasets.len();
    if n == 0 {
        return Err(PipelineError::Config("no nodes in dataset".into()));
    }
    let lo = clustering.node_k.0.max(2);
    let hi = clustering.node_k.1.min(n);
    if n < 2 || lo > hi {
        return Ok((Partition::new(vec![0; n]), Vec::new()));
    }
    let features: Vec<_> = datasets.iter().map(node_features).collect();
    let (k, scores) = choose_k_nodes(&features, (lo, hi), clustering.kmeans_restarts, seed)?;
    let part = clustering::kmeans(&features, k, clustering.kmeans_restarts, seed)?;
    Ok((part, scores))
}

/// Stage 4 for one cohort: pick the service cluster count on the reference
/// node by silhouette, cluster every member's training series at that count,
/// and vote for the cohort-wide pattern (ties to the highest-volume holder).
pub fn cluster_services(
    members: &[&NodeDataset],
    reference_idx: usize,
    clustering: &ClusteringConfig,
) -> Result<(Partition, Vec<(usize, f64)>), PipelineError> {
    let num_services = members[reference_idx].num_services();
    let lo = clustering.service_k.0.max(2);
    let hi = clustering.service_k.1.min(num_services);
    if num_services < 2 || lo > hi {
        return Ok((Partition::new(vec![0; num_services]), Vec::new()));
    }
    let dist = DistanceKind::default();
    let series_of = |ds: &NodeDataset| -> Vec<Vec<f64>> {
        ds.series().iter().map(|s| s.values().to_vec()).collect()
    };
    let ref_series = series_of(members[reference_idx]);
    let (k, scores) = choose_k_series(&ref_series, (lo, hi), &dist, clustering.wkmeans_max_iter)?;
    let mut parts = Vec::with_capacity(members.len());
    let mut volumes = Vec::with_capacity(members.len());
    for ds in members {
        parts.push(cluster_series(
            &series_of(ds),
            k,
            clustering.wkmeans_max_iter,
            &dist,
        )?);
        volumes.push(ds.total_volume());
    }
    let pattern = vote_global_pattern(&parts, &volumes)?;
    Ok((pattern, scores))
}

fn restrict(samples: &[WindowSample], services: &[usize]) -> Vec<WindowSample> {
    samples
        .iter()
        .map(|s| WindowSample {
            input: s.input.select_cols(services),
            target: s.target.select_cols(services),
            origin_index: s.origin_index,
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn train_model(
    config: &ExperimentConfig,
    node: &NodePrepared,
    services: &[usize],
) -> Result<TmtpnModel, PipelineError> {
    let h = config.model;
    let model_cfg = TmtpnConfig {
        d_model: h.d_model,
        num_heads: h.num_heads,
        enc_layers: h.enc_layers,
        dec_layers: h.dec_layers,
        d_ffn: h.d_ffn,
        dropout: h.dropout,
        input_len: config.windowing.input_len,
        horizon: config.windowing.horizon,
        num_services: services.len(),
        lr: h.lr,
        batch_size: h.batch_size,
        max_epochs: h.max_epochs,
        seed: config
            .seed
            .wrapping_add(fnv1a(node.node_id.as_bytes()))
            .wrapping_add(fnv1a(&services.iter().flat_map(|s| s.to_le_bytes()).collect::<Vec<_>>())),
    };
    let model = TmtpnModel::new(model_cfg)?;
    let train = restrict(&node.train_windows, services);
    let val = restrict(&node.val_windows, services);
    let (trained, _log) = tmtpn::train(&model, &train, &val)?;
    Ok(trained)
}

/// Stage 5: run the full pipeline and evaluate every configured scheme.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineRun, PipelineError> {
    let mut stage_seconds = BTreeMap::new();
    let mut clock = std::time::Instant::now();
    let mut lap = |stage_seconds: &mut BTreeMap<String, f64>, name: &str| {
        stage_seconds.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = std::time::Instant::now();
    };

    let datasets = load_data(config)?;
    let prepared = prepare(config, &datasets)?;
    let node_ids: Vec<String> = prepared.iter().map(|p| p.node_id.clone()).collect();
    lap(&mut stage_seconds, "data");

    let (cohorts, node_scores) = cluster_nodes(&datasets, &config.clustering, config.seed)?;
    let num_cohorts = cohorts.num_clusters();

    // Per-cohort reference (highest volume) and control source (lowest
    // volume).
    let mut references = Vec::with_capacity(num_cohorts);
    let mut controls = Vec::with_capacity(num_cohorts);
    for c in 0..num_cohorts {
        let member_idx = cohorts.members(c);
        let members: Vec<&NodeDataset> = member_idx.iter().map(|&i| &prepared[i].train_raw).collect();
        references.push(clustering::select_reference(members.iter().copied()));
        controls.push(clustering::select_lowest_volume(members.iter().copied()));
    }
    lap(&mut stage_seconds, "node_clustering");

    // One global service pattern: the cluster count is selected by silhouette
    // on the highest-volume reference node, every node is clustered at that
    // count, and the most common pattern wins (ties to the highest-volume
    // holder).
    let all_train: Vec<&NodeDataset> = prepared.iter().map(|p| &p.train_raw).collect();
    let global_ref = clustering::select_reference(
        references
            .iter()
            .map(|r| &prepared[index_of_id(&prepared, r)].train_raw),
    );
    let global_ref_idx = index_of_id(&prepared, &global_ref);
    let (pattern, service_scores) = cluster_services(&all_train, global_ref_idx, &config.clustering)?;
    let service_cluster_report = ClusterReport {
        k: pattern.num_clusters(),
        labels: pattern.labels().to_vec(),
        silhouette_by_k: service_scores,
        reference_nodes: vec![global_ref],
    };
    lap(&mut stage_seconds, "service_clustering");

    let node_cluster_report = ClusterReport {
        k: num_cohorts,
        labels: cohorts.labels().to_vec(),
        silhouette_by_k: node_scores,
        reference_nodes: references.clone(),
    };

    // Train models lazily per (source node, service group).
    let mut models: BTreeMap<(String, Vec<usize>), TmtpnModel> = BTreeMap::new();
    let get_model = |models: &mut BTreeMap<(String, Vec<usize>), TmtpnModel>,
                         source: &str,
                         services: &[usize]|
     -> Result<(), PipelineError> {
        let key = (source.to_string(), services.to_vec());
        if !models.contains_key(&key) {
            let model = train_model(config, &prepared[index_of_id(&prepared, source)], services)?;
            models.insert(key, model);
        }
        Ok(())
    };

    let mut schemes = BTreeMap::new();
    for scheme in &config.schemes {
        let mut sources = BTreeMap::new();
        let mut per_node = BTreeMap::new();
        for node_idx in 0..prepared.len() {
            let node = &prepared[node_idx];
            let cohort = cohorts.labels()[node_idx];
            let source: &str = match scheme {
                Scheme::Original => &node.node_id,
                Scheme::Transmuse => &references[cohort],
                Scheme::CtrlExp => &controls[cohort],
            };
            let mut abs_sum = 0.0;
            let mut sq_sum = 0.0;
            let mut count = 0usize;
            for g in 0..pattern.num_clusters() {
                let services = pattern.members(g);
                get_model(&mut models, source, &services)?;
                let model = &models[&(source.to_string(), services.clone())];
                let inputs = restrict(&node.test_windows, &services);
                let truths = restrict(&node.test_raw_windows, &services);
                for (inp, truth) in inputs.iter().zip(&truths) {
                    let pred_n = tmtpn::forecast(model, &inp.input)?;
                    let pred = denormalize_matrix(&pred_n, &services, &node.stats)?;
                    for (p, t) in pred.data().iter().zip(truth.target.data()) {
                        let e = p - t;
                        abs_sum += e.abs();
                        sq_sum += e * e;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                return Err(PipelineError::Config(
                    "test split yields no evaluation windows".into(),
                ));
            }
            per_node.insert(
                node.node_id.clone(),
                NodeMetrics {
                    mae: abs_sum / count as f64,
                    rmse: (sq_sum / count as f64).sqrt(),
                },
            );
        }
        for (c, (r, ctl)) in references.iter().zip(&controls).enumerate() {
            let src = match scheme {
                Scheme::Original => continue,
                Scheme::Transmuse => r.clone(),
                Scheme::CtrlExp => ctl.clone(),
            };
            sources.insert(c.to_string(), src);
        }
        let n = per_node.len() as f64;
        let mean_mae = per_node.values().map(|m| m.mae).sum::<f64>() / n;
        let mean_rmse = per_node.values().map(|m| m.rmse).sum::<f64>() / n;
        schemes.insert(
            scheme.name().to_string(),
            SchemeReport {
                sources,
                per_node,
                mean_mae,
                mean_rmse,
            },
        );
    }

    lap(&mut stage_seconds, "train_and_evaluate");

    Ok(PipelineRun {
        report: TransferReport {
            seed: config.seed,
            node_ids,
            node_clusters: node_cluster_report,
            control_nodes: controls,
            service_clusters: service_cluster_report,
            schemes,
            stage_seconds,
        },
        models,
    })
}

fn index_of_id(prepared: &[NodePrepared], id: &str) -> usize {
    prepared
        .iter()
        .position(|p| p.node_id == id)
        .expect("known node id")
}
