//! Command-line front end for the forecasting pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use transmuse::clustering::select_reference;
use transmuse::data::write_csv;
use transmuse::pipeline::{
    cluster_nodes, cluster_services, load_data, run_pipeline, ClusterReport, DataSource,
    ExperimentConfig, TransferReport,
};
use transmuse::synth;
use transmuse::tmtpn::save_checkpoint;

#[derive(Parser)]
#[command(name = "transmuse", version, about = "Transferable multi-service traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic traffic from the config's [synth] table into a CSV.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load the configured data source and print a summary.
    Ingest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cluster edge nodes into cohorts and write the result as JSON.
    ClusterNodes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster services (all nodes as one pool) and write the result as JSON.
    ClusterServices {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all models the configured schemes need; write checkpoints and a
    /// manifest into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "models")]
        out_dir: PathBuf,
    },
    /// Full run: train, evaluate every scheme, write report.json/report.csv.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Full run, printing per-scheme mean errors without writing files.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize an existing report.json.
    Report {
        #[arg(long, value_name = "REPORT_JSON")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path) -> Result<Option<ExperimentConfig>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            eprintln!("error: config file not found: {}", path.display());
            return Ok(None);
        }
        Err(e) => return Err(e).context(format!("reading {}", path.display())),
    };
    let mut cfg = ExperimentConfig::from_toml(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    if let Ok(seed) = std::env::var("TRANSMUSE_SEED") {
        let seed: u64 = seed
            .parse()
            .context("TRANSMUSE_SEED must be an unsigned integer")?;
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

/// Write via a temp file in the same directory, then rename into place.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    const CONFIG_MISSING: u8 = 2;
    match cli.command {
        Command::Gen { config, out } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            let DataSource::Synth { synth } = &cfg.data else {
                bail!("gen requires a [synth] data source in the config");
            };
            let (datasets, _) = synth::generate(synth)?;
            write_csv(&datasets, &out)?;
            eprintln!(
                "wrote {} nodes x {} services x {} steps to {}",
                datasets.len(),
                datasets[0].num_services(),
                datasets[0].length(),
                out.display()
            );
        }
        Command::Ingest { config } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            let datasets = load_data(&cfg)?;
            println!("nodes: {}", datasets.len());
            println!("services: {}", datasets[0].num_services());
            println!("steps: {}", datasets[0].length());
            for ds in &datasets {
                println!("  {} total_volume_mb={:.3}", ds.node_id(), ds.total_volume());
            }
        }
        Command::ClusterNodes { config, out } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            let datasets = load_data(&cfg)?;
            let (part, scores) = cluster_nodes(&datasets, &cfg.clustering, cfg.seed)?;
            let references = (0..part.num_clusters())
                .map(|c| {
                    let members: Vec<_> =
                        part.members(c).iter().map(|&i| &datasets[i]).collect();
                    select_reference(members.into_iter())
                })
                .collect();
            let report = ClusterReport {
                k: part.num_clusters(),
                labels: part.labels().to_vec(),
                silhouette_by_k: scores,
                reference_nodes: references,
            };
            write_atomic(&out, format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes())?;
            eprintln!("wrote {}", out.display());
        }
        Command::ClusterServices { config, out } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            let datasets = load_data(&cfg)?;
            let refs: Vec<&_> = datasets.iter().collect();
            let ref_id = select_reference(refs.iter().copied());
            let ref_idx = datasets
                .iter()
                .position(|d| d.node_id() == ref_id)
                .expect("reference exists");
            let (pattern, scores) = cluster_services(&refs, ref_idx, &cfg.clustering)?;
            let report = ClusterReport {
                k: pattern.num_clusters(),
                labels: pattern.labels().to_vec(),
                silhouette_by_k: scores,
                reference_nodes: vec![ref_id],
            };
            write_atomic(&out, format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes())?;
            eprintln!("wrote {}", out.display());
        }
        Command::Train { config, out_dir } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            fs::create_dir_all(&out_dir)?;
            let started = Instant::now();
            let run = run_pipeline(&cfg)?;
            let mut manifest: Vec<BTreeMap<String, serde_json::Value>> = Vec::new();
            for (i, ((source, services), model)) in run.models.iter().enumerate() {
                let file = format!("model_{i:03}.tmse");
                save_checkpoint(model, &out_dir.join(&file))?;
                let mut entry = BTreeMap::new();
                entry.insert("file".to_string(), file.into());
                entry.insert("source_node".to_string(), source.as_str().into());
                entry.insert(
                    "services".to_string(),
                    services.iter().map(|&s| s as u64).collect::<Vec<_>>().into(),
                );
                manifest.push(entry);
            }
            write_atomic(
                &out_dir.join("manifest.json"),
                format!("{}\n", serde_json::to_string_pretty(&manifest)?).as_bytes(),
            )?;
            eprintln!(
                "trained {} models in {:.1}s -> {}",
                run.models.len(),
                started.elapsed().as_secs_f64(),
                out_dir.display()
            );
        }
        Command::Transfer { config, out_dir } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            fs::create_dir_all(&out_dir)?;
            let started = Instant::now();
            let run = run_pipeline(&cfg)?;
            write_atomic(&out_dir.join("report.json"), run.report.to_json()?.as_bytes())?;
            write_atomic(&out_dir.join("report.csv"), run.report.to_csv().as_bytes())?;
            eprintln!(
                "transfer evaluation finished in {:.1}s -> {}",
                started.elapsed().as_secs_f64(),
                out_dir.display()
            );
        }
        Command::Eval { config } => {
            let Some(cfg) = load_config(&config)? else {
                return Ok(ExitCode::from(CONFIG_MISSING));
            };
            let run = run_pipeline(&cfg)?;
            print_summary(&run.report);
        }
        Command::Report { input } => {
            let text = fs::read_to_string(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let report: TransferReport = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", input.display()))?;
            print_summary(&report);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_summary(report: &TransferReport) {
    println!("seed: {}", report.seed);
    println!(
        "cohorts: {} over {} nodes",
        report.node_clusters.k,
        report.node_ids.len()
    );
    println!("scheme         mean_mae      mean_rmse");
    for (name, rep) in &report.schemes {
        println!("{name:<12} {:>12.6} {:>12.6}", rep.mean_mae, rep.mean_rmse);
    }
}
