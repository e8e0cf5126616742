//! End-to-end acceptance gate. Each test checks one release criterion and
//! prints a single PASS/FAIL line (visible with `--nocapture`).

use itertools::Itertools;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use transmuse::clustering::{
    adjusted_rand_index, choose_k_nodes, kmeans, node_features, wd_medoid, wkmeans,
};
use transmuse::data::{normalize, split, window, NodeDataset, WindowSample};
use transmuse::mat::Matrix;
use transmuse::metrics::wasserstein_1d;
use transmuse::pipeline::{
    run_pipeline, ClusteringConfig, DataSource, ExperimentConfig, ModelHyper, Scheme, Windowing,
};
use transmuse::synth::{generate, GenConfig, ServiceProfile};
use transmuse::tmtpn::{
    self, forecast, forward_train, load_checkpoint, persistence_baseline, save_checkpoint,
    TmtpnConfig, TmtpnModel,
};

fn verdict(name: &str, ok: bool, detail: &str) {
    if ok {
        println!("acceptance {name}: PASS ({detail})");
    } else {
        println!("acceptance {name}: FAIL — {detail}");
        panic!("acceptance {name} failed: {detail}");
    }
}

// -------------------------------------------------------------------------
// 1. Sorted-formula Wasserstein equals brute-force minimization over all
//    couplings for short sequences.

fn brute_force_wasserstein(x: &[f64], y: &[f64], p: u32) -> f64 {
    let n = x.len();
    (0..n)
        .permutations(n)
        .map(|perm| {
            let sum: f64 = perm
                .iter()
                .enumerate()
                .map(|(i, &j)| (x[i] - y[j]).abs().powi(p as i32))
                .sum();
            (sum / n as f64).powf(1.0 / p as f64)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn wasserstein_matches_bruteforce_oracle() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for pair in 0..200 {
        let n = rng.gen_range(1..=6);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = if pair % 2 == 0 { 1 } else { 2 };
        let fast = wasserstein_1d(&x, &y, p).unwrap();
        let brute = brute_force_wasserstein(&x, &y, p);
        worst = worst.max((fast - brute).abs());
    }
    let elapsed = started.elapsed();
    verdict(
        "01 wasserstein-bruteforce-equivalence",
        worst < 1e-9 && elapsed.as_secs() < 10,
        &format!("worst deviation {worst:e}, elapsed {elapsed:?}"),
    );
}

// -------------------------------------------------------------------------
// 2. Metric axioms on random triples.

#[test]
fn wasserstein_metric_axioms() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut detail = String::new();
    let mut ok = true;
    for triple in 0..100 {
        let n = rng.gen_range(2..12);
        let p = if triple % 2 == 0 { 1 } else { 2 };
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect()
        };
        let (x, y, z) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let d = |a: &[f64], b: &[f64]| wasserstein_1d(a, b, p).unwrap();
        if (d(&x, &y) - d(&y, &x)).abs() > 1e-9 {
            ok = false;
            detail = format!("symmetry violated on triple {triple}");
        }
        if d(&x, &x) > 1e-9 || d(&x, &y) < 0.0 {
            ok = false;
            detail = format!("identity/non-negativity violated on triple {triple}");
        }
        if d(&x, &z) > d(&x, &y) + d(&y, &z) + 1e-9 {
            ok = false;
            detail = format!("triangle inequality violated on triple {triple}");
        }
    }
    verdict("02 wasserstein-metric-axioms", ok, &detail);
}

// -------------------------------------------------------------------------
// 3. Service clustering reaches a medoid fixpoint on 20 services.

#[test]
fn service_clustering_fixpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let series: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let base = match i % 3 {
                0 => 2.0,
                1 => 30.0,
                _ => 400.0,
            } + (i as f64) * 0.2;
            (0..48)
                .map(|t| base * (1.0 + 0.3 * (t as f64 * 0.3).sin()) + rng.gen_range(-0.5..0.5))
                .collect()
        })
        .collect();
    let part = wkmeans(&series, 3, 50).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    let medoids: Vec<Vec<f64>> = (0..part.num_clusters())
        .map(|c| {
            let members: Vec<Vec<f64>> =
                part.members(c).iter().map(|&i| series[i].clone()).collect();
            members[wd_medoid(&members)].clone()
        })
        .collect();
    for (i, s) in series.iter().enumerate() {
        let own = part.labels()[i];
        let d_own = wasserstein_1d(s, &medoids[own], 1).unwrap();
        for (c, m) in medoids.iter().enumerate() {
            if c != own && wasserstein_1d(s, m, 1).unwrap() < d_own - 1e-9 {
                ok = false;
                detail = format!("service {i} is closer to cluster {c}'s medoid than its own");
            }
        }
    }
    verdict("03 service-clustering-medoid-fixpoint", ok, &detail);
}

// -------------------------------------------------------------------------
// 4. Node cohort recovery on well-separated synthetic cohorts.

#[test]
fn node_cohort_recovery() {
    let started = std::time::Instant::now();
    let cfg = GenConfig {
        num_nodes: 8,
        num_cohorts: 2,
        num_services: 4,
        num_days: 2,
        steps_per_day: 48,
        seed: 404,
        service_profiles: vec![],
        cohort_scale_jitter: 0.05,
        cohort_scales: vec![1.0, 3.0],
    };
    let (datasets, truth) = generate(&cfg).unwrap();
    let features: Vec<_> = datasets.iter().map(node_features).collect();
    let (k, scores) = choose_k_nodes(&features, (2, 4), 8, cfg.seed).unwrap();
    let part = kmeans(&features, k, 8, cfg.seed).unwrap();
    let ari = adjusted_rand_index(&part, &truth.node_cohort);
    let elapsed = started.elapsed();
    verdict(
        "04 node-cohort-recovery",
        k == 2 && ari == 1.0 && elapsed.as_secs() < 30,
        &format!("k={k}, ari={ari}, scores={scores:?}, elapsed {elapsed:?}"),
    );
}

// -------------------------------------------------------------------------
// 5. Analytic gradients match central finite differences.

#[test]
fn transformer_gradient_check() {
    let started = std::time::Instant::now();
    let config = TmtpnConfig {
        d_model: 8,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ffn: 16,
        dropout: 0.0,
        input_len: 4,
        horizon: 2,
        num_services: 3,
        lr: 1e-3,
        batch_size: 1,
        max_epochs: 1,
        seed: 505,
    };
    let model = TmtpnModel::new(config.clone()).unwrap();
    let x = Matrix::from_vec(
        4,
        3,
        (0..12).map(|i| ((i as f64) * 0.61).sin() * 0.5 + 0.5).collect(),
    );
    let y = Matrix::from_vec(
        2,
        3,
        (0..6).map(|i| ((i as f64) * 0.37).cos() * 0.5 + 0.5).collect(),
    );
    let (_, grads) = tmtpn::loss_and_gradients(&model, &x, &y).unwrap();
    let base: Vec<(String, Matrix)> = model
        .named_params()
        .map(|(n, m)| (n.to_string(), m.clone()))
        .collect();

    let h = 1e-5;
    let mut worst_rel = 0.0f64;
    let mut worst_at = String::new();
    let mut ok = true;
    for (pi, (name, g)) in grads.iter().enumerate() {
        for idx in 0..g.data().len() {
            let mut plus = base.clone();
            plus[pi].1.data_mut()[idx] += h;
            let mut minus = base.clone();
            minus[pi].1.data_mut()[idx] -= h;
            let fp = tmtpn::loss_with_params(&model, &plus, &x, &y).unwrap();
            let fm = tmtpn::loss_with_params(&model, &minus, &x, &y).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = g.data()[idx];
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-7 {
                let rel = (analytic - numeric).abs() / scale;
                if rel > worst_rel {
                    worst_rel = rel;
                    worst_at = format!("{name}[{idx}]");
                }
                if rel >= 1e-4 {
                    ok = false;
                }
            } else if (analytic - numeric).abs() > 1e-9 {
                ok = false;
                worst_at = format!("{name}[{idx}] (near-zero)");
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        "05 transformer-gradient-check",
        ok && elapsed.as_secs() < 60,
        &format!("worst rel err {worst_rel:e} at {worst_at}, elapsed {elapsed:?}"),
    );
}

// -------------------------------------------------------------------------
// 6. Teacher-forced outputs are causal under the look-ahead mask.

#[test]
fn decoder_causality() {
    let config = TmtpnConfig {
        d_model: 8,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 2,
        d_ffn: 16,
        dropout: 0.0,
        input_len: 5,
        horizon: 4,
        num_services: 2,
        lr: 1e-3,
        batch_size: 1,
        max_epochs: 1,
        seed: 606,
    };
    let model = TmtpnModel::new(config).unwrap();
    let x = Matrix::from_vec(5, 2, (0..10).map(|i| (i as f64 * 0.17).sin().abs()).collect());
    let y = Matrix::from_vec(4, 2, (0..8).map(|i| (i as f64 * 0.29).cos().abs()).collect());
    let base = forward_train(&model, &x, &y).unwrap();
    let mut worst = 0.0f64;
    for t in 0..4usize {
        let mut perturbed = y.clone();
        for i in t..4 {
            for j in 0..2 {
                perturbed[(i, j)] += 11.0 + (i * 2 + j) as f64;
            }
        }
        let out = forward_train(&model, &x, &perturbed).unwrap();
        // Decoder input is the shifted target, so position i sees targets
        // < i; perturbing positions >= t may only move outputs at rows > t.
        for i in 0..=t {
            for j in 0..2 {
                worst = worst.max((out[(i, j)] - base[(i, j)]).abs());
            }
        }
    }
    verdict(
        "06 decoder-causality",
        worst <= 1e-9,
        &format!("max leak {worst:e}"),
    );
}

// -------------------------------------------------------------------------
// Shared preparation for the learning-based checks.

struct PreparedNode {
    train: Vec<WindowSample>,
    val: Vec<WindowSample>,
    test: Vec<WindowSample>,
}

fn prepare_node(
    ds: &NodeDataset,
    t: usize,
    f: usize,
    train_stride: usize,
    eval_stride: usize,
) -> PreparedNode {
    let (tr, va, te) = split(ds, (0.8, 0.1, 0.1)).unwrap();
    let (tr_n, stats) = normalize(&tr, None).unwrap();
    let (va_n, _) = normalize(&va, Some(&stats)).unwrap();
    let (te_n, _) = normalize(&te, Some(&stats)).unwrap();
    PreparedNode {
        train: window(&tr_n, t, f, train_stride).unwrap(),
        val: window(&va_n, t, f, 1).unwrap(),
        test: window(&te_n, t, f, eval_stride).unwrap(),
    }
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

fn forecast_mae(model: &TmtpnModel, samples: &[WindowSample]) -> f64 {
    let mut abs = 0.0;
    let mut n = 0usize;
    for s in samples {
        let pred = forecast(model, &s.input).unwrap();
        for (p, t) in pred.data().iter().zip(s.target.data()) {
            abs += (p - t).abs();
            n += 1;
        }
    }
    abs / n as f64
}

fn persistence_mae(samples: &[WindowSample], f: usize) -> f64 {
    let mut abs = 0.0;
    let mut n = 0usize;
    for s in samples {
        let pred = persistence_baseline(&s.input, f);
        for (p, t) in pred.data().iter().zip(s.target.data()) {
            abs += (p - t).abs();
            n += 1;
        }
    }
    abs / n as f64
}

// -------------------------------------------------------------------------
// 7. A trained forecaster beats the persistence baseline on clean diurnal
//    traffic.

#[test]
fn learning_beats_persistence() {
    let started = std::time::Instant::now();
    let (t, f) = (30, 5);
    let gen = GenConfig {
        num_nodes: 1,
        num_cohorts: 1,
        num_services: 2,
        num_days: 10,
        steps_per_day: 48,
        seed: 707,
        service_profiles: (0..2)
            .map(|k| ServiceProfile {
                base_volume: 50.0 + 30.0 * k as f64,
                diurnal_amplitude: 0.5,
                weekly_dip: 0.0,
                noise_std: 0.0,
                family: 0,
            })
            .collect(),
        cohort_scale_jitter: 0.0,
        cohort_scales: vec![],
    };
    let (datasets, _) = generate(&gen).unwrap();
    let prep = prepare_node(&datasets[0], t, f, 2, 1);

    let config = TmtpnConfig {
        d_model: 16,
        num_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ffn: 32,
        dropout: 0.0,
        input_len: t,
        horizon: f,
        num_services: 2,
        lr: 3e-3,
        batch_size: 32,
        max_epochs: 25,
        seed: 707,
    };
    assert!(config.max_epochs <= 50);
    let model = TmtpnModel::new(config).unwrap();
    let (trained, _log) = tmtpn::train(&model, &prep.train, &prep.val).unwrap();

    let model_mae = forecast_mae(&trained, &prep.test);
    let baseline_mae = persistence_mae(&prep.test, f);
    let elapsed = started.elapsed();
    verdict(
        "07 learning-beats-persistence",
        model_mae < baseline_mae && elapsed.as_secs() < 600,
        &format!("model MAE {model_mae:.5}, persistence MAE {baseline_mae:.5}, elapsed {elapsed:?}"),
    );
}

// -------------------------------------------------------------------------
// 8. Per-cluster models do at least as well as one model over all services
//    when the services form two very different families.

#[test]
fn per_cluster_models_help() {
    let started = std::time::Instant::now();
    let (t, f) = (12, 3);
    let mut mean_clustered = 0.0;
    let mut mean_single = 0.0;
    for seed in [81u64, 82, 83] {
        let gen = GenConfig {
            num_nodes: 1,
            num_cohorts: 1,
            num_services: 6,
            num_days: 14,
            steps_per_day: 24,
            seed,
            service_profiles: (0..6)
                .map(|k| {
                    if k < 3 {
                        ServiceProfile {
                            base_volume: 120.0 + 10.0 * k as f64,
                            diurnal_amplitude: 0.5,
                            weekly_dip: 0.0,
                            noise_std: 0.05,
                            family: 0,
                        }
                    } else {
                        ServiceProfile {
                            base_volume: 4.0 + 0.5 * k as f64,
                            diurnal_amplitude: 0.15,
                            weekly_dip: 0.6,
                            noise_std: 0.05,
                            family: 1,
                        }
                    }
                })
                .collect(),
            cohort_scale_jitter: 0.0,
            cohort_scales: vec![],
        };
        let (datasets, _) = generate(&gen).unwrap();
        let ds = &datasets[0];
        let prep = prepare_node(ds, t, f, 2, 2);

        let hyper = |services: usize, seed: u64| TmtpnConfig {
            d_model: 8,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ffn: 16,
            dropout: 0.0,
            input_len: t,
            horizon: f,
            num_services: services,
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 40,
            seed,
        };

        // Clustered: WK-means on the raw training series, one model per
        // cluster, errors pooled over all services.
        let (train_raw, _, _) = split(ds, (0.8, 0.1, 0.1)).unwrap();
        let series: Vec<Vec<f64>> = train_raw
            .series()
            .iter()
            .map(|s| s.values().to_vec())
            .collect();
        let part = wkmeans(&series, 2, 50).unwrap();
        let mut abs = 0.0;
        let mut n = 0usize;
        for c in 0..part.num_clusters() {
            let services = part.members(c);
            let model = TmtpnModel::new(hyper(services.len(), seed + c as u64)).unwrap();
            let (trained, _) = tmtpn::train(
                &model,
                &restrict(&prep.train, &services),
                &restrict(&prep.val, &services),
            )
            .unwrap();
            for s in restrict(&prep.test, &services) {
                let pred = forecast(&trained, &s.input).unwrap();
                for (p, tv) in pred.data().iter().zip(s.target.data()) {
                    abs += (p - tv).abs();
                    n += 1;
                }
            }
        }
        let clustered_mae = abs / n as f64;

        let model = TmtpnModel::new(hyper(6, seed)).unwrap();
        let (trained, _) = tmtpn::train(&model, &prep.train, &prep.val).unwrap();
        let single_mae = forecast_mae(&trained, &prep.test);

        mean_clustered += clustered_mae / 3.0;
        mean_single += single_mae / 3.0;
    }
    let elapsed = started.elapsed();
    verdict(
        "08 per-cluster-models-help",
        mean_clustered <= mean_single,
        &format!(
            "clustered MAE {mean_clustered:.5}, single MAE {mean_single:.5}, elapsed {elapsed:?}"
        ),
    );
}

// -------------------------------------------------------------------------
// 9. Transfer from the reference node stays close to local training and
//    beats transfer from the lowest-volume node.

#[test]
fn transfer_fidelity() {
    let started = std::time::Instant::now();
    let seed = 909;
    let cfg = ExperimentConfig {
        seed,
        data: DataSource::Synth {
            // Four generated volume tiers that merge into two discovered
            // cohorts, so each cohort has genuine internal volume spread:
            // its lowest-volume member sees relatively noisier data than
            // its reference.
            synth: GenConfig {
                num_nodes: 8,
                num_cohorts: 4,
                num_services: 4,
                num_days: 8,
                steps_per_day: 48,
                seed,
                service_profiles: (0..4)
                    .map(|k| ServiceProfile {
                        base_volume: if k < 2 { 80.0 + 5.0 * k as f64 } else { 4.0 + k as f64 },
                        diurnal_amplitude: if k < 2 { 0.5 } else { 0.3 },
                        weekly_dip: 0.1,
                        noise_std: 0.15,
                        family: if k < 2 { 0 } else { 1 },
                    })
                    .collect(),
                cohort_scale_jitter: 0.05,
                cohort_scales: vec![1.0, 2.5, 8.0, 20.0],
            },
        },
        windowing: Windowing {
            input_len: 12,
            horizon: 3,
            stride: 3,
        },
        split: (0.8, 0.1, 0.1),
        clustering: ClusteringConfig {
            service_k: (2, 3),
            node_k: (2, 2),
            ..Default::default()
        },
        model: ModelHyper {
            d_model: 16,
            num_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ffn: 32,
            dropout: 0.0,
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 20,
        },
        schemes: vec![Scheme::Original, Scheme::Transmuse, Scheme::CtrlExp],
    };
    let run = run_pipeline(&cfg).unwrap();
    let report = &run.report;
    let references = &report.node_clusters.reference_nodes;
    let original = &report.schemes["original"];
    let transmuse = &report.schemes["transmuse"];
    let ctrl = &report.schemes["ctrl_exp"];

    let mut ok = true;
    let mut detail = String::new();
    let mut rmse_t = 0.0;
    let mut rmse_c = 0.0;
    let mut recipients = 0usize;
    for node in &report.node_ids {
        if references.contains(node) {
            continue;
        }
        recipients += 1;
        let o = original.per_node[node].mae;
        let tm = transmuse.per_node[node].mae;
        if tm > 1.15 * o {
            ok = false;
            detail = format!("node {node}: transmuse MAE {tm:.4} > 1.15 x original {o:.4}");
        }
        rmse_t += transmuse.per_node[node].rmse;
        rmse_c += ctrl.per_node[node].rmse;
    }
    rmse_t /= recipients as f64;
    rmse_c /= recipients as f64;
    if rmse_c <= rmse_t {
        ok = false;
        detail = format!("mean recipient RMSE: ctrl {rmse_c:.4} <= transmuse {rmse_t:.4}");
    }
    let elapsed = started.elapsed();
    verdict(
        "09 transfer-fidelity",
        ok,
        &format!("{detail} (ctrl RMSE {rmse_c:.4}, transmuse RMSE {rmse_t:.4}, elapsed {elapsed:?})"),
    );
}

// -------------------------------------------------------------------------
// 10. Two CLI transfer runs of the same config produce byte-identical
//     reports.

#[test]
fn cli_transfer_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    std::fs::write(
        &config_path,
        r#"
seed = 10

[synth]
num_nodes = 4
num_cohorts = 2
num_services = 4
num_days = 2
steps_per_day = 48
seed = 10
cohort_scale_jitter = 0.05

[windowing]
input_len = 6
horizon = 2
stride = 4

[clustering]
service_k = [2, 3]
node_k = [2, 3]

[model]
d_model = 8
num_heads = 2
enc_layers = 1
dec_layers = 1
d_ffn = 16
dropout = 0.1
max_epochs = 1
"#,
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_transmuse");
    let mut outputs = Vec::new();
    for run in ["run1", "run2"] {
        let out_dir = dir.path().join(run);
        let status = std::process::Command::new(bin)
            .args(["transfer", "--config"])
            .arg(&config_path)
            .arg("--out-dir")
            .arg(&out_dir)
            .status()
            .unwrap();
        assert!(status.success(), "transfer run failed");
        outputs.push(std::fs::read(out_dir.join("report.json")).unwrap());
        assert!(out_dir.join("report.csv").exists());
    }
    verdict(
        "10 cli-transfer-determinism",
        outputs[0] == outputs[1],
        "report.json differs between identical runs",
    );
}

// -------------------------------------------------------------------------
// 11. Checkpoint save -> load -> save is byte-identical.

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = TmtpnModel::new(TmtpnConfig {
        d_model: 16,
        num_heads: 4,
        enc_layers: 2,
        dec_layers: 1,
        d_ffn: 32,
        dropout: 0.1,
        input_len: 10,
        horizon: 3,
        num_services: 5,
        lr: 1e-3,
        batch_size: 8,
        max_epochs: 3,
        seed: 1111,
    })
    .unwrap();
    let a = dir.path().join("a.tmse");
    let b = dir.path().join("b.tmse");
    save_checkpoint(&model, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    save_checkpoint(&loaded, &b).unwrap();
    let identical = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    verdict(
        "11 checkpoint-round-trip",
        identical,
        "bytes differ after save/load/save",
    );
}
