mod common;

use std::collections::HashSet;
use std::process::Command;

use dkpca::data::Provenance;
use dkpca::experiment::{sweep_agents, sweep_samples, DataSource, ExperimentConfig, KernelConfig, PartitionKind, PolicyConfig, ResultsTable};
use dkpca::protocol::{CostReport, HEADER_LEN};
use dkpca::{
    cross_kernel, partition, project, run_one_shot, subspace_error, synth_lowrank, AgentState, Dataset, FeatureBlock, KernelKind, KernelSpec, PartitionScheme,
    RankPolicy, SynthParams, Transport,
};
use nalgebra::DMatrix;

use common::{direct_gram, even_row_split, gaussian_data, jacobi_eigen, projector_distance, rel_frobenius, top_vectors};

fn agents_for(blocks: Vec<FeatureBlock>, spec: KernelSpec, ranks: &[usize]) -> Vec<AgentState> {
    blocks.into_iter().zip(ranks).map(|(b, &d)| AgentState::new(b, spec, RankPolicy::Fixed(d)).unwrap()).collect()
}

fn sigma_of(spec: &KernelSpec) -> Option<f64> {
    match spec {
        KernelSpec::Linear => None,
        KernelSpec::Rbf { sigma } => Some(*sigma),
    }
}

/// Local truncation and fusion written out by hand.
fn brute_force_k_hat(x: &DMatrix<f64>, j: usize, ranks: &[usize], sigma: Option<f64>) -> DMatrix<f64> {
    let t = x.ncols();
    let mut k_hat = match sigma {
        None => DMatrix::zeros(t, t),
        Some(_) => DMatrix::from_element(t, t, 1.0),
    };
    for (block, &d) in even_row_split(x, j).iter().zip(ranks) {
        let (values, vectors) = jacobi_eigen(&direct_gram(block, sigma));
        for p in 0..t {
            for q in 0..t {
                let local: f64 = (0..d).map(|k| values[k] * vectors[(p, k)] * vectors[(q, k)]).sum();
                match sigma {
                    None => k_hat[(p, q)] += local,
                    Some(_) => k_hat[(p, q)] *= local,
                }
            }
        }
    }
    k_hat
}

#[test]
fn truncated_run_matches_brute_force_replication() {
    let (t, j, d) = (60, 3, 5);
    let ranks = [4, 7, 9];
    let ds = synth_lowrank(&SynthParams { features: 30, samples: t, rank: 15, decay: 0.85, noise: 0.1, seed: 21 }).unwrap();
    for spec in [KernelSpec::Linear, KernelSpec::rbf(2.0).unwrap()] {
        let agents = agents_for(partition(&ds, &PartitionScheme::Uniform(j)).unwrap(), spec, &ranks);
        let out = run_one_shot(&agents, &Transport::InProcess, d).unwrap();

        let sigma = sigma_of(&spec);
        let brute = brute_force_k_hat(&ds.values, j, &ranks, sigma);
        assert!(rel_frobenius(out.result.k_hat.as_matrix(), &brute) <= 1e-10, "{spec:?}");

        let v_gt = top_vectors(&direct_gram(&ds.values, sigma), d);
        let brute_error = projector_distance(&v_gt, &top_vectors(&brute, d));
        let error = subspace_error(&v_gt, &out.result.v_hat).unwrap();
        assert!((error - brute_error).abs() <= 1e-10, "{spec:?}: {error} vs {brute_error}");
        assert!(error > 1e-6, "truncation should leave a visible error");
    }
}

#[test]
fn projection_matches_centralized_cross_kernel() {
    let (t, s, d) = (50, 7, 4);
    let ds = synth_lowrank(&SynthParams { features: 24, samples: t, rank: 12, decay: 0.9, noise: 0.1, seed: 8 }).unwrap();
    let query = gaussian_data(24, s, 99);
    for spec in [KernelSpec::Linear, KernelSpec::rbf(1.5).unwrap()] {
        let blocks = partition(&ds, &PartitionScheme::Uniform(3)).unwrap();
        let mut start = 0;
        let partials: Vec<(u32, DMatrix<f64>)> = blocks
            .iter()
            .map(|b| {
                let q = query.rows(start, b.features()).into_owned();
                start += b.features();
                (b.agent_id, cross_kernel(b, &q, &spec).unwrap())
            })
            .collect();
        let agents = agents_for(blocks, spec, &[3, 5, 6]);
        let out = run_one_shot(&agents, &Transport::InProcess, d).unwrap();
        let got = project(&out.result, &partials, false).unwrap();

        let mut cross = DMatrix::zeros(t, s);
        for p in 0..t {
            for c in 0..s {
                let col = ds.values.column(p);
                let y = query.column(c);
                cross[(p, c)] = match sigma_of(&spec) {
                    None => col.dot(&y),
                    Some(sigma) => (-(col - y).norm_squared() / (2.0 * sigma * sigma)).exp(),
                };
            }
        }
        let want = out.result.v_hat.transpose() * cross;
        assert!(rel_frobenius(&got, &want) <= 1e-10, "{spec:?}");
    }
}

#[test]
fn wire_frames_never_carry_raw_features() {
    let (m, t) = (12, 30);
    let mut x = gaussian_data(m, t, 4);
    // planted sentinels, paired so every row stays centered
    for i in 0..m {
        let s = 1000.0 + 0.123_456_789 * (i as f64 + 1.0);
        x[(i, 0)] = s;
        x[(i, 1)] = -s;
        let rest: f64 = (2..t).map(|c| x[(i, c)]).sum::<f64>() / (t - 2) as f64;
        for c in 2..t {
            x[(i, c)] -= rest;
        }
    }
    let raw: HashSet<u64> = x.iter().filter(|v| **v != 0.0).map(|v| v.to_bits()).collect();
    let mut ds = Dataset::new(x, Provenance::Derived("sentinel".into())).unwrap();
    ds.centered = true;
    for transport in [Transport::InProcess, Transport::Socket("127.0.0.1:0".into())] {
        let agents = agents_for(partition(&ds, &PartitionScheme::Uniform(3)).unwrap(), KernelSpec::Linear, &[t, 3, 4]);
        let out = run_one_shot(&agents, &transport, 3).unwrap();
        assert_eq!(out.trace.frames.len(), 3);
        for frame in &out.trace.frames {
            for w in frame.windows(8) {
                let bits = u64::from_le_bytes(w.try_into().unwrap());
                assert!(!raw.contains(&bits), "raw feature value found on the wire");
            }
        }
    }
}

#[test]
fn one_shot_trace_has_one_upstream_message_per_agent() {
    let ds = synth_lowrank(&SynthParams { features: 30, samples: 20, rank: 5, decay: 0.9, noise: 0.0, seed: 1 }).unwrap();
    let agents = agents_for(partition(&ds, &PartitionScheme::Uniform(3)).unwrap(), KernelSpec::Linear, &[5, 5, 5]);
    let out = run_one_shot(&agents, &Transport::InProcess, 3).unwrap();
    assert_eq!(out.trace.upstream_count(), 3);
    assert_eq!(out.trace.downstream_count(), 0);
    let wire: usize = out.trace.frames.iter().map(Vec::len).sum();
    assert_eq!(wire, out.cost.total_bytes);
    assert_eq!(out.cost.header_bytes, 3 * HEADER_LEN);
}

#[test]
fn error_shrinks_as_agents_send_more_pairs() {
    let t = 40;
    let ds = synth_lowrank(&SynthParams { features: 60, samples: t, rank: 12, decay: 0.8, noise: 0.0, seed: 17 }).unwrap();
    let v_gt = top_vectors(&direct_gram(&ds.values, None), 4);
    let mut last = f64::INFINITY;
    for d in [2, 5, 10, t] {
        let agents = agents_for(partition(&ds, &PartitionScheme::Uniform(4)).unwrap(), KernelSpec::Linear, &[d; 4]);
        let err = subspace_error(&v_gt, &run_one_shot(&agents, &Transport::InProcess, 4).unwrap().result.v_hat).unwrap();
        assert!(err <= last + 1e-12, "d = {d}: {err} > {last}");
        last = err;
    }
    assert!(last <= 1e-8);
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic { features: 60, samples: 40, rank: 10, decay: 0.9, noise: 0.0 },
        kernel: KernelConfig { kind: KernelKind::Linear, sigma: None },
        partition: PartitionKind::Uniform,
        agents: 5,
        rank: 10,
        policies: vec![PolicyConfig::Fixed { rank: 10 }],
        agent_values: vec![2, 5, 10],
        sample_values: vec![30, 40],
        trials: 4,
        seed: 12,
        out: None,
    }
}

fn check_scalars(table: &ResultsTable) {
    for r in &table.rows {
        let m = r.outcome.as_ref().unwrap();
        let ranks: Vec<(u32, usize)> = vec![(0, m.transmitted_vectors)];
        assert_eq!(m.total_scalars, CostReport::from_ranks(&ranks, &[0], m.samples).total_scalars);
        assert!((m.error - m.sin_theta_fro.powi(2)).abs() <= 1e-8);
    }
}

#[test]
fn rank_ten_linear_sweep_is_lossless() {
    let table = sweep_agents(&small_config()).unwrap();
    assert_eq!(table.rows.len(), 3 * 4);
    for r in &table.rows {
        assert!(r.outcome.as_ref().unwrap().error <= 1e-8, "{r:?}");
    }
    check_scalars(&table);
}

#[test]
fn single_full_rank_agent_is_lossless() {
    let config = ExperimentConfig {
        data: DataSource::Synthetic { features: 30, samples: 25, rank: 20, decay: 0.9, noise: 0.2 },
        kernel: KernelConfig { kind: KernelKind::Rbf, sigma: None },
        agent_values: vec![1],
        policies: vec![PolicyConfig::Full],
        rank: 5,
        ..small_config()
    };
    let table = sweep_agents(&config).unwrap();
    assert!(table.summaries[0].mean_error <= 1e-8);
}

#[test]
fn sample_sweep_honors_trial_count() {
    let config = ExperimentConfig {
        data: DataSource::Synthetic { features: 30, samples: 20, rank: 15, decay: 0.9, noise: 0.1 },
        policies: vec![PolicyConfig::Full, PolicyConfig::Fixed { rank: 3 }],
        partition: PartitionKind::RandomSizes,
        rank: 3,
        agents: 4,
        sample_values: vec![15, 20],
        trials: 50,
        ..small_config()
    };
    let table = sweep_samples(&config).unwrap();
    for &t in &config.sample_values {
        for p in &config.policies {
            let rows: Vec<_> = table.rows.iter().filter(|r| r.sweep_value == t && r.policy == p.label()).collect();
            assert_eq!(rows.len(), 50);
            if *p == PolicyConfig::Full {
                assert!(rows.iter().all(|r| r.outcome.as_ref().unwrap().error <= 1e-8));
            }
        }
    }
    check_scalars(&table);
}

#[test]
fn tables_are_reproducible_from_config_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { kernel: KernelConfig { kind: KernelKind::Rbf, sigma: None }, ..small_config() };
    let write = |name: &str| {
        let table = sweep_samples(&config).unwrap();
        let path = dir.path().join(name);
        table.write_delimited(&path, b',').unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(write("a.csv"), write("b.csv"));
    let other = ExperimentConfig { seed: 13, ..config.clone() };
    assert_ne!(sweep_samples(&other).unwrap().rows, sweep_samples(&config).unwrap().rows);
}

#[test]
fn sweep_records_failed_trials_and_keeps_going() {
    let config = ExperimentConfig { agent_values: vec![5, 100], trials: 2, ..small_config() };
    let table = sweep_agents(&config).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().filter(|r| r.sweep_value == 100).all(|r| r.outcome.is_err()));
    assert!(table.rows.iter().filter(|r| r.sweep_value == 5).all(|r| r.outcome.is_ok()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    table.write_delimited(&path, b',').unwrap();
    assert!(std::fs::read_to_string(path).unwrap().contains("failed"));
}

fn cli(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dkpca")).args(args).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

#[test]
fn cli_plans_agent_range() {
    let (ok, text) = cli(&["plan-agents", "--features", "10000", "--rank", "100", "--samples", "5000"]);
    assert!(ok);
    assert!(text.contains("J in [3, 47]"), "{text}");
}

#[test]
fn cli_run_once_over_sockets_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let config = ExperimentConfig {
        data: DataSource::Synthetic { features: 20, samples: 15, rank: 5, decay: 0.9, noise: 0.1 },
        policies: vec![PolicyConfig::Fixed { rank: 4 }],
        ..small_config()
    };
    std::fs::write(&cfg, config.to_toml().unwrap()).unwrap();
    let out = dir.path().join("out");
    let (ok, text) = cli(&[
        "run-once",
        "--config",
        cfg.to_str().unwrap(),
        "--agents",
        "4",
        "--rank",
        "3",
        "--transport",
        "127.0.0.1:0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(ok, "{text}");
    assert!(text.contains("upstream messages 4"), "{text}");
    let log = std::fs::read_to_string(out.join("trace.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn cli_sweep_writes_table_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (ok, text) = cli(&["sweep-agents", "--kernel", "linear", "--agents", "2,4", "--trials", "2", "--seed", "5", "--out", out]);
    assert!(ok, "{text}");
    let table = std::fs::read_to_string(dir.path().join("sweep_agents.csv")).unwrap();
    assert!(table.starts_with("kind,sweep_axis,sweep_value"));
    let meta = std::fs::read_to_string(dir.path().join("sweep_agents.meta.toml")).unwrap();
    assert!(meta.contains("seed = 5"));
}

#[test]
fn cli_rejects_bad_flags() {
    let (ok, text) = cli(&["sweep-agents", "--trials", "0"]);
    assert!(!ok);
    assert!(text.contains("trials"), "{text}");
}
