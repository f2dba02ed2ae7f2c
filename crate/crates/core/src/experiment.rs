//! Experiment harness: agent-count and sample-size sweeps, bound checks and
//! the agent-count planner.
//!
//! Every trial compares the one-shot estimate with the centralized ground
//! truth (top-`D` eigenvectors of the exact global Gram matrix). Rows are
//! ordered by (sweep value, trial, policy) regardless of execution order, and
//! all randomness is derived from the configured seed.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, RankPolicy};
use crate::data::{ingest_table, partition, synth_lowrank, Dataset, Orientation, PartitionScheme, SynthParams, TableOptions};
use crate::fusion::subspace_bound;
use crate::kernels::{gram_of, KernelKind, KernelSpec};
use crate::linalg::{sin_theta, subspace_error, sym_eig_full};
use crate::protocol::{run_one_shot, RunOutcome, Transport};
use crate::{Error, Result};

/// Bound checks skip trials whose global gap is at most this fraction of `λ₁(K)`.
pub const BOUND_GAP_FLOOR: f64 = 1e-8;

/// Absolute slack on `‖sin Θ‖_F` when checking the bound. Lossless runs
/// measure round-off (around 1e-14) against a bound that is exactly zero.
pub const BOUND_ROUNDOFF: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DataSource {
    Synthetic {
        features: usize,
        samples: usize,
        rank: usize,
        decay: f64,
        noise: f64,
    },
    File {
        path: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default)]
        missing_token: String,
        #[serde(default)]
        orientation: Orientation,
    },
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// RBF width; defaults to `√M / 3`.
    pub sigma: Option<f64>,
}

impl KernelConfig {
    pub fn resolve(&self, features: usize) -> Result<KernelSpec> {
        match (self.kind, self.sigma) {
            (KernelKind::Linear, _) => Ok(KernelSpec::Linear),
            (KernelKind::Rbf, Some(s)) => KernelSpec::rbf(s),
            (KernelKind::Rbf, None) => KernelSpec::rbf_default(features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Uniform,
    RandomSizes,
}

/// Rank policy applied to every agent of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum PolicyConfig {
    /// `d_j = min(rank, T)`.
    Fixed { rank: usize },
    /// `d_j = T`.
    Full,
    Adaptive { eps_ratio: f64 },
    /// `d_j` drawn uniformly from `min..=max` per agent and trial.
    Mixed { min: usize, max: usize },
}

impl PolicyConfig {
    pub fn label(&self) -> String {
        match self {
            PolicyConfig::Fixed { rank } => format!("fixed-{rank}"),
            PolicyConfig::Full => "full".into(),
            PolicyConfig::Adaptive { eps_ratio } => format!("adaptive-{eps_ratio}"),
            PolicyConfig::Mixed { min, max } => format!("mixed-{min}-{max}"),
        }
    }

    fn resolve(&self, samples: usize, rng: &mut ChaCha8Rng) -> Result<RankPolicy> {
        Ok(match *self {
            PolicyConfig::Fixed { rank } => RankPolicy::Fixed(rank.min(samples)),
            PolicyConfig::Full => RankPolicy::Fixed(samples),
            PolicyConfig::Adaptive { eps_ratio } => RankPolicy::Adaptive { eps_ratio },
            PolicyConfig::Mixed { min, max } => {
                if min == 0 || min > max {
                    return Err(Error::Config(format!("mixed rank range {min}..={max} is empty")));
                }
                RankPolicy::Fixed(rng.random_range(min..=max).min(samples))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub kernel: KernelConfig,
    pub partition: PartitionKind,
    /// Agent count when the sweep runs over sample sizes.
    pub agents: usize,
    /// Number of global components `D`.
    pub rank: usize,
    pub policies: Vec<PolicyConfig>,
    /// Sweep values for `sweep-agents`.
    #[serde(default)]
    pub agent_values: Vec<usize>,
    /// Sweep values for `sweep-samples`.
    #[serde(default)]
    pub sample_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// Desk-scale RBF setup.
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic { features: 200, samples: 100, rank: 10, decay: 0.9, noise: 0.0 },
            kernel: KernelConfig { kind: KernelKind::Rbf, sigma: None },
            partition: PartitionKind::Uniform,
            agents: 10,
            rank: 10,
            policies: vec![PolicyConfig::Fixed { rank: 10 }],
            agent_values: vec![1, 2, 5, 10, 20],
            sample_values: vec![50, 100, 150],
            trials: 50,
            seed: 0,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("at least one rank policy is required".into()));
        }
        if let (KernelKind::Rbf, Some(s)) = (self.kernel.kind, self.kernel.sigma) {
            KernelSpec::rbf(s)?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-trial seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// One (sweep value, trial, policy) measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub sweep_value: usize,
    pub policy: String,
    pub trial: usize,
    pub outcome: std::result::Result<TrialMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub agents: usize,
    pub samples: usize,
    /// `D − ‖V_gtᵀ V̂‖_F²`.
    pub error: f64,
    pub sin_theta_fro: f64,
    pub bound: f64,
    pub gap: f64,
    pub lambda1: f64,
    pub total_scalars: usize,
    pub transmitted_vectors: usize,
    /// `‖K̂ − K‖_F / ‖K‖_F`.
    pub k_rel_error: f64,
    /// Smallest eigenvalue of `K̂`.
    pub k_hat_min_eig: f64,
    /// Largest eigenvalue of `K̂`.
    pub k_hat_max_eig: f64,
}

impl TrialMetrics {
    pub fn bound_applies(&self) -> bool {
        self.gap > BOUND_GAP_FLOOR * self.lambda1
    }

    pub fn bound_holds(&self) -> bool {
        self.sin_theta_fro <= self.bound + BOUND_ROUNDOFF
    }
}

/// Ground truth shared by every policy of one trial.
struct TrialContext {
    kernel: KernelSpec,
    v_gt: nalgebra::DMatrix<f64>,
    spectrum: Vec<f64>,
    k: nalgebra::DMatrix<f64>,
}

fn trial_context(dataset: &Dataset, kernel: KernelSpec, rank: usize) -> Result<TrialContext> {
    let t = dataset.samples();
    if rank + 1 > t {
        return Err(Error::input(format!("rank {rank} needs at least {} samples, have {t}", rank + 1)));
    }
    let k = gram_of(&dataset.values, &kernel)?;
    let full = sym_eig_full(&k)?;
    let v_gt = full.truncate(rank)?.eigenvectors;
    Ok(TrialContext { kernel, v_gt, spectrum: full.eigenvalues, k: k.into_matrix() })
}

fn measure(ctx: &TrialContext, outcome: &RunOutcome, rank: usize) -> Result<TrialMetrics> {
    let res = &outcome.result;
    let samples = res.meta.samples;
    let agents = res.meta.agents();
    let error = subspace_error(&ctx.v_gt, &res.v_hat)?;
    let sin = sin_theta(&ctx.v_gt, &res.v_hat)?.frobenius_sin();
    let tails: Vec<f64> = outcome.local.iter().map(|d| d.first_discarded).collect();
    let bound = subspace_bound(&tails, &ctx.spectrum, agents, samples, rank, ctx.kernel.kind())?;
    let k_hat_spectrum = res.k_hat.spectrum()?;
    let k_rel_error = (res.k_hat.as_matrix() - &ctx.k).norm() / ctx.k.norm();
    Ok(TrialMetrics {
        agents,
        samples,
        error,
        sin_theta_fro: sin,
        bound: bound.bound_value,
        gap: bound.gap,
        lambda1: ctx.spectrum[0],
        total_scalars: outcome.cost.total_scalars,
        transmitted_vectors: res.meta.transmitted_vectors(),
        k_rel_error,
        k_hat_min_eig: *k_hat_spectrum.last().expect("non-empty"),
        k_hat_max_eig: k_hat_spectrum[0],
    })
}

/// Runs every policy on one dataset and partition.
fn run_policies(dataset: &Dataset, kernel: KernelSpec, scheme: &PartitionScheme, rank: usize, policies: &[PolicyConfig], seed: u64) -> Vec<std::result::Result<TrialMetrics, String>> {
    let ctx = match trial_context(dataset, kernel, rank) {
        Ok(c) => c,
        Err(e) => return policies.iter().map(|_| Err(e.to_string())).collect(),
    };
    let blocks = match partition(dataset, scheme) {
        Ok(b) => b,
        Err(e) => return policies.iter().map(|_| Err(e.to_string())).collect(),
    };
    policies
        .iter()
        .enumerate()
        .map(|(p, policy)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9011c7, p as u64]));
            let mut run = || -> Result<TrialMetrics> {
                let agents = blocks
                    .iter()
                    .map(|b| AgentState::new(b.clone(), kernel, policy.resolve(b.samples(), &mut rng)?))
                    .collect::<Result<Vec<_>>>()?;
                let outcome = run_one_shot(&agents, &Transport::InProcess, rank)?;
                measure(&ctx, &outcome, rank)
            };
            run().map_err(|e| e.to_string())
        })
        .collect()
}

fn load_base(config: &ExperimentConfig) -> Result<Option<Dataset>> {
    match &config.data {
        DataSource::Synthetic { .. } => Ok(None),
        DataSource::File { path, delimiter, missing_token, orientation } => {
            let delimiter = u8::try_from(*delimiter as u32).map_err(|_| Error::Config(format!("delimiter {delimiter:?} is not a single byte")))?;
            let opts = TableOptions { delimiter, missing_token: missing_token.clone(), orientation: *orientation, ..TableOptions::default() };
            Ok(Some(ingest_table(path, &opts)?.dataset))
        }
    }
}

/// Dataset for one trial. `samples` overrides the sample count.
fn trial_dataset(config: &ExperimentConfig, base: Option<&Dataset>, samples: Option<usize>, seed: u64) -> Result<Dataset> {
    match (&config.data, base) {
        (DataSource::Synthetic { features, samples: t, rank, decay, noise }, _) => synth_lowrank(&SynthParams {
            features: *features,
            samples: samples.unwrap_or(*t),
            rank: (*rank).min(samples.unwrap_or(*t)),
            decay: *decay,
            noise: *noise,
            seed,
        }),
        (DataSource::File { .. }, Some(ds)) => match samples {
            None => Ok(ds.centered()),
            Some(t) if t >= ds.samples() => Ok(ds.centered()),
            Some(t) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cols = rand::seq::index::sample(&mut rng, ds.samples(), t).into_vec();
                cols.sort_unstable();
                Ok(ds.select_samples(&cols)?.centered())
            }
        },
        (DataSource::File { .. }, None) => Err(Error::Config("file data source was not loaded".into())),
    }
}

fn scheme_for(kind: PartitionKind, agents: usize, seed: u64) -> PartitionScheme {
    match kind {
        PartitionKind::Uniform => PartitionScheme::Uniform(agents),
        PartitionKind::RandomSizes => PartitionScheme::RandomSizes { agents, seed },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Agents,
    Samples,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Agents => "agents",
            SweepAxis::Samples => "samples",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub sweep_value: usize,
    pub policy: String,
    pub completed: usize,
    pub failed: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_vectors: f64,
    pub std_vectors: f64,
    pub mean_scalars: f64,
    pub mean_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub axis: SweepAxis,
    pub rows: Vec<TrialRecord>,
    pub summaries: Vec<Summary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn summarize(rows: &[TrialRecord], sweep_values: &[usize], policies: &[PolicyConfig]) -> Vec<Summary> {
    let mut out = Vec::new();
    for &v in sweep_values {
        for p in policies {
            let label = p.label();
            let group: Vec<&TrialRecord> = rows.iter().filter(|r| r.sweep_value == v && r.policy == label).collect();
            let ok: Vec<&TrialMetrics> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let errors: Vec<f64> = ok.iter().map(|m| m.error).collect();
            let vectors: Vec<f64> = ok.iter().map(|m| m.transmitted_vectors as f64).collect();
            let scalars: Vec<f64> = ok.iter().map(|m| m.total_scalars as f64).collect();
            let bounds: Vec<f64> = ok.iter().map(|m| m.bound).collect();
            let (mean_error, std_error) = mean_std(&errors);
            let (mean_vectors, std_vectors) = mean_std(&vectors);
            out.push(Summary {
                sweep_value: v,
                policy: label,
                completed: ok.len(),
                failed: group.len() - ok.len(),
                mean_error,
                std_error,
                mean_vectors,
                std_vectors,
                mean_scalars: mean_std(&scalars).0,
                mean_bound: mean_std(&bounds).0,
            });
        }
    }
    out
}

fn run_sweep(config: &ExperimentConfig, axis: SweepAxis) -> Result<ResultsTable> {
    config.validate()?;
    let values = match axis {
        SweepAxis::Agents => &config.agent_values,
        SweepAxis::Samples => &config.sample_values,
    };
    if values.is_empty() {
        return Err(Error::Config(format!("no {} values to sweep", axis.name())));
    }
    let base = load_base(config)?;
    let jobs: Vec<(usize, usize)> = values.iter().flat_map(|&v| (0..config.trials).map(move |t| (v, t))).collect();

    let per_job: Vec<Vec<TrialRecord>> = jobs
        .par_iter()
        .map(|&(value, trial)| {
            // data depends on the trial (and T), not on J, so agent sweeps are paired
            let data_seed = match axis {
                SweepAxis::Agents => derive_seed(config.seed, &[trial as u64]),
                SweepAxis::Samples => derive_seed(config.seed, &[trial as u64, value as u64]),
            };
            let split_seed = derive_seed(data_seed, &[value as u64, 0x5e11]);
            let (agents, samples) = match axis {
                SweepAxis::Agents => (value, None),
                SweepAxis::Samples => (config.agents, Some(value)),
            };
            let outcomes = match trial_dataset(config, base.as_ref(), samples, data_seed).and_then(|ds| {
                let kernel = config.kernel.resolve(ds.features())?;
                Ok((ds, kernel))
            }) {
                Ok((ds, kernel)) => run_policies(&ds, kernel, &scheme_for(config.partition, agents, split_seed), config.rank, &config.policies, split_seed),
                Err(e) => config.policies.iter().map(|_| Err(e.to_string())).collect(),
            };
            config
                .policies
                .iter()
                .zip(outcomes)
                .map(|(p, outcome)| TrialRecord { sweep_value: value, policy: p.label(), trial, outcome })
                .collect()
        })
        .collect();
    // (sweep value, policy, trial) order, independent of completion order
    let mut rows: Vec<(usize, usize, TrialRecord)> =
        per_job.into_iter().flat_map(|recs| recs.into_iter().enumerate()).enumerate().map(|(i, (p, r))| (i / config.policies.len() / config.trials, p, r)).collect();
    rows.sort_by_key(|(v, p, r)| (*v, *p, r.trial));
    let rows: Vec<TrialRecord> = rows.into_iter().map(|(_, _, r)| r).collect();
    let summaries = summarize(&rows, values, &config.policies);
    Ok(ResultsTable { axis, rows, summaries })
}

/// Error versus the number of agents, one row per (J, trial, policy).
pub fn sweep_agents(config: &ExperimentConfig) -> Result<ResultsTable> {
    run_sweep(config, SweepAxis::Agents)
}

/// Error and transmitted eigenvector count versus sample size, with every
/// configured policy run on the same data.
pub fn sweep_samples(config: &ExperimentConfig) -> Result<ResultsTable> {
    run_sweep(config, SweepAxis::Samples)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub trials: usize,
    /// Trials whose spectral gap made the bound meaningful.
    pub checked: usize,
    pub violations: usize,
    /// Largest measured / bound ratio among checked trials whose error is
    /// above round-off.
    pub worst_ratio: f64,
}

pub fn bound_check(table: &ResultsTable) -> BoundCheck {
    let metrics: Vec<&TrialMetrics> = table.rows.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
    let checked: Vec<&&TrialMetrics> = metrics.iter().filter(|m| m.bound_applies()).collect();
    let violations = checked.iter().filter(|m| !m.bound_holds()).count();
    let worst_ratio = checked.iter().filter(|m| m.sin_theta_fro > BOUND_ROUNDOFF).map(|m| if m.bound > 0.0 { m.sin_theta_fro / m.bound } else if m.sin_theta_fro > 0.0 { f64::INFINITY } else { 0.0 }).fold(0.0, f64::max);
    BoundCheck { trials: metrics.len(), checked: checked.len(), violations, worst_ratio }
}

pub const TABLE_HEADER: [&str; 16] = [
    "kind",
    "sweep_axis",
    "sweep_value",
    "policy",
    "trial",
    "error",
    "log10_error",
    "sin_theta_fro",
    "bound",
    "gap",
    "total_scalars",
    "transmitted_vectors",
    "k_rel_error",
    "k_hat_min_eig",
    "completed",
    "status",
];

fn fmt(v: f64) -> String {
    v.to_string()
}

impl ResultsTable {
    /// Plot-ready delimited text: trial rows, then `mean` and `std` rows.
    pub fn write_delimited(&self, path: &Path, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_path(path)?;
        w.write_record(TABLE_HEADER)?;
        let axis = self.axis.name();
        for r in &self.rows {
            let head = ["trial".to_string(), axis.into(), r.sweep_value.to_string(), r.policy.clone(), r.trial.to_string()];
            let tail: Vec<String> = match &r.outcome {
                Ok(m) => vec![
                    fmt(m.error),
                    fmt(m.error.log10()),
                    fmt(m.sin_theta_fro),
                    fmt(m.bound),
                    fmt(m.gap),
                    m.total_scalars.to_string(),
                    m.transmitted_vectors.to_string(),
                    fmt(m.k_rel_error),
                    fmt(m.k_hat_min_eig),
                    "1".into(),
                    "ok".into(),
                ],
                Err(e) => {
                    let mut v = vec![String::new(); 9];
                    v.push("0".into());
                    v.push(format!("failed: {e}"));
                    v
                }
            };
            w.write_record(head.into_iter().chain(tail))?;
        }
        for s in &self.summaries {
            for (kind, err, vectors) in [("mean", s.mean_error, s.mean_vectors), ("std", s.std_error, s.std_vectors)] {
                let log_err = if kind == "mean" { fmt(err.log10()) } else { String::new() };
                let bound = if kind == "mean" { fmt(s.mean_bound) } else { String::new() };
                let scalars = if kind == "mean" { fmt(s.mean_scalars) } else { String::new() };
                w.write_record([
                    kind.to_string(),
                    axis.into(),
                    s.sweep_value.to_string(),
                    s.policy.clone(),
                    String::new(),
                    fmt(err),
                    log_err,
                    String::new(),
                    bound,
                    String::new(),
                    scalars,
                    fmt(vectors),
                    String::new(),
                    String::new(),
                    s.completed.to_string(),
                    if s.failed == 0 { "ok".into() } else { format!("{} failed", s.failed) },
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes `<name>.csv` and a `<name>.meta.toml` sidecar echoing the config.
pub fn write_results(table: &ResultsTable, config: &ExperimentConfig, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let data = dir.join(format!("{name}.csv"));
    table.write_delimited(&data, b',')?;
    let meta = dir.join(format!("{name}.meta.toml"));
    let text = format!(
        "# {} {}\n# rows = {}, summaries = {}\n# adaptive thresholds are ratios of each agent's own leading local eigenvalue\n\n{}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        table.rows.len(),
        table.summaries.len(),
        config.to_toml()?
    );
    fs::write(&meta, text)?;
    Ok((data, meta))
}

/// Agent counts `J` for which the one-shot method costs `O(T³)` like the
/// centralized method: when `T ≥ 2√(M(D+1))`, the integers in
/// `[(T − √Δ) / 2(D+1), (T + √Δ) / 2(D+1)]` with `Δ = T² − 4M(D+1)`,
/// clamped to `[1, M]`. `None` when the range is empty.
pub fn agent_range_for_cubic(features: u64, rank: u64, samples: u64) -> Option<RangeInclusive<u64>> {
    let t = samples as u128;
    let m_d = 4 * features as u128 * (rank as u128 + 1);
    if t * t < m_d {
        return None;
    }
    let delta = ((t * t - m_d) as f64).sqrt();
    let denom = 2.0 * (rank as f64 + 1.0);
    let lo = ((samples as f64 - delta) / denom).ceil().max(1.0) as u64;
    let hi = ((samples as f64 + delta) / denom).floor().min(features as f64) as u64;
    (lo <= hi).then_some(lo..=hi)
}
