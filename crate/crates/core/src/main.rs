use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dkpca::experiment::{
    agent_range_for_cubic, bound_check, sweep_agents, sweep_samples, write_results, DataSource, ExperimentConfig, PartitionKind, PolicyConfig, ResultsTable,
};
use dkpca::data::{ingest_table, TableOptions};
use dkpca::kernels::gram_of;
use dkpca::{partition, run_one_shot, subspace_error, sym_eig_topd, synth_lowrank, AgentState, KernelKind, PartitionScheme, RankPolicy, SynthParams, Transport};

#[derive(Parser)]
#[command(name = "dkpca", version, about = "One-shot distributed kernel PCA over feature-partitioned data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Error versus number of agents.
    SweepAgents(RunArgs),
    /// Error and transmitted eigenvectors versus sample size.
    SweepSamples(RunArgs),
    /// Checks the perturbation bound over seeded trials.
    BoundCheck(RunArgs),
    /// Agent counts for which the one-shot cost stays cubic in T.
    PlanAgents {
        #[arg(long)]
        features: u64,
        #[arg(long)]
        rank: u64,
        #[arg(long)]
        samples: u64,
    },
    /// A single end-to-end run.
    RunOnce(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Linear,
    Rbf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kernel: Option<KernelArg>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Agent count, or comma-separated sweep values for `sweep-agents`.
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<usize>>,
    /// Sample sizes for `sweep-samples`.
    #[arg(long, value_delimiter = ',')]
    samples: Option<Vec<usize>>,
    /// Global rank `D`.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    adaptive_eps_ratio: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `inproc` or a socket address such as `127.0.0.1:0` (run-once only).
    #[arg(long, default_value = "inproc")]
    transport: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn sample_sweep_defaults(kind: KernelKind) -> Vec<PolicyConfig> {
    let eps_ratio = match kind {
        KernelKind::Linear => 0.04,
        KernelKind::Rbf => 0.0005,
    };
    vec![PolicyConfig::Fixed { rank: 5 }, PolicyConfig::Fixed { rank: 15 }, PolicyConfig::Adaptive { eps_ratio }]
}

fn load_config(args: &RunArgs, command: &Command) -> Result<ExperimentConfig, String> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            ExperimentConfig::from_toml(&text).map_err(|e| e.to_string())?
        }
        None => {
            let mut c = ExperimentConfig::default();
            match command {
                Command::SweepSamples(_) => {
                    c.partition = PartitionKind::RandomSizes;
                    c.rank = 5;
                    c.data = DataSource::Synthetic { features: 200, samples: 100, rank: 30, decay: 0.9, noise: 0.05 };
                }
                Command::BoundCheck(_) => {
                    c.data = DataSource::Synthetic { features: 40, samples: 100, rank: 20, decay: 0.8, noise: 0.05 };
                    c.rank = 5;
                    c.agent_values = vec![4];
                    c.policies = vec![PolicyConfig::Mixed { min: 5, max: 20 }];
                }
                _ => {}
            }
            c
        }
    };
    if let Some(k) = args.kernel {
        config.kernel.kind = match k {
            KernelArg::Linear => KernelKind::Linear,
            KernelArg::Rbf => KernelKind::Rbf,
        };
    }
    if args.sigma.is_some() {
        config.kernel.sigma = args.sigma;
    }
    if args.config.is_none() && matches!(command, Command::SweepSamples(_)) {
        config.policies = sample_sweep_defaults(config.kernel.kind);
    }
    if let Some(a) = &args.agents {
        match command {
            Command::SweepAgents(_) | Command::BoundCheck(_) => config.agent_values = a.clone(),
            _ => config.agents = *a.first().ok_or("--agents needs a value")?,
        }
    }
    if let Some(s) = &args.samples {
        config.sample_values = s.clone();
    }
    if let Some(r) = args.rank {
        config.rank = r;
    }
    if let Some(eps_ratio) = args.adaptive_eps_ratio {
        let mut replaced = false;
        for p in &mut config.policies {
            if let PolicyConfig::Adaptive { eps_ratio: e } = p {
                *e = eps_ratio;
                replaced = true;
            }
        }
        if !replaced {
            config.policies.push(PolicyConfig::Adaptive { eps_ratio });
        }
    }
    if let Some(t) = args.trials {
        config.trials = t;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if args.out.is_some() {
        config.out = args.out.clone();
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("results"))
}

fn print_summaries(table: &ResultsTable) {
    println!("{:>8} {:<20} {:>5} {:>12} {:>12} {:>10}", table.axis.name(), "policy", "ok", "mean_error", "std_error", "vectors");
    for s in &table.summaries {
        println!("{:>8} {:<20} {:>5} {:>12.4e} {:>12.4e} {:>10.1}", s.sweep_value, s.policy, s.completed, s.mean_error, s.std_error, s.mean_vectors);
    }
}

fn save(table: &ResultsTable, config: &ExperimentConfig, name: &str) -> Result<(), String> {
    let (data, meta) = write_results(table, config, &out_dir(config), name).map_err(|e| e.to_string())?;
    println!("wrote {} and {}", data.display(), meta.display());
    Ok(())
}

fn run_once(config: &ExperimentConfig, transport: &str) -> Result<(), String> {
    let s = |e: dkpca::Error| e.to_string();
    let dataset = match &config.data {
        DataSource::Synthetic { features, samples, rank, decay, noise } => {
            synth_lowrank(&SynthParams { features: *features, samples: *samples, rank: *rank, decay: *decay, noise: *noise, seed: config.seed }).map_err(s)?
        }
        DataSource::File { path, delimiter, missing_token, orientation } => {
            let opts = TableOptions { delimiter: *delimiter as u8, missing_token: missing_token.clone(), orientation: *orientation, ..TableOptions::default() };
            let report = ingest_table(path, &opts).map_err(s)?;
            if !report.dropped.is_empty() {
                println!("dropped {} features with too many missing values", report.dropped.len());
            }
            report.dataset.centered()
        }
    };
    let kernel = config.kernel.resolve(dataset.features()).map_err(s)?;
    let scheme = match config.partition {
        PartitionKind::Uniform => PartitionScheme::Uniform(config.agents),
        PartitionKind::RandomSizes => PartitionScheme::RandomSizes { agents: config.agents, seed: config.seed },
    };
    let t = dataset.samples();
    let policy = match config.policies.first() {
        Some(PolicyConfig::Fixed { rank }) => RankPolicy::Fixed((*rank).min(t)),
        Some(PolicyConfig::Adaptive { eps_ratio }) => RankPolicy::Adaptive { eps_ratio: *eps_ratio },
        Some(PolicyConfig::Mixed { max, .. }) => RankPolicy::Fixed((*max).min(t)),
        Some(PolicyConfig::Full) | None => RankPolicy::Fixed(t),
    };
    let agents = partition(&dataset, &scheme)
        .map_err(s)?
        .into_iter()
        .map(|b| AgentState::new(b, kernel, policy))
        .collect::<dkpca::Result<Vec<_>>>()
        .map_err(s)?;
    let transport = if transport == "inproc" { Transport::InProcess } else { Transport::Socket(transport.to_string()) };
    let outcome = run_one_shot(&agents, &transport, config.rank).map_err(s)?;

    let k = gram_of(&dataset.values, &kernel).map_err(s)?;
    let v_gt = sym_eig_topd(&k, config.rank).map_err(s)?.eigenvectors;
    let error = subspace_error(&v_gt, &outcome.result.v_hat).map_err(s)?;

    println!("kernel {} T {} M {} J {} D {}", kernel.kind().as_str(), t, dataset.features(), agents.len(), config.rank);
    for (id, d) in &outcome.result.meta.agent_ranks {
        println!("agent {id}: d = {d}");
    }
    println!("upstream messages {}", outcome.trace.upstream_count());
    println!("payload scalars {} bytes {}", outcome.cost.total_scalars, outcome.cost.total_bytes);
    println!("subspace error {error:.6e}");

    let dir = out_dir(config);
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let log = dir.join("trace.log");
    write_lines(&log, &outcome.trace.log_lines())?;
    println!("wrote {}", log.display());
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), String> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), String> {
    match &cli.command {
        Command::PlanAgents { features, rank, samples } => {
            match agent_range_for_cubic(*features, *rank, *samples) {
                Some(r) => println!("J in [{}, {}]", r.start(), r.end()),
                None => println!("no J keeps the cost cubic in T"),
            }
            Ok(())
        }
        Command::SweepAgents(args) => {
            let config = load_config(args, &cli.command)?;
            let table = sweep_agents(&config).map_err(|e| e.to_string())?;
            print_summaries(&table);
            save(&table, &config, "sweep_agents")
        }
        Command::SweepSamples(args) => {
            let config = load_config(args, &cli.command)?;
            let table = sweep_samples(&config).map_err(|e| e.to_string())?;
            print_summaries(&table);
            save(&table, &config, "sweep_samples")
        }
        Command::BoundCheck(args) => {
            let config = load_config(args, &cli.command)?;
            let table = sweep_agents(&config).map_err(|e| e.to_string())?;
            let check = bound_check(&table);
            println!("trials {} checked {} violations {} worst ratio {:.4}", check.trials, check.checked, check.violations, check.worst_ratio);
            save(&table, &config, "bound_check")?;
            if check.violations > 0 {
                return Err(format!("{} bound violations", check.violations));
            }
            Ok(())
        }
        Command::RunOnce(args) => {
            let config = load_config(args, &cli.command)?;
            run_once(&config, &args.transport)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
