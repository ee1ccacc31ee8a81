use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use conserva::config::{EnvSpec, ExperimentConfig, SweepFile};
use conserva::harness;
use conserva_core::agents::{AgentKind, AgentSpec};
use conserva_core::bayes::Prior;

#[derive(Parser)]
#[command(name = "conserva", version, about = "Tabular Bayesian model-based RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its output directory.
    Run(RunArgs),
    /// Run every configuration of a sweep file in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; 0 uses one per core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Aggregate all run directories below a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Built-in environment, e.g. `nchain:8`.
    #[arg(long, conflicts_with = "env_file")]
    env: Option<EnvSpec>,
    /// MDP JSON file.
    #[arg(long)]
    env_file: Option<PathBuf>,
    #[arg(long, default_value = "cdpo")]
    agent: AgentKind,
    #[arg(long, default_value_t = 0.2)]
    eta: f64,
    #[arg(long, default_value_t = 0.97)]
    gamma: f64,
    #[arg(long, default_value_t = 10)]
    models: usize,
    #[arg(long, default_value_t = 3)]
    sweeps: usize,
    /// Episode length; defaults to the environment's own.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Record Q-posterior snapshots every this many iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    snapshot_every: usize,
    #[arg(long, default_value_t = 20)]
    snapshot_samples: usize,
    /// Probe ensemble width at this state-action pair, given as `S,A`.
    #[arg(long, value_parser = parse_pair)]
    width_at: Option<(usize, usize)>,
    /// Reward prior mean; by default the largest reward mean of the environment.
    #[arg(long)]
    prior_mu0: Option<f64>,
    /// Write zero timings so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let Some((a, b)) = s.split_once(',') else { bail!("expected S,A") };
    Ok((a.trim().parse()?, b.trim().parse()?))
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let env = match (self.env, self.env_file) {
            (Some(env), None) => env,
            (None, Some(path)) => EnvSpec::File(path),
            _ => bail!("exactly one of --env and --env-file is required"),
        };
        let agent = AgentSpec { kind: self.agent, eta: self.eta, n_models: self.models, sweeps: self.sweeps, gamma: self.gamma };
        let mut cfg = ExperimentConfig::new(env, agent, self.out);
        cfg.iterations = self.iters;
        cfg.horizon = self.horizon;
        cfg.seed = self.seed;
        cfg.snapshot_every = self.snapshot_every;
        cfg.snapshot_samples = self.snapshot_samples;
        cfg.width_at = self.width_at;
        cfg.prior = self.prior_mu0.map(|mu0| Prior { mu0, ..Prior::default() });
        cfg.record_timing = !self.no_timing;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONSERVA_LOG", "info")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            let outcome = harness::run_experiment(&args.into_config()?)?;
            println!("final cumulative regret: {}", outcome.final_cum_regret());
        }
        Command::Sweep { config, jobs } => {
            let file = SweepFile::from_path(&config)?;
            let configs = file.expand();
            if configs.is_empty() {
                bail!("{} defines no runs", config.display());
            }
            let (cells, rows) = harness::sweep(&configs, jobs, &file.output_dir)?;
            let failed = cells.iter().filter(|c| c.final_cum_regret.is_err()).count();
            print_rows(&rows);
            if failed > 0 {
                eprintln!("{failed} of {} runs failed", cells.len());
            }
        }
        Command::Report { input } => print_rows(&harness::report(&input)?),
    }
    Ok(())
}

fn print_rows(rows: &[harness::AggregateRow]) {
    println!("{:<14} {:<16} {:>5} {:>5} {:>12} {:>12} {:>8}", "env", "agent", "runs", "fail", "mean", "std", "norm");
    for r in rows {
        println!(
            "{:<14} {:<16} {:>5} {:>5} {:>12.4} {:>12.4} {:>8.4}",
            r.env, r.agent, r.runs, r.failures, r.mean_cum_regret, r.std_cum_regret, r.normalized_regret
        );
    }
}
