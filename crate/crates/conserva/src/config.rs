//! Experiment and sweep configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use conserva_core::agents::{AgentKind, AgentSpec};
use conserva_core::bayes::Prior;
use conserva_core::envs::{build_nchain, Environment};
use conserva_core::experiment::environment_from_prior;
use serde::{Deserialize, Serialize};

use crate::mdp_file::load_mdp;

/// Which true environment a run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSpec {
    /// `{"nchain": 8}`
    Nchain(usize),
    /// `{"file": "path/to/mdp.json"}`
    File(PathBuf),
    /// A model drawn from the run's prior, for Bayes-regret estimates.
    PriorDraw { n_states: usize, n_actions: usize, reward_std: f64, horizon: usize },
}

impl EnvSpec {
    /// Short label used in directory names and aggregate tables.
    pub fn label(&self) -> String {
        match self {
            EnvSpec::Nchain(n) => format!("nchain{n}"),
            EnvSpec::File(path) => path.file_stem().map_or_else(|| "file".into(), |s| s.to_string_lossy().into_owned()),
            EnvSpec::PriorDraw { n_states, n_actions, .. } => format!("prior{n_states}x{n_actions}"),
        }
    }

    /// Builds the environment. `seed` and `prior` are only used by prior draws.
    pub fn build(&self, seed: u64, prior: Prior) -> Result<Environment> {
        let env = match self {
            EnvSpec::Nchain(n) => build_nchain(*n)?,
            EnvSpec::File(path) => load_mdp(path)?,
            EnvSpec::PriorDraw { n_states, n_actions, reward_std, horizon } => {
                environment_from_prior(*n_states, *n_actions, prior, *reward_std, *horizon, seed)?
            }
        };
        Ok(env)
    }
}

impl FromStr for EnvSpec {
    type Err = anyhow::Error;

    /// Parses the command-line form `nchain:N`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("nchain", n)) => Ok(EnvSpec::Nchain(n.parse().with_context(|| format!("bad chain length in {s:?}"))?)),
            _ => bail!("unknown environment {s:?}; expected nchain:N"),
        }
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn default_iterations() -> usize {
    500
}

fn default_gamma() -> f64 {
    0.97
}

fn default_snapshot_samples() -> usize {
    20
}

fn default_true() -> bool {
    true
}

/// One run. Serialized as the `config.json` echo next to each trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub agent: AgentSpec,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Episode length; the environment's own horizon when absent.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Discount used for planning and regret; overrides `agent.gamma`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Iterations between posterior snapshots; 0 disables them.
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default = "default_snapshot_samples")]
    pub snapshot_samples: usize,
    pub output_dir: PathBuf,
    /// Posterior prior. When absent, the default prior with `mu0` set to the
    /// environment's largest reward mean (prior draws use the plain default).
    #[serde(default)]
    pub prior: Option<Prior>,
    /// Record the ensemble width at this `(s, a)` every iteration.
    #[serde(default)]
    pub width_at: Option<(usize, usize)>,
    /// Write measured wall-clock milliseconds; when false the column is 0 and
    /// traces are byte-identical across reruns.
    #[serde(default = "default_true")]
    pub record_timing: bool,
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec, agent: AgentSpec, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            env,
            agent,
            iterations: default_iterations(),
            horizon: None,
            gamma: agent.gamma,
            seed: 0,
            snapshot_every: 0,
            snapshot_samples: default_snapshot_samples(),
            output_dir: output_dir.into(),
            prior: None,
            width_at: None,
            record_timing: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            bail!("iterations must be at least 1");
        }
        if self.horizon == Some(0) {
            bail!("horizon must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bail!("gamma must lie in (0, 1), got {}", self.gamma);
        }
        if self.snapshot_every > 0 && self.snapshot_samples < 2 {
            bail!("snapshot_samples must be at least 2");
        }
        self.resolved_agent().validate()?;
        if let Some(prior) = &self.prior {
            prior.validate()?;
        }
        Ok(())
    }

    /// The agent spec with the run's discount applied.
    pub fn resolved_agent(&self) -> AgentSpec {
        AgentSpec { gamma: self.gamma, ..self.agent }
    }

    /// Builds the environment (with the run's horizon applied) and picks the
    /// prior. Prior-drawn environments use the configured prior, or
    /// [`Prior::default`], for both the draw and the agent.
    pub fn resolve(&self) -> Result<(Environment, Prior)> {
        let (env, prior) = match (&self.env, self.prior) {
            (EnvSpec::PriorDraw { .. }, prior) => {
                let prior = prior.unwrap_or_default();
                (self.env.build(self.seed, prior)?, prior)
            }
            (spec, Some(prior)) => (spec.build(self.seed, prior)?, prior),
            (spec, None) => {
                let env = spec.build(self.seed, Prior::default())?;
                let prior = optimistic_prior(&env);
                (env, prior)
            }
        };
        let env = match self.horizon {
            Some(h) => env.with_horizon(h)?,
            None => env,
        };
        Ok((env, prior))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Default prior whose reward location sits at the largest reward mean of `env`.
pub fn optimistic_prior(env: &Environment) -> Prior {
    let top = env.model().reward_means().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Prior { mu0: top, ..Prior::default() }
}

/// A grid of runs sharing one base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub envs: Vec<EnvSpec>,
    #[serde(default)]
    pub agents: Vec<AgentKind>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

/// Contents of a `sweep --config` file: explicit runs, a grid, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    /// Where the aggregate table is written; grid cells go underneath.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub runs: Vec<ExperimentConfig>,
    #[serde(default)]
    pub grid: Option<SweepGrid>,
}

impl SweepFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// All runs, grid cells placed at `output_dir/<env>/<agent>/seed-<k>`.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let mut configs = self.runs.clone();
        if let Some(grid) = &self.grid {
            let envs = if grid.envs.is_empty() { vec![grid.base.env.clone()] } else { grid.envs.clone() };
            let agents = if grid.agents.is_empty() { vec![grid.base.agent.kind] } else { grid.agents.clone() };
            let seeds = if grid.seeds.is_empty() { vec![grid.base.seed] } else { grid.seeds.clone() };
            for env in &envs {
                for &kind in &agents {
                    for &seed in &seeds {
                        let mut cfg = grid.base.clone();
                        cfg.env = env.clone();
                        cfg.agent.kind = kind;
                        cfg.seed = seed;
                        cfg.output_dir =
                            self.output_dir.join(env.label()).join(kind.cli_name()).join(format!("seed-{seed}"));
                        configs.push(cfg);
                    }
                }
            }
        }
        configs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_spec_parsing() {
        assert_eq!("nchain:8".parse::<EnvSpec>().unwrap(), EnvSpec::Nchain(8));
        assert!("nchain:x".parse::<EnvSpec>().is_err());
        assert!("grid:3".parse::<EnvSpec>().is_err());
    }

    #[test]
    fn config_defaults_from_json() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"env": {"nchain": 5}, "agent": {"kind": "psrl"}, "output_dir": "out"}"#).unwrap();
        assert_eq!(cfg.iterations, 500);
        assert_eq!(cfg.gamma, 0.97);
        assert_eq!(cfg.agent.kind, AgentKind::Psrl);
        assert_eq!(cfg.agent.eta, 0.2);
        assert_eq!(cfg.agent.n_models, 10);
        assert!(cfg.record_timing);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_round_trips() {
        let mut cfg = ExperimentConfig::new(EnvSpec::File("x/chain.json".into()), AgentSpec::default(), "out");
        cfg.prior = Some(Prior::default());
        cfg.width_at = Some((1, 0));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        assert_eq!(cfg.env.label(), "chain");
    }

    #[test]
    fn invalid_configs() {
        let base = ExperimentConfig::new(EnvSpec::Nchain(5), AgentSpec::default(), "out");
        assert!(ExperimentConfig { iterations: 0, ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { gamma: 1.0, ..base.clone() }.validate().is_err());
        assert!(ExperimentConfig { horizon: Some(0), ..base.clone() }.validate().is_err());
        let mut bad_agent = base.clone();
        bad_agent.agent.eta = -0.1;
        assert!(bad_agent.validate().is_err());
    }

    #[test]
    fn optimistic_prior_on_chain() {
        let env = build_nchain(8).unwrap();
        assert_eq!(optimistic_prior(&env).mu0, 1.0);
        let cfg = ExperimentConfig { horizon: Some(5), ..ExperimentConfig::new(EnvSpec::Nchain(8), AgentSpec::default(), "o") };
        let (env, prior) = cfg.resolve().unwrap();
        assert_eq!((env.horizon(), prior.mu0), (5, 1.0));
        let draw = EnvSpec::PriorDraw { n_states: 3, n_actions: 2, reward_std: 0.1, horizon: 6 };
        let (_, prior) = ExperimentConfig::new(draw, AgentSpec::default(), "o").resolve().unwrap();
        assert_eq!(prior, Prior::default());
    }

    #[test]
    fn grid_expansion() {
        let base = ExperimentConfig::new(EnvSpec::Nchain(5), AgentSpec::default(), "ignored");
        let sweep = SweepFile {
            output_dir: "root".into(),
            runs: vec![base.clone()],
            grid: Some(SweepGrid {
                base,
                envs: vec![EnvSpec::Nchain(5), EnvSpec::Nchain(8)],
                agents: vec![AgentKind::Cdpo, AgentKind::Psrl],
                seeds: vec![0, 1, 2],
            }),
        };
        let configs = sweep.expand();
        assert_eq!(configs.len(), 1 + 2 * 2 * 3);
        assert_eq!(configs[1].output_dir, Path::new("root/nchain5/cdpo/seed-0"));
        assert_eq!(configs.last().unwrap().agent.kind, AgentKind::Psrl);
    }
}
