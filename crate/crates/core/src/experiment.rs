//! The iteration loop and exact regret accounting.
//!
//! Each iteration plans a policy from the current posterior, executes it for
//! one episode in the true environment, folds the episode into the posterior
//! and charges the regret of the executed policy, computed analytically on
//! the true model.

use alloc::format;
use alloc::vec::Vec;

use crate::agents::{self, AgentKind, AgentSpec};
use crate::bayes::{self, PosteriorState, Prior, QSnapshot};
use crate::envs::{self, Environment, OracleSolution};
use crate::error::invalid;
use crate::mdp::{self, Policy, TabularModel};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Slack for regret non-negativity and referential monotonicity.
pub const SOLVER_SLACK: f64 = 1e-9;
/// Slack for the trust-region bound.
pub const TRUST_REGION_SLACK: f64 = 1e-12;

/// `sum_s zeta(s) (V*(s) - V_pi(s))` on the true model.
pub fn true_regret(env: &Environment, oracle: &OracleSolution, policy: &Policy) -> Result<f64> {
    let values = mdp::evaluate_policy(env.model(), policy, oracle.gamma)?;
    let optimal = oracle.optimal_return(env.zeta())?;
    Ok(optimal - mdp::expected_return(&values, env.zeta())?)
}

/// Per-iteration regret and diagnostics of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegretTrace {
    pub per_iter_regret: Vec<f64>,
    pub cum_regret: Vec<f64>,
    pub delta_t: Vec<Option<f64>>,
    pub max_state_tv: Vec<Option<f64>>,
    pub width_at: Vec<Option<f64>>,
}

impl RegretTrace {
    pub fn len(&self) -> usize {
        self.per_iter_regret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_iter_regret.is_empty()
    }

    pub fn final_cum_regret(&self) -> f64 {
        self.cum_regret.last().copied().unwrap_or(0.0)
    }

    fn push(&mut self, record: &IterationRecord) {
        let cum = self.final_cum_regret() + record.regret;
        self.per_iter_regret.push(record.regret);
        self.cum_regret.push(cum);
        self.delta_t.push(record.delta_t);
        self.max_state_tv.push(record.max_state_tv);
        self.width_at.push(record.width);
    }

    /// Non-negative regret and exact prefix sums.
    pub fn check_invariants(&self) -> Result<()> {
        let mut running = 0.0;
        for (t, (&r, &c)) in self.per_iter_regret.iter().zip(&self.cum_regret).enumerate() {
            if r < -SOLVER_SLACK {
                return Err(Error::Invariant { iteration: t + 1, what: format!("negative regret {r}") });
            }
            running += r;
            if running != c {
                return Err(Error::Invariant { iteration: t + 1, what: format!("prefix sum {c} != {running}") });
            }
        }
        Ok(())
    }
}

/// Everything observed in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration index.
    pub iteration: usize,
    pub regret: f64,
    pub cum_regret: f64,
    /// Executed policy.
    pub pi_t: Policy,
    /// Referential policy, for agents that compute one.
    pub q_t: Option<Policy>,
    pub delta_t: Option<f64>,
    /// Trust-region usage against the agent's anchor.
    pub max_state_tv: Option<f64>,
    pub mean_value_before: Option<f64>,
    pub mean_value_after: Option<f64>,
    pub width: Option<f64>,
}

/// Draws a true environment from the prior; used to estimate Bayes regret.
/// The start state is `0` and every reward has standard deviation `reward_std`.
pub fn environment_from_prior(
    n_states: usize,
    n_actions: usize,
    prior: Prior,
    reward_std: f64,
    horizon: usize,
    seed: u64,
) -> Result<Environment> {
    let post = PosteriorState::new(n_states, n_actions, prior)?;
    let model = post.sample_model(&mut rng::stream(seed, Purpose::EnvDraw, 0));
    let mut zeta = alloc::vec![0.0; n_states];
    zeta[0] = 1.0;
    Environment::new(model, alloc::vec![reward_std; n_states * n_actions * n_states], zeta, horizon)
}

/// A single seeded run, advanced one iteration at a time.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    env: Environment,
    oracle: OracleSolution,
    spec: AgentSpec,
    seed: u64,
    posterior: PosteriorState,
    q_prev: Policy,
    pi_prev: Policy,
    iteration: usize,
    trace: RegretTrace,
    width_probe: Option<(usize, usize)>,
    check_invariants: bool,
}

impl ExperimentRun {
    pub fn new(env: Environment, spec: AgentSpec, prior: Prior, seed: u64) -> Result<Self> {
        spec.validate()?;
        let posterior = PosteriorState::new(env.n_states(), env.n_actions(), prior)?;
        let oracle = envs::oracle_solution(&env, spec.gamma)?;
        let start = Policy::uniform(env.n_states(), env.n_actions());
        Ok(Self {
            env,
            oracle,
            spec,
            seed,
            posterior,
            q_prev: start.clone(),
            pi_prev: start,
            iteration: 0,
            trace: RegretTrace::default(),
            width_probe: None,
            check_invariants: true,
        })
    }

    /// Replaces the starting posterior.
    pub fn with_posterior(mut self, posterior: PosteriorState) -> Result<Self> {
        if posterior.n_states() != self.env.n_states() || posterior.n_actions() != self.env.n_actions() {
            return Err(invalid!("posterior dimensions do not match the environment"));
        }
        self.posterior = posterior;
        Ok(self)
    }

    /// Records the ensemble width at `(s, a)` on iterations that sample models.
    pub fn with_width_probe(mut self, s: usize, a: usize) -> Result<Self> {
        if s >= self.env.n_states() || a >= self.env.n_actions() {
            return Err(invalid!("width probe ({s}, {a}) out of range"));
        }
        self.width_probe = Some((s, a));
        Ok(self)
    }

    /// Turns the fail-fast in-loop invariant checks on or off.
    pub fn with_invariant_checks(mut self, on: bool) -> Self {
        self.check_invariants = on;
        self
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn oracle(&self) -> &OracleSolution {
        &self.oracle
    }

    pub fn spec(&self) -> &AgentSpec {
        &self.spec
    }

    pub fn posterior(&self) -> &PosteriorState {
        &self.posterior
    }

    pub fn trace(&self) -> &RegretTrace {
        &self.trace
    }

    /// Number of completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Q-value spread of the current posterior, from its own random stream.
    pub fn snapshot(&self, k: usize) -> Result<QSnapshot> {
        let mut stream = rng::stream(self.seed, Purpose::Snapshot, self.iteration as u64);
        bayes::q_posterior_snapshot(&self.posterior, k, self.spec.gamma, self.iteration, &mut stream)
    }

    fn sample_models(&self, t: u64) -> Vec<TabularModel> {
        let mut stream = rng::stream(self.seed, Purpose::ModelSamples, t);
        self.posterior.sample_models(self.spec.n_models, &mut stream)
    }

    fn width(&self, models: &[TabularModel]) -> Result<Option<f64>> {
        match self.width_probe {
            Some((s, a)) if models.len() >= 2 => Ok(Some(bayes::ensemble_width(models, s, a)?)),
            _ => Ok(None),
        }
    }

    fn violation(&self, what: alloc::string::String) -> Error {
        Error::Invariant { iteration: self.iteration + 1, what }
    }

    /// Plans, executes one episode, updates the posterior and records regret.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let t = self.iteration + 1;
        let gamma = self.spec.gamma;
        let zeta = self.env.zeta().to_vec();
        let eta = self.spec.effective_eta();

        let mut record = IterationRecord {
            iteration: t,
            regret: 0.0,
            cum_regret: 0.0,
            pi_t: self.pi_prev.clone(),
            q_t: None,
            delta_t: None,
            max_state_tv: None,
            mean_value_before: None,
            mean_value_after: None,
            width: None,
        };

        match self.spec.kind {
            AgentKind::Cdpo | AgentKind::CdpoUnconstrained => {
                let reference = self.posterior.mean_model();
                let models = self.sample_models(t as u64);
                let out = agents::cdpo_iteration(&reference, &models, &self.q_prev, eta, self.spec.sweeps, gamma, &zeta)?;
                self.check_referential(&reference, &out.q_t, out.delta_t)?;
                record.width = self.width(&models)?;
                record.delta_t = Some(out.delta_t);
                record.max_state_tv = Some(out.max_state_tv);
                record.mean_value_before = Some(out.mean_sampled_value_before);
                record.mean_value_after = Some(out.mean_sampled_value_after);
                record.q_t = Some(out.q_t);
                record.pi_t = out.pi_t;
            }
            AgentKind::CdpoReferentialOnly => {
                let reference = self.posterior.mean_model();
                let (q_t, q_values) = mdp::policy_iteration(&reference, gamma)?;
                let prev = mdp::evaluate_policy(&reference, &self.q_prev, gamma)?;
                let delta = mdp::expected_return(&q_values, &zeta)? - mdp::expected_return(&prev, &zeta)?;
                self.check_referential(&reference, &q_t, delta)?;
                record.delta_t = Some(delta);
                record.max_state_tv = Some(0.0);
                record.pi_t = q_t.clone();
                record.q_t = Some(q_t);
            }
            AgentKind::CdpoConservativeOnly => {
                let models = self.sample_models(t as u64);
                let (pi_t, diag) =
                    agents::conservative_update(&self.pi_prev, &models, gamma, eta, self.spec.sweeps, &zeta)?;
                record.width = self.width(&models)?;
                record.max_state_tv = Some(diag.max_state_tv);
                record.mean_value_before = Some(diag.mean_value_before);
                record.mean_value_after = Some(diag.mean_value_after);
                record.pi_t = pi_t;
            }
            AgentKind::Psrl => {
                let mut stream = rng::stream(self.seed, Purpose::ModelSamples, t as u64);
                record.pi_t = agents::psrl_step(&self.posterior, gamma, &mut stream)?;
            }
            AgentKind::Ofu => {
                let models = self.sample_models(t as u64);
                record.width = self.width(&models)?;
                record.pi_t = agents::ofu_step(&models, gamma, &zeta)?;
            }
            AgentKind::Greedy => {
                record.pi_t = agents::greedy_step(&self.posterior, gamma)?;
            }
        }

        if self.check_invariants {
            if let Some(tv) = record.max_state_tv {
                if tv > eta + TRUST_REGION_SLACK {
                    return Err(self.violation(format!("trust region exceeded: {tv} > {eta}")));
                }
            }
            if let (Some(before), Some(after)) = (record.mean_value_before, record.mean_value_after) {
                if after < before - agents::SAFEGUARD_SLACK {
                    return Err(self.violation(format!("conservative update lost value: {after} < {before}")));
                }
            }
        }

        let mut stream = rng::stream(self.seed, Purpose::Rollout, t as u64);
        let episode = envs::rollout(&self.env, &record.pi_t, t, &mut stream)?;
        self.posterior.update(&episode)?;

        record.regret = true_regret(&self.env, &self.oracle, &record.pi_t)?;
        if self.check_invariants && record.regret < -SOLVER_SLACK {
            return Err(self.violation(format!("negative regret {}", record.regret)));
        }
        self.trace.push(&record);
        record.cum_regret = self.trace.final_cum_regret();

        if let Some(q_t) = &record.q_t {
            self.q_prev = q_t.clone();
        }
        self.pi_prev = record.pi_t.clone();
        self.iteration = t;
        Ok(record)
    }

    /// The referential policy must beat the previous referential and executed
    /// policies under the current reference model.
    fn check_referential(&self, reference: &TabularModel, q_t: &Policy, delta_t: f64) -> Result<()> {
        if !self.check_invariants {
            return Ok(());
        }
        if delta_t < -SOLVER_SLACK {
            return Err(self.violation(format!("referential value decreased: delta = {delta_t}")));
        }
        let zeta = self.env.zeta();
        let gamma = self.spec.gamma;
        let q_value = mdp::expected_return(&mdp::evaluate_policy(reference, q_t, gamma)?, zeta)?;
        let pi_value = mdp::expected_return(&mdp::evaluate_policy(reference, &self.pi_prev, gamma)?, zeta)?;
        if q_value < pi_value - SOLVER_SLACK {
            return Err(self.violation(format!("referential policy worse than previous executed policy: {q_value} < {pi_value}")));
        }
        Ok(())
    }

    /// Runs `iterations` more steps.
    pub fn run(&mut self, iterations: usize) -> Result<&RegretTrace> {
        for _ in 0..iterations {
            self.step()?;
        }
        Ok(&self.trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{build_nchain, LEFT};

    #[test]
    fn optimal_policy_has_zero_regret() {
        let env = build_nchain(5).unwrap();
        let oracle = envs::oracle_solution(&env, 0.97).unwrap();
        assert!(true_regret(&env, &oracle, &oracle.policy).unwrap().abs() < 1e-9);
        let left = Policy::deterministic(&[LEFT; 5], 2).unwrap();
        assert!(true_regret(&env, &oracle, &left).unwrap() > 0.0);
        assert!(true_regret(&env, &oracle, &Policy::uniform(4, 2)).is_err());
    }

    #[test]
    fn concentrated_start_has_no_regret() {
        let env = build_nchain(5).unwrap();
        let post = PosteriorState::concentrated_at(env.model(), 1_000_000_000, Prior::default()).unwrap();
        for kind in AgentKind::ALL {
            if kind == AgentKind::CdpoConservativeOnly {
                continue;
            }
            let spec = AgentSpec { kind, ..AgentSpec::default() };
            let mut run = ExperimentRun::new(env.clone(), spec, Prior::default(), 1)
                .unwrap()
                .with_posterior(post.clone())
                .unwrap();
            let record = run.step().unwrap();
            assert!(record.regret.abs() < 1e-9, "{kind}: {}", record.regret);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let env = build_nchain(4).unwrap();
        for kind in AgentKind::ALL {
            let spec = AgentSpec { kind, n_models: 3, ..AgentSpec::default() };
            let mut a = ExperimentRun::new(env.clone(), spec, Prior::default(), 5).unwrap();
            let mut b = ExperimentRun::new(env.clone(), spec, Prior::default(), 5).unwrap();
            assert_eq!(a.run(15).unwrap(), b.run(15).unwrap());
            a.trace().check_invariants().unwrap();
        }
    }

    #[test]
    fn trace_invariant_detects_bad_prefix() {
        let mut trace = RegretTrace::default();
        trace.per_iter_regret = alloc::vec![1.0, 2.0];
        trace.cum_regret = alloc::vec![1.0, 4.0];
        assert!(trace.check_invariants().is_err());
    }

    #[test]
    fn prior_draw_environment_is_valid_and_seeded() {
        let a = environment_from_prior(4, 2, Prior::default(), 0.1, 8, 3).unwrap();
        let b = environment_from_prior(4, 2, Prior::default(), 0.1, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.horizon(), 8);
    }
}
