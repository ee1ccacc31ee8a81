//! Tabular environments: the N-Chain family and generic validated MDPs with
//! Gaussian reward noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::invalid;
use crate::mdp::{self, check_initial_distribution, ModelTag, Policy, TabularModel, ValueBundle};
use crate::Result;

/// Action indices of the chain.
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Derived parameters of an N-Chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NChainParams {
    pub n: usize,
    /// Reward-noise scale `0.1 * exp(-n / 4)`.
    pub delta: f64,
    /// Probability that `right` moves as intended, `1 - 1/n`.
    pub success_prob: f64,
}

impl NChainParams {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(invalid!("chain length must be at least 2, got {n}"));
        }
        let nf = n as f64;
        Ok(Self { n, delta: 0.1 * libm::exp(-nf / 4.0), success_prob: 1.0 - 1.0 / nf })
    }

    /// Default episode length, long enough to cross the chain and come back.
    pub fn default_horizon(&self) -> usize {
        2 * self.n
    }
}

/// The true dynamics together with reward noise, start distribution and
/// episode length.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    model: TabularModel,
    reward_std: Vec<f64>,
    zeta: Vec<f64>,
    horizon: usize,
}

impl Environment {
    pub fn new(model: TabularModel, reward_std: Vec<f64>, zeta: Vec<f64>, horizon: usize) -> Result<Self> {
        model.validate()?;
        if reward_std.len() != model.transitions().len() {
            return Err(invalid!(
                "reward_std has {} entries, expected {}",
                reward_std.len(),
                model.transitions().len()
            ));
        }
        if let Some(bad) = reward_std.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(invalid!("reward_std entry {bad} is not a finite non-negative number"));
        }
        check_initial_distribution(&zeta, model.n_states())?;
        if horizon == 0 {
            return Err(invalid!("horizon must be at least 1"));
        }
        Ok(Self { model: model.with_tag(ModelTag::TrueEnv), reward_std, zeta, horizon })
    }

    pub fn model(&self) -> &TabularModel {
        &self.model
    }

    pub fn n_states(&self) -> usize {
        self.model.n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.model.n_actions()
    }

    /// Flat `[s][a][s']` reward standard deviations.
    pub fn reward_std(&self) -> &[f64] {
        &self.reward_std
    }

    pub fn zeta(&self) -> &[f64] {
        &self.zeta
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid!("horizon must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }
}

/// One observed step of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    /// Iteration (episode) index.
    pub t: usize,
    /// Step within the episode.
    pub h: usize,
}

/// Builds the N-Chain: states `s1..sN` map to indices `0..n`, actions are
/// [`LEFT`] and [`RIGHT`], and the agent starts at `s1`.
///
/// `left` always moves one state left (self-loop at `s1`) with reward
/// `N(0, delta^2)`. `right` below `sN` moves right with probability
/// `1 - 1/n` (otherwise left) at reward `N(-delta, delta^2)`. `right` at `sN`
/// returns to `s1` with probability `1 - 1/n` (otherwise left) at reward
/// `N(1, delta^2)`.
pub fn build_nchain(n: usize) -> Result<Environment> {
    let params = NChainParams::new(n)?;
    let (na, len) = (2, n * 2 * n);
    let mut transition = vec![0.0; len];
    let mut reward_mean = vec![0.0; len];
    let idx = |s: usize, a: usize, s2: usize| (s * na + a) * n + s2;
    let left_of = |s: usize| s.saturating_sub(1);
    let p = params.success_prob;
    for s in 0..n {
        transition[idx(s, LEFT, left_of(s))] = 1.0;
        let (target, reward) = if s + 1 < n { (s + 1, -params.delta) } else { (0, 1.0) };
        transition[idx(s, RIGHT, target)] += p;
        transition[idx(s, RIGHT, left_of(s))] += 1.0 - p;
        for s2 in 0..n {
            reward_mean[idx(s, RIGHT, s2)] = reward;
        }
    }
    let model = TabularModel::new(n, na, transition, reward_mean, ModelTag::TrueEnv)?;
    let mut zeta = vec![0.0; n];
    zeta[0] = 1.0;
    Environment::new(model, vec![params.delta; len], zeta, params.default_horizon())
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total; fall back to the last supported index.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Runs one episode of `env.horizon()` steps from a fresh start state.
pub fn rollout<R: Rng + ?Sized>(
    env: &Environment,
    policy: &Policy,
    iteration: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    if policy.n_states() != env.n_states() || policy.n_actions() != env.n_actions() {
        return Err(invalid!(
            "policy is {}x{} but environment is {}x{}",
            policy.n_states(),
            policy.n_actions(),
            env.n_states(),
            env.n_actions()
        ));
    }
    let model = &env.model;
    let ns = model.n_states();
    let mut s = sample_index(&env.zeta, rng);
    let mut out = Vec::with_capacity(env.horizon);
    for h in 0..env.horizon {
        let a = sample_index(policy.row(s), rng);
        let s_next = sample_index(model.transition_row(s, a), rng);
        let k = (s * model.n_actions() + a) * ns + s_next;
        let noise = Normal::new(model.reward_means()[k], env.reward_std[k])
            .map_err(|e| invalid!("reward distribution at ({s}, {a}, {s_next}): {e}"))?;
        let r = noise.sample(rng);
        out.push(Transition { s, a, r, s_next, t: iteration, h });
        s = s_next;
    }
    Ok(out)
}

/// The optimal policy and its values on the true model.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub policy: Policy,
    pub values: ValueBundle,
    pub gamma: f64,
}

impl OracleSolution {
    /// `sum_s zeta(s) V*(s)`.
    pub fn optimal_return(&self, zeta: &[f64]) -> Result<f64> {
        mdp::expected_return(&self.values, zeta)
    }
}

pub fn oracle_solution(env: &Environment, gamma: f64) -> Result<OracleSolution> {
    let (policy, values) = mdp::policy_iteration(&env.model, gamma)?;
    Ok(OracleSolution { policy, values, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    #[test]
    fn eight_chain_parameters() {
        let p = NChainParams::new(8).unwrap();
        assert_eq!(p.success_prob, 0.875);
        assert!((p.delta - 0.1 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((p.delta - 0.0135335).abs() < 1e-7);
        assert!(NChainParams::new(1).is_err());
    }

    #[test]
    fn eight_chain_rewards() {
        let env = build_nchain(8).unwrap();
        let m = env.model();
        assert_eq!(m.expected_reward(7, RIGHT), 1.0);
        for s in 0..8 {
            assert_eq!(m.expected_reward(s, LEFT), 0.0);
        }
        let delta = NChainParams::new(8).unwrap().delta;
        assert!((m.expected_reward(3, RIGHT) + delta).abs() < 1e-15);
        assert!(env.reward_std().iter().all(|&x| x == delta));
        assert_eq!(env.horizon(), 16);
        assert_eq!(env.zeta()[0], 1.0);
    }

    #[test]
    fn chain_boundaries() {
        let env = build_nchain(4).unwrap();
        let m = env.model();
        assert_eq!(m.transition_row(0, LEFT), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.transition_row(0, RIGHT), &[0.25, 0.75, 0.0, 0.0]);
        assert_eq!(m.transition_row(3, RIGHT), &[0.75, 0.0, 0.25, 0.0]);
        let two = build_nchain(2).unwrap();
        assert_eq!(two.model().transition_row(1, RIGHT), &[1.0, 0.0]);
    }

    #[test]
    fn chain_rows_are_distributions() {
        for n in 2..=64 {
            build_nchain(n).unwrap().model().validate().unwrap();
        }
    }

    #[test]
    fn right_is_optimal_on_short_chains() {
        for n in 2..=15 {
            let oracle = oracle_solution(&build_nchain(n).unwrap(), 0.97).unwrap();
            assert_eq!(oracle.policy.actions().unwrap(), vec![RIGHT; n], "n = {n}");
        }
    }

    #[test]
    fn zero_reward_env_has_zero_value() {
        let env = build_nchain(5).unwrap();
        let model = env.model().map_rewards(|_| 0.0);
        let env = Environment::new(model, env.reward_std().to_vec(), env.zeta().to_vec(), 3).unwrap();
        let oracle = oracle_solution(&env, 0.9).unwrap();
        assert!(oracle.values.v().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_state_rollout() {
        let model = TabularModel::new(1, 1, vec![1.0], vec![0.5], ModelTag::TrueEnv).unwrap();
        let env = Environment::new(model, vec![0.0], vec![1.0], 3).unwrap();
        let mut rng = StreamRng::seed_from_u64(0);
        let steps = rollout(&env, &Policy::uniform(1, 1), 4, &mut rng).unwrap();
        assert_eq!(steps.len(), 3);
        for (h, tr) in steps.iter().enumerate() {
            assert_eq!((tr.s, tr.a, tr.s_next, tr.t, tr.h), (0, 0, 0, 4, h));
            assert_eq!(tr.r, 0.5);
        }
    }

    #[test]
    fn rollout_is_deterministic_per_seed() {
        let env = build_nchain(6).unwrap();
        let policy = Policy::uniform(6, 2);
        let a = rollout(&env, &policy, 0, &mut StreamRng::seed_from_u64(9)).unwrap();
        let b = rollout(&env, &policy, 0, &mut StreamRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(rollout(&env, &Policy::uniform(5, 2), 0, &mut StreamRng::seed_from_u64(9)).is_err());
    }

    #[test]
    fn environment_validation() {
        let model = TabularModel::new(1, 1, vec![1.0], vec![0.0], ModelTag::Sampled).unwrap();
        assert!(Environment::new(model.clone(), vec![-1.0], vec![1.0], 1).is_err());
        assert!(Environment::new(model.clone(), vec![0.0], vec![0.5], 1).is_err());
        assert!(Environment::new(model.clone(), vec![0.0], vec![1.0], 0).is_err());
        let env = Environment::new(model, vec![0.0], vec![1.0], 1).unwrap();
        assert_eq!(env.model().tag(), ModelTag::TrueEnv);
    }
}
