//! Exact discounted tabular-MDP mathematics.
//!
//! All tables are stored flat and row-major: transitions and per-outcome
//! rewards are indexed `[s][a][s']`, policies and Q-values `[s][a]`.
//! Planning always uses the expected reward `r(s, a) = sum_s' P(s'|s,a) r(s,a,s')`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::invalid;
use crate::linalg::{self, Side};
use crate::{Error, Result};

/// Tolerance applied when validating that a row is a probability distribution.
pub const ROW_TOLERANCE: f64 = 1e-9;

/// Relative tolerance under which two Q-values count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Where a model came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelTag {
    TrueEnv,
    Sampled,
    Reference,
}

/// One candidate MDP: transition probabilities and mean rewards per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward_mean: Vec<f64>,
    tag: ModelTag,
}

impl TabularModel {
    /// Builds a model from flat `[s][a][s']` tables, validating every row.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward_mean: Vec<f64>,
        tag: ModelTag,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(invalid!("model needs at least one state and one action"));
        }
        let len = n_states * n_actions * n_states;
        if transition.len() != len || reward_mean.len() != len {
            return Err(invalid!(
                "expected {len} transition and reward entries, got {} and {}",
                transition.len(),
                reward_mean.len()
            ));
        }
        let model = Self { n_states, n_actions, transition, reward_mean, tag };
        model.validate()?;
        Ok(model)
    }

    /// Constructs without validation; callers guarantee stochastic rows.
    pub(crate) fn from_parts(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward_mean: Vec<f64>,
        tag: ModelTag,
    ) -> Self {
        debug_assert_eq!(transition.len(), n_states * n_actions * n_states);
        debug_assert_eq!(reward_mean.len(), transition.len());
        Self { n_states, n_actions, transition, reward_mean, tag }
    }

    /// A random model: rows with i.i.d. uniform weights, rewards uniform in `[-1, 1]`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        let len = n_states * n_actions * n_states;
        let mut transition = Vec::with_capacity(len);
        for _ in 0..n_states * n_actions {
            let weights: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = weights.iter().sum();
            transition.extend(weights.iter().map(|w| w / total));
        }
        let reward_mean = (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Self::from_parts(n_states, n_actions, transition, reward_mean, ModelTag::TrueEnv)
    }

    /// Checks that every row is a distribution and every reward finite.
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let row = self.transition_row(s, a);
                if let Err(what) = check_distribution(row) {
                    return Err(invalid!("transition row (s={s}, a={a}) {what}"));
                }
                if self.reward_row(s, a).iter().any(|r| !r.is_finite()) {
                    return Err(invalid!("reward row (s={s}, a={a}) has a non-finite entry"));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn tag(&self) -> ModelTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: ModelTag) -> Self {
        self.tag = tag;
        self
    }

    fn row_offset(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.row_offset(s, a);
        &self.transition[start..start + self.n_states]
    }

    pub fn reward_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.row_offset(s, a);
        &self.reward_mean[start..start + self.n_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward_means(&self) -> &[f64] {
        &self.reward_mean
    }

    /// Expected immediate reward `sum_s' P(s'|s,a) r(s,a,s')`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        dot(self.transition_row(s, a), self.reward_row(s, a))
    }

    /// Returns a copy with every per-outcome reward mapped through `f`.
    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.reward_mean.iter_mut().for_each(|r| *r = f(*r));
        out
    }

    /// Returns a copy with the transition table of `other` and own rewards.
    pub fn with_transitions_of(&self, other: &TabularModel) -> Result<Self> {
        if other.n_states != self.n_states || other.n_actions != self.n_actions {
            return Err(invalid!("models disagree on dimensions"));
        }
        let mut out = self.clone();
        out.transition.clone_from(&other.transition);
        Ok(out)
    }

    fn check_policy(&self, policy: &Policy) -> Result<()> {
        if policy.n_states != self.n_states || policy.n_actions != self.n_actions {
            return Err(invalid!(
                "policy is {}x{} but model is {}x{}",
                policy.n_states,
                policy.n_actions,
                self.n_states,
                self.n_actions
            ));
        }
        Ok(())
    }
}

/// A stochastic tabular policy `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || probs.len() != n_states * n_actions {
            return Err(invalid!(
                "policy table has {} entries, expected {n_states}x{n_actions}",
                probs.len()
            ));
        }
        let policy = Self { n_states, n_actions, probs };
        for s in 0..n_states {
            if let Err(what) = check_distribution(policy.row(s)) {
                return Err(invalid!("policy row s={s} {what}"));
            }
        }
        Ok(policy)
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    /// One-hot policy selecting `actions[s]` at state `s`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(invalid!("action {a} at state {s} out of range"));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::new(actions.len(), n_actions, probs)
    }

    pub(crate) fn from_rows_unchecked(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), n_states * n_actions);
        Self { n_states, n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The selected action at every state, if the policy is one-hot.
    pub fn actions(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|s| {
                let row = self.row(s);
                row.iter().position(|&p| p == 1.0).filter(|_| row.iter().filter(|&&p| p != 0.0).count() == 1)
            })
            .collect()
    }

    /// Largest per-state total-variation distance to `other`.
    pub fn max_state_tv(&self, other: &Policy) -> Result<f64> {
        if self.n_states != other.n_states || self.n_actions != other.n_actions {
            return Err(invalid!("policies disagree on dimensions"));
        }
        (0..self.n_states).try_fold(0.0f64, |acc, s| Ok(acc.max(tv_distance(self.row(s), other.row(s))?)))
    }
}

/// `V`, `Q` and advantage tables of one policy on one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueBundle {
    v: Vec<f64>,
    q: Vec<f64>,
    advantage: Vec<f64>,
    n_actions: usize,
    gamma: f64,
}

impl ValueBundle {
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Flat `[s][a]` Q table.
    pub fn q_table(&self) -> &[f64] {
        &self.q
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.advantage[s * self.n_actions + a]
    }

    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Discounted state and state-action occupancy measures.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationMeasures {
    nu: Vec<f64>,
    rho: Vec<f64>,
    n_actions: usize,
    gamma: f64,
}

impl VisitationMeasures {
    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn rho(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    pub fn rho_table(&self) -> &[f64] {
        &self.rho
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(invalid!("discount must lie in (0, 1), got {gamma}"))
    }
}

fn check_distribution(row: &[f64]) -> core::result::Result<(), alloc::string::String> {
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(alloc::format!("has invalid probability {p}"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOLERANCE {
        return Err(alloc::format!("sums to {total}"));
    }
    Ok(())
}

/// Validates `zeta` as a distribution over `n_states` states.
pub fn check_initial_distribution(zeta: &[f64], n_states: usize) -> Result<()> {
    if zeta.len() != n_states {
        return Err(invalid!("initial distribution has {} entries for {n_states} states", zeta.len()));
    }
    check_distribution(zeta).map_err(|what| invalid!("initial distribution {what}"))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// State-to-state matrix `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`, row-major.
pub fn policy_transition_matrix(model: &TabularModel, policy: &Policy) -> Result<Vec<f64>> {
    model.check_policy(policy)?;
    let n = model.n_states;
    let mut m = vec![0.0; n * n];
    for s in 0..n {
        let out = &mut m[s * n..(s + 1) * n];
        for (a, &p) in policy.row(s).iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, t) in out.iter_mut().zip(model.transition_row(s, a)) {
                *o += p * t;
            }
        }
    }
    Ok(m)
}

/// Expected one-step reward per state under `policy`.
pub fn policy_rewards(model: &TabularModel, policy: &Policy) -> Result<Vec<f64>> {
    model.check_policy(policy)?;
    Ok((0..model.n_states)
        .map(|s| policy.row(s).iter().enumerate().map(|(a, p)| p * model.expected_reward(s, a)).sum())
        .collect())
}

/// Exact policy evaluation: solves `V = r_pi + gamma P_pi V` and derives `Q`
/// and the advantage.
pub fn evaluate_policy(model: &TabularModel, policy: &Policy, gamma: f64) -> Result<ValueBundle> {
    check_gamma(gamma)?;
    model.validate()?;
    model.check_policy(policy)?;
    for s in 0..policy.n_states {
        if let Err(what) = check_distribution(policy.row(s)) {
            return Err(invalid!("policy row s={s} {what}"));
        }
    }
    evaluate_unchecked(model, policy, gamma)
}

pub(crate) fn evaluate_unchecked(model: &TabularModel, policy: &Policy, gamma: f64) -> Result<ValueBundle> {
    let n = model.n_states;
    let p_pi = policy_transition_matrix(model, policy)?;
    let r_pi = policy_rewards(model, policy)?;
    let v = linalg::solve_discounted(&p_pi, n, gamma, &r_pi, Side::Right)?;
    Ok(bundle_from_values(model, policy, gamma, v))
}

fn bundle_from_values(model: &TabularModel, policy: &Policy, gamma: f64, v: Vec<f64>) -> ValueBundle {
    let na = model.n_actions;
    let mut q = vec![0.0; model.n_states * na];
    for s in 0..model.n_states {
        for a in 0..na {
            q[s * na + a] = model.expected_reward(s, a) + gamma * dot(model.transition_row(s, a), &v);
        }
    }
    // Centre the advantage on the exact policy average of Q so that
    // sum_a pi(a|s) A(s,a) vanishes up to rounding.
    let mut advantage = vec![0.0; q.len()];
    for s in 0..model.n_states {
        let baseline = dot(policy.row(s), &q[s * na..(s + 1) * na]);
        for a in 0..na {
            advantage[s * na + a] = q[s * na + a] - baseline;
        }
    }
    ValueBundle { v, q, advantage, n_actions: na, gamma }
}

/// Lowest-index action whose value is within the tie tolerance of the row maximum.
pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * (1.0 + max.abs());
    row.iter().position(|&x| x >= max - tol).unwrap_or(0)
}

/// Howard policy iteration with exact evaluation. Returns a one-hot optimal
/// policy (ties toward the lowest action index) and its values.
pub fn policy_iteration(model: &TabularModel, gamma: f64) -> Result<(Policy, ValueBundle)> {
    check_gamma(gamma)?;
    model.validate()?;
    let (ns, na) = (model.n_states, model.n_actions);
    let mut actions: Vec<usize> = (0..ns)
        .map(|s| {
            let immediate: Vec<f64> = (0..na).map(|a| model.expected_reward(s, a)).collect();
            argmax_lowest(&immediate)
        })
        .collect();
    let max_rounds = ns * na + 100;
    for _ in 0..max_rounds {
        let policy = Policy::deterministic(&actions, na)?;
        let bundle = evaluate_unchecked(model, &policy, gamma)?;
        let scale = 1.0 + bundle.q.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut improved = false;
        for (s, current) in actions.iter_mut().enumerate() {
            let row = bundle.q_row(s);
            let best = argmax_lowest(row);
            if row[best] > row[*current] + TIE_TOLERANCE * scale {
                *current = best;
                improved = true;
            }
        }
        if improved {
            continue;
        }
        let tie_broken: Vec<usize> = (0..ns).map(|s| argmax_lowest(bundle.q_row(s))).collect();
        if tie_broken == actions {
            return Ok((policy, bundle));
        }
        let policy = Policy::deterministic(&tie_broken, na)?;
        let bundle = evaluate_unchecked(model, &policy, gamma)?;
        return Ok((policy, bundle));
    }
    Err(Error::Internal(alloc::format!("policy iteration did not converge in {max_rounds} rounds")))
}

/// Discounted occupancy `nu = (1 - gamma) zeta^T (I - gamma P_pi)^-1` and
/// `rho(s, a) = nu(s) pi(a|s)`.
pub fn visitation(model: &TabularModel, policy: &Policy, gamma: f64, zeta: &[f64]) -> Result<VisitationMeasures> {
    check_gamma(gamma)?;
    model.check_policy(policy)?;
    check_initial_distribution(zeta, model.n_states)?;
    let n = model.n_states;
    let p_pi = policy_transition_matrix(model, policy)?;
    let occupancy = linalg::solve_discounted(&p_pi, n, gamma, zeta, Side::Left)?;
    let mut nu: Vec<f64> = occupancy.iter().map(|x| (1.0 - gamma) * x).collect();
    let total: f64 = nu.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Internal("degenerate visitation measure".into()));
    }
    nu.iter_mut().for_each(|x| *x /= total);
    let na = model.n_actions;
    let mut rho = vec![0.0; n * na];
    for s in 0..n {
        for a in 0..na {
            rho[s * na + a] = nu[s] * policy.prob(s, a);
        }
    }
    Ok(VisitationMeasures { nu, rho, n_actions: na, gamma })
}

/// Total-variation distance with the half-L1 convention.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid!("distributions have lengths {} and {}", p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `sum_s zeta(s) V(s)`.
pub fn expected_return(bundle: &ValueBundle, zeta: &[f64]) -> Result<f64> {
    if zeta.len() != bundle.v.len() {
        return Err(invalid!("initial distribution has {} entries for {} states", zeta.len(), bundle.v.len()));
    }
    Ok(dot(zeta, &bundle.v))
}
