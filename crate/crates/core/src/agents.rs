//! Exploration strategies.
//!
//! CDPO alternates a referential update (greedy planning on the posterior-mean
//! model) with a conservative update (improve the ensemble-averaged value
//! while staying within a per-state total-variation ball around the
//! referential policy). PSRL, optimism over a sampled ensemble and greedy
//! mean-model planning are the baselines.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::bayes::PosteriorState;
use crate::error::invalid;
use crate::mdp::{self, Policy, TabularModel};
use crate::Result;

/// Slack allowed by the value safeguard of the conservative update.
pub const SAFEGUARD_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AgentKind {
    Cdpo,
    Psrl,
    Ofu,
    Greedy,
    /// Executes the referential policy `q_t` directly.
    CdpoReferentialOnly,
    /// Conservative update anchored at the previous executed policy.
    CdpoConservativeOnly,
    /// CDPO with the trust region removed (`eta = 1`).
    CdpoUnconstrained,
}

impl AgentKind {
    pub const ALL: [AgentKind; 7] = [
        AgentKind::Cdpo,
        AgentKind::Psrl,
        AgentKind::Ofu,
        AgentKind::Greedy,
        AgentKind::CdpoReferentialOnly,
        AgentKind::CdpoConservativeOnly,
        AgentKind::CdpoUnconstrained,
    ];

    /// Command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            AgentKind::Cdpo => "cdpo",
            AgentKind::Psrl => "psrl",
            AgentKind::Ofu => "ofu",
            AgentKind::Greedy => "greedy",
            AgentKind::CdpoReferentialOnly => "cdpo-ref-only",
            AgentKind::CdpoConservativeOnly => "cdpo-cons-only",
            AgentKind::CdpoUnconstrained => "cdpo-uncon",
        }
    }

    /// Whether the agent runs a referential update each iteration.
    pub fn has_referential_step(self) -> bool {
        matches!(self, AgentKind::Cdpo | AgentKind::CdpoReferentialOnly | AgentKind::CdpoUnconstrained)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for AgentKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "cdpo" => AgentKind::Cdpo,
            "psrl" => AgentKind::Psrl,
            "ofu" => AgentKind::Ofu,
            "greedy" => AgentKind::Greedy,
            "cdpo-ref-only" | "cdpo_referential_only" => AgentKind::CdpoReferentialOnly,
            "cdpo-cons-only" | "cdpo_conservative_only" => AgentKind::CdpoConservativeOnly,
            "cdpo-uncon" | "cdpo_unconstrained" => AgentKind::CdpoUnconstrained,
            other => return Err(invalid!("unknown agent {other:?}")),
        };
        Ok(kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AgentSpec {
    pub kind: AgentKind,
    /// Per-state total-variation radius of the conservative update.
    pub eta: f64,
    /// Number of posterior models sampled per iteration.
    pub n_models: usize,
    /// Improvement sweeps of the conservative update.
    pub sweeps: usize,
    pub gamma: f64,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self { kind: AgentKind::Cdpo, eta: 0.2, n_models: 10, sweeps: 3, gamma: 0.97 }
    }
}

impl AgentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(invalid!("eta must lie in [0, 1], got {}", self.eta));
        }
        if self.n_models == 0 {
            return Err(invalid!("n_models must be at least 1"));
        }
        if self.sweeps == 0 {
            return Err(invalid!("sweeps must be at least 1"));
        }
        mdp::check_gamma(self.gamma)
    }

    /// The trust-region radius actually applied.
    pub fn effective_eta(&self) -> f64 {
        match self.kind {
            AgentKind::CdpoUnconstrained => 1.0,
            _ => self.eta,
        }
    }
}

/// Greedy planning under the reference model.
pub fn referential_update(reference: &TabularModel, gamma: f64) -> Result<Policy> {
    Ok(mdp::policy_iteration(reference, gamma)?.0)
}

/// Maximizes `sum_a p(a) qbar(a)` over distributions `p` within total-variation
/// distance `eta` of `q_row`: up to `eta` mass is drained from the
/// lowest-valued actions first and placed on the best action (lowest index
/// among ties).
pub fn conservative_state_step(q_row: &[f64], qbar_row: &[f64], eta: f64) -> Vec<f64> {
    debug_assert_eq!(q_row.len(), qbar_row.len());
    let mut p = q_row.to_vec();
    let best = mdp::argmax_lowest(qbar_row);
    let mut order: Vec<usize> = (0..p.len()).filter(|&a| qbar_row[a] < qbar_row[best]).collect();
    order.sort_by(|&x, &y| qbar_row[x].total_cmp(&qbar_row[y]));
    let mut budget = eta;
    for a in order {
        if budget <= 0.0 {
            break;
        }
        let moved = p[a].min(budget);
        p[a] -= moved;
        p[best] += moved;
        budget -= moved;
    }
    p
}

/// Average over models of `sum_s zeta(s) V^f_pi(s)`.
pub fn mean_expected_return(models: &[TabularModel], policy: &Policy, gamma: f64, zeta: &[f64]) -> Result<f64> {
    if models.is_empty() {
        return Err(invalid!("model list is empty"));
    }
    let mut total = 0.0;
    for model in models {
        let bundle = mdp::evaluate_policy(model, policy, gamma)?;
        total += mdp::expected_return(&bundle, zeta)?;
    }
    Ok(total / models.len() as f64)
}

fn averaged_q(models: &[TabularModel], policy: &Policy, gamma: f64) -> Result<Vec<f64>> {
    let mut qbar = alloc::vec![0.0; policy.n_states() * policy.n_actions()];
    for model in models {
        let bundle = mdp::evaluate_policy(model, policy, gamma)?;
        for (acc, q) in qbar.iter_mut().zip(bundle.q_table()) {
            *acc += q;
        }
    }
    let n = models.len() as f64;
    qbar.iter_mut().for_each(|x| *x /= n);
    Ok(qbar)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservativeDiagnostics {
    /// Largest per-state TV distance between the returned policy and the anchor.
    pub max_state_tv: f64,
    /// Ensemble-averaged expected return of the anchor.
    pub mean_value_before: f64,
    /// Ensemble-averaged expected return of the returned policy.
    pub mean_value_after: f64,
    /// False when the safeguard rejected the candidate and the anchor was returned.
    pub accepted: bool,
    pub sweeps_run: usize,
}

/// Constrained improvement of `anchor` against an ensemble.
///
/// Each sweep evaluates the running candidate under every model, averages the
/// Q-values and re-solves every state's trust-region step. The region is
/// always centred on `anchor`. The candidate is kept only if its averaged
/// expected return does not fall below the anchor's.
pub fn conservative_update(
    anchor: &Policy,
    models: &[TabularModel],
    gamma: f64,
    eta: f64,
    sweeps: usize,
    zeta: &[f64],
) -> Result<(Policy, ConservativeDiagnostics)> {
    if models.is_empty() {
        return Err(invalid!("conservative update needs at least one model"));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(invalid!("eta must lie in [0, 1], got {eta}"));
    }
    let (ns, na) = (anchor.n_states(), anchor.n_actions());
    let mut candidate = anchor.clone();
    let mut sweeps_run = 0;
    for _ in 0..sweeps {
        sweeps_run += 1;
        let qbar = averaged_q(models, &candidate, gamma)?;
        let mut probs = Vec::with_capacity(ns * na);
        for s in 0..ns {
            probs.extend(conservative_state_step(anchor.row(s), &qbar[s * na..(s + 1) * na], eta));
        }
        let next = Policy::from_rows_unchecked(ns, na, probs);
        if next == candidate {
            break;
        }
        candidate = next;
    }
    let before = mean_expected_return(models, anchor, gamma, zeta)?;
    let after = mean_expected_return(models, &candidate, gamma, zeta)?;
    let accepted = after >= before - SAFEGUARD_SLACK;
    let (policy, after) = if accepted { (candidate, after) } else { (anchor.clone(), before) };
    let diagnostics = ConservativeDiagnostics {
        max_state_tv: policy.max_state_tv(anchor)?,
        mean_value_before: before,
        mean_value_after: after,
        accepted,
        sweeps_run,
    };
    Ok((policy, diagnostics))
}

/// One full CDPO iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CdpoIterationResult {
    pub q_t: Policy,
    pub pi_t: Policy,
    /// `E_zeta[V^ref_{q_t} - V^ref_{q_prev}]` under the current reference model.
    pub delta_t: f64,
    pub mean_sampled_value_before: f64,
    pub mean_sampled_value_after: f64,
    pub max_state_tv: f64,
    pub accepted: bool,
}

/// Referential update on `reference`, then conservative update of `q_t`
/// against `models`. `q_prev` is the previous referential policy.
pub fn cdpo_iteration(
    reference: &TabularModel,
    models: &[TabularModel],
    q_prev: &Policy,
    eta: f64,
    sweeps: usize,
    gamma: f64,
    zeta: &[f64],
) -> Result<CdpoIterationResult> {
    let (q_t, q_values) = mdp::policy_iteration(reference, gamma)?;
    let prev_values = mdp::evaluate_policy(reference, q_prev, gamma)?;
    let delta_t = mdp::expected_return(&q_values, zeta)? - mdp::expected_return(&prev_values, zeta)?;
    let (pi_t, diag) = conservative_update(&q_t, models, gamma, eta, sweeps, zeta)?;
    Ok(CdpoIterationResult {
        q_t,
        pi_t,
        delta_t,
        mean_sampled_value_before: diag.mean_value_before,
        mean_sampled_value_after: diag.mean_value_after,
        max_state_tv: diag.max_state_tv,
        accepted: diag.accepted,
    })
}

/// Posterior sampling: plan optimally in one sampled model.
pub fn psrl_step<R: Rng + ?Sized>(post: &PosteriorState, gamma: f64, rng: &mut R) -> Result<Policy> {
    let model = post.sample_model(rng);
    Ok(mdp::policy_iteration(&model, gamma)?.0)
}

/// Optimism over an ensemble: the optimal policy of the model whose optimal
/// expected return is largest (first model among ties).
pub fn ofu_step(models: &[TabularModel], gamma: f64, zeta: &[f64]) -> Result<Policy> {
    let mut best: Option<(f64, Policy)> = None;
    for model in models {
        let (policy, bundle) = mdp::policy_iteration(model, gamma)?;
        let value = mdp::expected_return(&bundle, zeta)?;
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, policy));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| invalid!("optimism needs at least one model"))
}

/// Greedy planning on the posterior-mean model.
pub fn greedy_step(post: &PosteriorState, gamma: f64) -> Result<Policy> {
    referential_update(&post.mean_model(), gamma)
}
