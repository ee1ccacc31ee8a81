//! Conjugate posterior over tabular MDPs.
//!
//! Transitions at each `(s, a)` carry a Dirichlet over next states; rewards at
//! each `(s, a, s')` carry a Normal-Gamma over the Gaussian reward's mean and
//! precision. Both families are closed under batch updates, so the posterior
//! is a function of the multiset of observed transitions only.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StudentT};

use crate::envs::Transition;
use crate::error::invalid;
use crate::mdp::{self, ModelTag, TabularModel};
use crate::Result;

/// Prior hyperparameters shared by every `(s, a)` / `(s, a, s')` cell.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Prior {
    /// Dirichlet concentration per next state.
    pub alpha0: f64,
    pub mu0: f64,
    pub kappa0: f64,
    pub a0: f64,
    pub b0: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self { alpha0: 1.0, mu0: 0.0, kappa0: 1.0, a0: 1.0, b0: 1.0 }
    }
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let positive = [("alpha0", self.alpha0), ("kappa0", self.kappa0), ("a0", self.a0), ("b0", self.b0)];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid!("prior {name} must be finite and positive, got {value}"));
            }
        }
        if !self.mu0.is_finite() {
            return Err(invalid!("prior mu0 must be finite"));
        }
        Ok(())
    }

    fn normal_gamma(&self) -> NormalGamma {
        NormalGamma { mu: self.mu0, kappa: self.kappa0, a: self.a0, b: self.b0 }
    }
}

/// Normal-Gamma parameters `(mu, kappa, a, b)`: precision `tau ~ Gamma(a, rate b)`
/// and mean `~ N(mu, 1 / (kappa tau))`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormalGamma {
    pub mu: f64,
    pub kappa: f64,
    pub a: f64,
    pub b: f64,
}

impl NormalGamma {
    /// Conjugate update with a batch of observations.
    pub fn update(&self, xs: &[f64]) -> Self {
        if xs.is_empty() {
            return *self;
        }
        let m = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / m;
        let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
        let kappa = self.kappa + m;
        let shift = mean - self.mu;
        Self {
            mu: (self.kappa * self.mu + m * mean) / kappa,
            kappa,
            a: self.a + m / 2.0,
            b: self.b + 0.5 * ss + self.kappa * m * shift * shift / (2.0 * kappa),
        }
    }

    /// Scale of the Student-t marginal of the mean, which has `2a` degrees of freedom.
    pub fn mean_scale(&self) -> f64 {
        libm::sqrt(self.b / (self.a * self.kappa))
    }

    pub fn sample_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let t = StudentT::new(2.0 * self.a).expect("degrees of freedom are positive");
        self.mu + self.mean_scale() * t.sample(rng)
    }
}

/// Sufficient statistics of the posterior `phi(. | H_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    n_states: usize,
    n_actions: usize,
    prior: Prior,
    dirichlet_alpha: Vec<f64>,
    ng: Vec<NormalGamma>,
    n_obs: Vec<u64>,
}

impl PosteriorState {
    /// The prior itself: no observations yet.
    pub fn new(n_states: usize, n_actions: usize, prior: Prior) -> Result<Self> {
        prior.validate()?;
        if n_states == 0 || n_actions == 0 {
            return Err(invalid!("posterior needs at least one state and one action"));
        }
        let len = n_states * n_actions * n_states;
        Ok(Self {
            n_states,
            n_actions,
            prior,
            dirichlet_alpha: vec![prior.alpha0; len],
            ng: vec![prior.normal_gamma(); len],
            n_obs: vec![0; n_states * n_actions],
        })
    }

    /// A posterior that has seen `pseudo_count` noiseless observations of
    /// every `(s, a)` of `model`, split across next states by the model's
    /// probabilities. With a large count it is concentrated at `model`.
    pub fn concentrated_at(model: &TabularModel, pseudo_count: u64, prior: Prior) -> Result<Self> {
        let mut post = Self::new(model.n_states(), model.n_actions(), prior)?;
        let m = pseudo_count as f64;
        for (k, (&p, &r)) in model.transitions().iter().zip(model.reward_means()).enumerate() {
            post.dirichlet_alpha[k] += m * p;
            let ng = post.ng[k];
            let kappa = ng.kappa + m;
            let shift = r - ng.mu;
            post.ng[k] = NormalGamma {
                mu: (ng.kappa * ng.mu + m * r) / kappa,
                kappa,
                a: ng.a + m / 2.0,
                b: ng.b + ng.kappa * m * shift * shift / (2.0 * kappa),
            };
        }
        post.n_obs.fill(pseudo_count);
        Ok(post)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    fn cell(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    /// Dirichlet concentration over next states at `(s, a)`.
    pub fn alpha(&self, s: usize, a: usize) -> &[f64] {
        let start = self.cell(s, a);
        &self.dirichlet_alpha[start..start + self.n_states]
    }

    pub fn normal_gamma(&self, s: usize, a: usize, s_next: usize) -> &NormalGamma {
        &self.ng[self.cell(s, a) + s_next]
    }

    pub fn n_obs(&self, s: usize, a: usize) -> u64 {
        self.n_obs[s * self.n_actions + a]
    }

    pub fn n_obs_table(&self) -> &[u64] {
        &self.n_obs
    }

    /// Folds a batch of transitions into the posterior. The result depends
    /// only on the multiset of transitions seen so far, not on batching or
    /// order (up to floating-point rounding in the Normal-Gamma terms).
    pub fn update(&mut self, batch: &[Transition]) -> Result<()> {
        for tr in batch {
            if tr.s >= self.n_states || tr.s_next >= self.n_states || tr.a >= self.n_actions {
                return Err(invalid!("transition ({}, {}, {}) out of range", tr.s, tr.a, tr.s_next));
            }
            if !tr.r.is_finite() {
                return Err(invalid!("non-finite reward at ({}, {}, {})", tr.s, tr.a, tr.s_next));
            }
        }
        let mut rewards: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for tr in batch {
            let k = self.cell(tr.s, tr.a) + tr.s_next;
            self.dirichlet_alpha[k] += 1.0;
            self.n_obs[tr.s * self.n_actions + tr.a] += 1;
            rewards.entry(k).or_default().push(tr.r);
        }
        for (k, xs) in rewards {
            self.ng[k] = self.ng[k].update(&xs);
        }
        Ok(())
    }

    /// Draws one model: Dirichlet transition rows and Student-t reward means.
    pub fn sample_model<R: Rng + ?Sized>(&self, rng: &mut R) -> TabularModel {
        let ns = self.n_states;
        let len = self.dirichlet_alpha.len();
        let mut transition = Vec::with_capacity(len);
        let mut reward_mean = Vec::with_capacity(len);
        for cell in (0..len).step_by(ns) {
            let alpha = &self.dirichlet_alpha[cell..cell + ns];
            let draws: Vec<f64> = alpha
                .iter()
                .map(|&x| Gamma::new(x, 1.0).expect("concentrations are positive").sample(rng))
                .collect();
            let total: f64 = draws.iter().sum();
            if total > 0.0 && total.is_finite() {
                transition.extend(draws.iter().map(|d| d / total));
            } else {
                // Every gamma draw underflowed; fall back to the largest concentration.
                let top = mdp::argmax_lowest(alpha);
                transition.extend((0..ns).map(|i| if i == top { 1.0 } else { 0.0 }));
            }
            reward_mean.extend(self.ng[cell..cell + ns].iter().map(|ng| ng.sample_mean(rng)));
        }
        TabularModel::from_parts(ns, self.n_actions, transition, reward_mean, ModelTag::Sampled)
    }

    pub fn sample_models<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<TabularModel> {
        (0..count).map(|_| self.sample_model(rng)).collect()
    }

    /// Posterior-mean model: Dirichlet means and Normal-Gamma location parameters.
    pub fn mean_model(&self) -> TabularModel {
        let ns = self.n_states;
        let mut transition = Vec::with_capacity(self.dirichlet_alpha.len());
        for row in self.dirichlet_alpha.chunks(ns) {
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|x| x / total));
        }
        let reward_mean = self.ng.iter().map(|ng| ng.mu).collect();
        TabularModel::from_parts(ns, self.n_actions, transition, reward_mean, ModelTag::Reference)
    }

    /// Checks positivity of all parameters and the count bookkeeping.
    pub fn check_invariants(&self) -> Result<()> {
        if self.dirichlet_alpha.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(invalid!("non-positive Dirichlet concentration"));
        }
        if self.ng.iter().any(|ng| !(ng.kappa > 0.0 && ng.a > 0.0 && ng.b > 0.0)) {
            return Err(invalid!("non-positive Normal-Gamma parameter"));
        }
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let added: f64 = self.alpha(s, a).iter().map(|x| x - self.prior.alpha0).sum();
                let n = self.n_obs(s, a) as f64;
                if (added - n).abs() > 1e-6 * (1.0 + n) {
                    return Err(invalid!("count mismatch at ({s}, {a}): {added} vs {n}"));
                }
            }
        }
        Ok(())
    }
}

/// Largest pairwise L1 distance between the models' transition rows at `(s, a)`.
pub fn ensemble_width(models: &[TabularModel], s: usize, a: usize) -> Result<f64> {
    if models.len() < 2 {
        return Err(invalid!("ensemble width needs at least two models, got {}", models.len()));
    }
    let (ns, na) = (models[0].n_states(), models[0].n_actions());
    if models.iter().any(|m| m.n_states() != ns || m.n_actions() != na) {
        return Err(invalid!("ensemble models disagree on dimensions"));
    }
    if s >= ns || a >= na {
        return Err(invalid!("({s}, {a}) out of range"));
    }
    let mut width: f64 = 0.0;
    for (i, m1) in models.iter().enumerate() {
        for m2 in &models[i + 1..] {
            let l1: f64 = m1.transition_row(s, a).iter().zip(m2.transition_row(s, a)).map(|(x, y)| (x - y).abs()).sum();
            width = width.max(l1);
        }
    }
    Ok(width)
}

/// Spread of optimal Q-values across posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct QSnapshot {
    pub iteration: usize,
    pub k: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// Flat `[s][a]` tables.
    pub mean_q: Vec<f64>,
    pub std_q: Vec<f64>,
    pub n_obs: Vec<u64>,
}

impl QSnapshot {
    pub fn mean(&self, s: usize, a: usize) -> f64 {
        self.mean_q[s * self.n_actions + a]
    }

    pub fn std(&self, s: usize, a: usize) -> f64 {
        self.std_q[s * self.n_actions + a]
    }
}

/// Draws `k` models, solves each optimally and reports the per-`(s, a)` mean
/// and sample standard deviation of the optimal Q-values.
pub fn q_posterior_snapshot<R: Rng + ?Sized>(
    post: &PosteriorState,
    k: usize,
    gamma: f64,
    iteration: usize,
    rng: &mut R,
) -> Result<QSnapshot> {
    if k < 2 {
        return Err(invalid!("snapshot needs at least two samples, got {k}"));
    }
    let mut q_tables = Vec::with_capacity(k);
    for _ in 0..k {
        let model = post.sample_model(rng);
        let (_, bundle) = mdp::policy_iteration(&model, gamma)?;
        q_tables.push(bundle.q_table().to_vec());
    }
    let cells = post.n_states * post.n_actions;
    let kf = k as f64;
    let mut mean_q = vec![0.0; cells];
    let mut std_q = vec![0.0; cells];
    for i in 0..cells {
        let mean = q_tables.iter().map(|q| q[i]).sum::<f64>() / kf;
        let var = q_tables.iter().map(|q| (q[i] - mean) * (q[i] - mean)).sum::<f64>() / (kf - 1.0);
        mean_q[i] = mean;
        std_q[i] = libm::sqrt(var);
    }
    Ok(QSnapshot {
        iteration,
        k,
        n_states: post.n_states,
        n_actions: post.n_actions,
        mean_q,
        std_q,
        n_obs: post.n_obs.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::build_nchain;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    fn tr(s: usize, a: usize, s_next: usize, r: f64) -> Transition {
        Transition { s, a, r, s_next, t: 0, h: 0 }
    }

    #[test]
    fn prior_mean_is_uniform() {
        let post = PosteriorState::new(2, 3, Prior::default()).unwrap();
        let mean = post.mean_model();
        for s in 0..2 {
            for a in 0..3 {
                assert_eq!(mean.transition_row(s, a), &[0.5, 0.5]);
                assert_eq!(mean.reward_row(s, a), &[0.0, 0.0]);
            }
        }
        assert_eq!(mean.tag(), ModelTag::Reference);
    }

    #[test]
    fn larger_concentration_lowers_variance() {
        let dirichlet_var = |alpha: &[f64], i: usize| {
            let total: f64 = alpha.iter().sum();
            alpha[i] * (total - alpha[i]) / (total * total * (total + 1.0))
        };
        let one = PosteriorState::new(2, 1, Prior::default()).unwrap();
        let two = PosteriorState::new(2, 1, Prior { alpha0: 2.0, ..Prior::default() }).unwrap();
        assert_eq!(one.mean_model().transition_row(0, 0), two.mean_model().transition_row(0, 0));
        assert!(dirichlet_var(two.alpha(0, 0), 0) < dirichlet_var(one.alpha(0, 0), 0));
    }

    #[test]
    fn non_positive_prior_is_rejected() {
        for prior in [
            Prior { alpha0: 0.0, ..Prior::default() },
            Prior { kappa0: -1.0, ..Prior::default() },
            Prior { a0: 0.0, ..Prior::default() },
            Prior { b0: f64::NAN, ..Prior::default() },
        ] {
            assert!(PosteriorState::new(2, 2, prior).is_err());
        }
    }

    #[test]
    fn dirichlet_counts() {
        let mut post = PosteriorState::new(2, 1, Prior::default()).unwrap();
        post.update(&[tr(0, 0, 0, 0.0), tr(0, 0, 0, 0.0), tr(0, 0, 0, 0.0)]).unwrap();
        let row = post.mean_model().transition_row(0, 0).to_vec();
        assert!((row[0] - 0.8).abs() < 1e-15 && (row[1] - 0.2).abs() < 1e-15);
        assert_eq!(post.n_obs(0, 0), 3);
        post.check_invariants().unwrap();
    }

    #[test]
    fn single_reward_update() {
        let mut post = PosteriorState::new(1, 1, Prior::default()).unwrap();
        post.update(&[tr(0, 0, 0, 2.0)]).unwrap();
        let ng = post.normal_gamma(0, 0, 0);
        assert_eq!(ng.mu, 1.0);
        assert_eq!(ng.kappa, 2.0);
        assert_eq!(ng.a, 1.5);
        // b0 + 0 + 1 * 1 * (2 - 0)^2 / (2 * 2)
        assert_eq!(ng.b, 2.0);
    }

    #[test]
    fn out_of_range_transition_is_rejected() {
        let mut post = PosteriorState::new(2, 2, Prior::default()).unwrap();
        assert!(post.update(&[tr(0, 2, 0, 0.0)]).is_err());
        assert!(post.update(&[tr(0, 0, 5, 0.0)]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let post = PosteriorState::new(4, 2, Prior::default()).unwrap();
        let a = post.sample_model(&mut StreamRng::seed_from_u64(1));
        let b = post.sample_model(&mut StreamRng::seed_from_u64(1));
        assert_eq!(a, b);
        a.validate().unwrap();
        for s in 0..4 {
            for act in 0..2 {
                let total: f64 = a.transition_row(s, act).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(a.tag(), ModelTag::Sampled);
    }

    #[test]
    fn concentrated_dirichlet_samples_near_corner() {
        let mut post = PosteriorState::new(2, 1, Prior::default()).unwrap();
        post.dirichlet_alpha[0] = 1e6;
        let mut rng = StreamRng::seed_from_u64(2);
        for _ in 0..100 {
            assert!(post.sample_model(&mut rng).transition_row(0, 0)[0] > 0.99);
        }
    }

    #[test]
    fn width_examples() {
        let env = build_nchain(3).unwrap();
        let m = env.model().clone();
        assert_eq!(ensemble_width(&[m.clone(), m.clone()], 1, 0).unwrap(), 0.0);
        assert!(ensemble_width(&[m.clone()], 0, 0).is_err());
        let a = TabularModel::new(2, 1, vec![1.0, 0.0, 1.0, 0.0], vec![0.0; 4], ModelTag::Sampled).unwrap();
        let b = TabularModel::new(2, 1, vec![0.0, 1.0, 1.0, 0.0], vec![0.0; 4], ModelTag::Sampled).unwrap();
        assert_eq!(ensemble_width(&[a.clone(), b, a], 0, 0).unwrap(), 2.0);
    }

    #[test]
    fn snapshot_needs_two_samples() {
        let post = PosteriorState::new(2, 2, Prior::default()).unwrap();
        assert!(q_posterior_snapshot(&post, 1, 0.9, 0, &mut StreamRng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn concentrated_posterior_has_no_spread() {
        let env = build_nchain(5).unwrap();
        let post = PosteriorState::concentrated_at(env.model(), 1_000_000_000, Prior::default()).unwrap();
        post.check_invariants().unwrap();
        let snap = q_posterior_snapshot(&post, 8, 0.97, 0, &mut StreamRng::seed_from_u64(3)).unwrap();
        assert!(snap.std_q.iter().all(|&x| x < 1e-3), "{:?}", snap.std_q);
    }
}
