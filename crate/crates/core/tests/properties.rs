use conserva_core::agents::{conservative_state_step, conservative_update};
use conserva_core::bayes::{PosteriorState, Prior};
use conserva_core::envs::Transition;
use conserva_core::mdp::{evaluate_policy, policy_iteration, tv_distance, visitation, Policy, TabularModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, n).prop_map(|w| {
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            let mut v = vec![0.0; w.len()];
            v[0] = 1.0;
            v
        } else {
            w.iter().map(|x| x / total).collect()
        }
    })
}

fn step_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..6).prop_flat_map(|n| (distribution(n), proptest::collection::vec(-10.0f64..10.0, n), 0.0f64..=1.0))
}

proptest! {
    #[test]
    fn conservative_step_stays_in_the_trust_region((q, qbar, eta) in step_case()) {
        let p = conservative_state_step(&q, &qbar, eta);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!(tv_distance(&p, &q).unwrap() <= eta + 1e-12);
        let value = |d: &[f64]| d.iter().zip(&qbar).map(|(a, b)| a * b).sum::<f64>();
        prop_assert!(value(&p) >= value(&q) - 1e-12);
    }

    #[test]
    fn tv_distance_is_a_bounded_metric(p in distribution(4), q in distribution(4), r in distribution(4)) {
        let d = |a: &[f64], b: &[f64]| tv_distance(a, b).unwrap();
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-15);
        prop_assert!(d(&p, &q) <= 1.0 + 1e-12);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
        prop_assert_eq!(d(&p, &p), 0.0);
    }

    #[test]
    fn evaluation_satisfies_bellman(seed in any::<u64>(), ns in 1usize..7, na in 1usize..4, gamma in 0.1f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TabularModel::random(ns, na, &mut rng);
        let policy = Policy::uniform(ns, na);
        let bundle = evaluate_policy(&model, &policy, gamma).unwrap();
        for s in 0..ns {
            for a in 0..na {
                let backup: f64 = model.expected_reward(s, a)
                    + gamma * model.transition_row(s, a).iter().zip(bundle.v()).map(|(p, v)| p * v).sum::<f64>();
                prop_assert!((bundle.q(s, a) - backup).abs() < 1e-9 * (1.0 + backup.abs()));
            }
            prop_assert!(bundle.advantage(s, 0).is_finite());
        }
    }

    #[test]
    fn visitation_is_a_distribution(seed in any::<u64>(), ns in 1usize..7, na in 1usize..4, gamma in 0.1f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TabularModel::random(ns, na, &mut rng);
        let mut zeta = vec![0.0; ns];
        zeta[0] = 1.0;
        let v = visitation(&model, &Policy::uniform(ns, na), gamma, &zeta).unwrap();
        prop_assert!((v.nu().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((v.rho_table().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(v.rho_table().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn optimal_policy_dominates_uniform(seed in any::<u64>(), ns in 1usize..6, na in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = TabularModel::random(ns, na, &mut rng);
        let (_, best) = policy_iteration(&model, 0.9).unwrap();
        let uniform = evaluate_policy(&model, &Policy::uniform(ns, na), 0.9).unwrap();
        for s in 0..ns {
            prop_assert!(best.v()[s] >= uniform.v()[s] - 1e-9);
        }
    }

    #[test]
    fn conservative_update_never_loses_ensemble_value(seed in any::<u64>(), eta in 0.0f64..=1.0, sweeps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let models: Vec<TabularModel> = (0..3).map(|_| TabularModel::random(4, 3, &mut rng)).collect();
        let anchor = Policy::deterministic(&[0, 1, 2, 0], 3).unwrap();
        let zeta = [0.25; 4];
        let (policy, diag) = conservative_update(&anchor, &models, 0.9, eta, sweeps, &zeta).unwrap();
        prop_assert!(diag.mean_value_after >= diag.mean_value_before - 1e-12);
        prop_assert!(policy.max_state_tv(&anchor).unwrap() <= eta + 1e-12);
    }

    #[test]
    fn posterior_ignores_batch_order_and_split(
        raw in proptest::collection::vec((0usize..3, 0usize..2, 0usize..3, -3.0f64..3.0), 0..60),
        split in 0usize..60,
    ) {
        let batch: Vec<Transition> = raw.iter().enumerate()
            .map(|(h, &(s, a, s_next, r))| Transition { s, a, r, s_next, t: 0, h })
            .collect();
        let split = split.min(batch.len());
        let mut whole = PosteriorState::new(3, 2, Prior::default()).unwrap();
        whole.update(&batch).unwrap();
        let mut reversed: Vec<Transition> = batch.clone();
        reversed.reverse();
        let mut parts = PosteriorState::new(3, 2, Prior::default()).unwrap();
        parts.update(&reversed[..split]).unwrap();
        parts.update(&reversed[split..]).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                prop_assert_eq!(whole.alpha(s, a), parts.alpha(s, a));
                prop_assert_eq!(whole.n_obs(s, a), parts.n_obs(s, a));
                for s2 in 0..3 {
                    let (x, y) = (whole.normal_gamma(s, a, s2), parts.normal_gamma(s, a, s2));
                    for (u, v) in [(x.mu, y.mu), (x.kappa, y.kappa), (x.a, y.a), (x.b, y.b)] {
                        prop_assert!((u - v).abs() < 1e-10 * (1.0 + u.abs()));
                    }
                }
            }
        }
        prop_assert!(parts.check_invariants().is_ok());
    }
}
