//! Property tests for invariants of the model, oracle, estimator and region.

use nalgebra::{DMatrix, DVector};
use p3o_core::estimation::{fit_step, Bounds, DualSolver, FeatureMap, LinearBridge, PolicyMoments};
use p3o_core::instances::{self, generic_history_policy, random_full_rank};
use p3o_core::model::{occupancy, rank_diagnostics};
use p3o_core::oracle::{solve_value_bridge, true_value};
use p3o_core::pessimism::{pessimistic_value, run_policy, xi_schedule, P3oConfig};
use p3o_core::policy::{deterministic_reactive_set, softmax};
use p3o_core::simulate::generate;
use p3o_core::{BehaviorPolicy, HistoryClass, TabularPomdp, TargetPolicy};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn class_strategy() -> impl Strategy<Value = HistoryClass> {
    prop_oneof![
        Just(HistoryClass::Reactive),
        (1usize..3).prop_map(HistoryClass::FiniteHistory),
        Just(HistoryClass::FullHistory),
    ]
}

/// Relabels latent states with `perm` (new index `perm[s]` for old `s`).
fn permute_states(m: &TabularPomdp, b: &BehaviorPolicy, perm: &[usize]) -> (TabularPomdp, BehaviorPolicy) {
    let n = m.n_states;
    let mut inv = vec![0; n];
    for (s, &p) in perm.iter().enumerate() {
        inv[p] = s;
    }
    let by_state = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { (0..n).map(|t| rows[inv[t]].clone()).collect() };
    let mut out = m.clone();
    out.mu1 = (0..n).map(|t| m.mu1[inv[t]]).collect();
    out.emit0 = by_state(&m.emit0);
    out.emit = m.emit.iter().map(by_state).collect();
    out.reward = m.reward.iter().map(by_state).collect();
    out.trans = m
        .trans
        .iter()
        .map(|layer| {
            (0..n)
                .map(|t| {
                    layer[inv[t]]
                        .iter()
                        .map(|row| (0..n).map(|u| row[inv[u]]).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    let probs = b.probs.iter().map(by_state).collect();
    (out, BehaviorPolicy { probs })
}

fn loose_bounds() -> Bounds {
    Bounds {
        l_b: 10.0,
        l_g: 1e6,
        m_b: 10.0,
        m_g: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 48,
        rng_seed: RngSeed::Fixed(0x9e3779b9),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..6), shift in -50.0f64..50.0) {
        let p = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_marginalizes_to_latent_law(seed in 0u64..500, class in class_strategy()) {
        let (m, b) = random_full_rank(seed, 3, 3, 2, 3);
        let occ = occupancy(&m, &b, class).unwrap();
        let marg = m.latent_marginals(&b);
        for h in 0..m.horizon {
            let mut per_state = vec![0.0; m.n_states];
            for ((s, _), p) in &occ[h] {
                per_state[*s] += p;
            }
            for s in 0..m.n_states {
                prop_assert!((per_state[s] - marg[h][s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_diagnostics_ignore_observation_labels(seed in 0u64..500, shift in 1usize..4) {
        let (m, b) = random_full_rank(seed, 2, 4, 2, 2);
        let mut p = m.clone();
        let relabel = |row: &Vec<f64>| -> Vec<f64> { (0..4).map(|o| row[(o + shift) % 4]).collect() };
        p.emit0 = m.emit0.iter().map(relabel).collect();
        p.emit = m.emit.iter().map(|l| l.iter().map(relabel).collect()).collect();
        let (d1, d2) = (rank_diagnostics(&m, &b), rank_diagnostics(&p, &b));
        prop_assert_eq!(d1.rank_ok, d2.rank_ok);
        for (x, y) in d1.forward.iter().flatten().zip(d2.forward.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in d1.backward.iter().flatten().zip(d2.backward.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn true_value_ignores_state_labels(seed in 0u64..500, class in class_strategy()) {
        let (m, b) = random_full_rank(seed, 3, 3, 2, 3);
        let policy = generic_history_policy(&m, class, seed);
        let (pm, pb) = permute_states(&m, &b, &[2, 0, 1]);
        pm.validate().unwrap();
        pb.validate(&pm).unwrap();
        let (v1, v2) = (true_value(&m, &policy).unwrap(), true_value(&pm, &policy).unwrap());
        prop_assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn inner_max_grows_with_radius_and_scales_with_lambda(
        seed in 0u64..1000,
        lambda in 0.1f64..5.0,
        r1 in 0.01f64..2.0,
        extra in 0.0f64..3.0,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = 4;
        let x = DMatrix::from_fn(d, d + 2, |_, _| rng.random::<f64>() - 0.5);
        let sigma = &x * x.transpose() / (d + 2) as f64;
        let u = DVector::from_fn(d, |_, _| rng.random::<f64>() - 0.5);
        let v1 = DualSolver::new(&sigma, lambda, r1).unwrap().maximize(&u).value;
        let v2 = DualSolver::new(&sigma, lambda, r1 + extra).unwrap().maximize(&u).value;
        prop_assert!(v2 >= v1 - 1e-12);
        let big = 1e9;
        let a = DualSolver::new(&sigma, lambda, big).unwrap().maximize(&u).value;
        let b = DualSolver::new(&sigma, 2.0 * lambda, big).unwrap().maximize(&u).value;
        prop_assert!((a - 2.0 * b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn fitted_bridge_beats_random_feasible_bridges(seed in 0u64..200, n in 200usize..2000) {
        let (m, b) = instances::confounded();
        let d = generate(&m, &b, n, seed);
        let mut bounds = loose_bounds();
        bounds.l_b = 3.0;
        bounds.l_g = 5.0;
        let fm = FeatureMap::one_hot(2, 2, bounds);
        let policy = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let pm = PolicyMoments::from_dataset(&d, &policy, &fm, m.gamma).unwrap();
        let next = DVector::from_vec(vec![0.3, -0.1, 0.2, 0.4]);
        let st = &pm.steps[0];
        let fit = fit_step(st, &fm, Some(&next), 1.0).unwrap();
        let dual = DualSolver::new(&st.sigma, 1.0, bounds.l_g).unwrap();
        let objective = |theta: &DVector<f64>| dual.maximize(&st.u(theta, Some(&next))).value;
        let best = objective(&fit.bridge.theta_vec());
        prop_assert!(fit.bridge.norm() <= bounds.l_b + 1e-9);
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 7);
        for _ in 0..100 {
            let mut t = DVector::from_fn(4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let r = bounds.l_b * rng.random::<f64>();
            t *= r / t.norm();
            prop_assert!(best <= objective(&t) + 1e-9, "{} > {}", best, objective(&t));
        }
    }

    #[test]
    fn pessimistic_value_is_monotone_in_xi(seed in 0u64..200, xi_a in 0.0f64..0.2, xi_b in 0.0f64..0.2) {
        let (m, b) = instances::confounded();
        let d = generate(&m, &b, 500, seed);
        let set = deterministic_reactive_set(2, 2, 2).unwrap();
        let policy = &set.policies[(seed % 17) as usize];
        let config = P3oConfig::default();
        let fm = FeatureMap::one_hot(2, 2, config.bounds);
        let run = run_policy(&d, policy, &fm, m.gamma, &config, seed, None).unwrap();
        let (lo, hi) = if xi_a <= xi_b { (xi_a, xi_b) } else { (xi_b, xi_a) };
        let v_lo = pessimistic_value(&run.moments, &run.region.with_xi(lo), &run.grid).unwrap().value;
        let v_hi = pessimistic_value(&run.moments, &run.region.with_xi(hi), &run.grid).unwrap().value;
        prop_assert!(v_hi <= v_lo);
    }

    #[test]
    fn pessimism_never_exceeds_feasible_oracle_head(seed in 0u64..200, n in 500usize..5000) {
        let (m, b) = instances::confounded();
        let d = generate(&m, &b, n, seed);
        let set = deterministic_reactive_set(2, 2, 2).unwrap();
        let policy = &set.policies[(seed % 17) as usize];
        let config = P3oConfig::default();
        let fm = FeatureMap::one_hot(2, 2, config.bounds);
        let oracle: Vec<LinearBridge> = solve_value_bridge(&m, &b, policy)
            .unwrap()
            .tables
            .iter()
            .enumerate()
            .map(|(h, t)| LinearBridge::from_one_hot_table(h + 1, t))
            .collect();
        let run = run_policy(&d, policy, &fm, m.gamma, &config, seed, Some(&oracle)).unwrap();
        let idx: Vec<usize> = run.grid.layers.iter().map(|l| l.len() - 1).collect();
        if run.region.chain_feasible(&idx) {
            prop_assert!(run.value.value <= run.moments.head_value(&oracle[0].theta_vec()));
        }
    }

    #[test]
    fn xi_schedule_shrinks_with_n(n in 10usize..100_000, d in 1usize..20, h in 1usize..6) {
        let a = xi_schedule(n, d, h, 1.0, 1.0, 4.0, 10.0, 0.1, 1.0);
        let b = xi_schedule(2 * n, d, h, 1.0, 1.0, 4.0, 10.0, 0.1, 1.0);
        prop_assert!(b < a);
        prop_assert_eq!(xi_schedule(n, d, h, 1.0, 1.0, 4.0, 10.0, 0.1, 0.0), 0.0);
    }
}
