//! Named model builders and test-corpus generators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabularPomdp;
use crate::policy::{BehaviorPolicy, HistoryClass, Pair, PolicyForm, PolicyTable, TargetPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub name: String,
    pub model: TabularPomdp,
    pub behavior: BehaviorPolicy,
}

/// Builder names accepted by [`build`].
pub const BUILDERS: &[&str] = &["confounded", "identity-emission", "zero-reward", "random"];

pub fn build(name: &str, seed: u64) -> Result<Instance> {
    let (model, behavior) = match name {
        "confounded" => confounded(),
        "identity-emission" => identity_emission(),
        "zero-reward" => {
            let (mut m, b) = confounded();
            for layer in &mut m.reward {
                for row in layer.iter_mut() {
                    row.iter_mut().for_each(|r| *r = 0.0);
                }
            }
            (m, b)
        }
        "random" => random_full_rank(seed, 3, 4, 2, 3),
        other => return Err(Error::InvalidArgument(format!("unknown builder '{other}'"))),
    };
    Ok(Instance {
        name: name.to_string(),
        model,
        behavior,
    })
}

/// Two-state benchmark with a latent-state behavior policy.
///
/// State 0 is good and state 1 is bad. Action 0 is safe (reward 0.55 in
/// both states); action 1 is risky (reward 1 in the good state, 0 in the
/// bad one). Observations report the state with accuracy 0.8 and the state
/// persists with probability 0.85. The logging policy sees the state and
/// takes the risky action with probability 0.9 in the good state and 0.1 in
/// the bad one, so observation-level regressions overrate risk.
pub fn confounded() -> (TabularPomdp, BehaviorPolicy) {
    let horizon = 2;
    let emit = vec![vec![0.8, 0.2], vec![0.2, 0.8]];
    let stay = [vec![0.85, 0.15], vec![0.15, 0.85]];
    let model = TabularPomdp {
        n_states: 2,
        n_obs: 2,
        n_actions: 2,
        horizon,
        gamma: 1.0,
        mu1: vec![0.5, 0.5],
        trans: vec![stay.iter().map(|row| vec![row.clone(), row.clone()]).collect(); horizon],
        emit: vec![emit.clone(); horizon],
        emit0: emit,
        reward: vec![vec![vec![0.55, 1.0], vec![0.55, 0.0]]; horizon],
    };
    let behavior = BehaviorPolicy {
        probs: vec![vec![vec![0.1, 0.9], vec![0.9, 0.1]]; horizon],
    };
    (model, behavior)
}

/// Two-state MDP written as a POMDP with identity emissions, so the
/// behavior policy depends on the state only through the observation.
pub fn identity_emission() -> (TabularPomdp, BehaviorPolicy) {
    let horizon = 2;
    let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let model = TabularPomdp {
        n_states: 2,
        n_obs: 2,
        n_actions: 2,
        horizon,
        gamma: 1.0,
        mu1: vec![0.6, 0.4],
        trans: vec![
            vec![
                vec![vec![0.9, 0.1], vec![0.6, 0.4]],
                vec![vec![0.3, 0.7], vec![0.2, 0.8]],
            ];
            horizon
        ],
        emit: vec![id.clone(); horizon],
        emit0: id,
        reward: vec![vec![vec![0.2, 0.9], vec![0.7, 0.1]]; horizon],
    };
    let behavior = BehaviorPolicy {
        probs: vec![vec![vec![0.7, 0.3], vec![0.35, 0.65]]; horizon],
    };
    (model, behavior)
}

fn simplex(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn mix(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    let v: Vec<f64> = a.iter().zip(b).map(|(x, y)| w * x + (1.0 - w) * y).collect();
    let z: f64 = v.iter().sum();
    v.into_iter().map(|x| x / z).collect()
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Random model whose emission and backward matrices have full row rank
/// when `n_obs ≥ n_states`; the behavior policy depends on the latent state.
pub fn random_full_rank(
    seed: u64,
    n_states: usize,
    n_obs: usize,
    n_actions: usize,
    horizon: usize,
) -> (TabularPomdp, BehaviorPolicy) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let emit_row = |rng: &mut ChaCha20Rng, s: usize| mix(&unit(n_obs, s % n_obs), &simplex(rng, n_obs), 0.6);
    let emit0 = (0..n_states).map(|s| emit_row(&mut rng, s)).collect();
    let emit = (0..horizon)
        .map(|_| (0..n_states).map(|s| emit_row(&mut rng, s)).collect())
        .collect();
    let trans = (0..horizon)
        .map(|_| {
            (0..n_states)
                .map(|s| {
                    (0..n_actions)
                        .map(|a| mix(&unit(n_states, (s + a) % n_states), &simplex(&mut rng, n_states), 0.6))
                        .collect()
                })
                .collect()
        })
        .collect();
    let reward = (0..horizon)
        .map(|_| {
            (0..n_states)
                .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
                .collect()
        })
        .collect();
    let uniform_s = vec![1.0 / n_states as f64; n_states];
    let mu1 = mix(&uniform_s, &simplex(&mut rng, n_states), 0.5);
    let uniform_a = vec![1.0 / n_actions as f64; n_actions];
    let probs = (0..horizon)
        .map(|_| {
            (0..n_states)
                .map(|_| mix(&uniform_a, &simplex(&mut rng, n_actions), 0.3))
                .collect()
        })
        .collect();
    let model = TabularPomdp {
        n_states,
        n_obs,
        n_actions,
        horizon,
        gamma: 0.9,
        mu1,
        trans,
        emit,
        emit0,
        reward,
    };
    (model, BehaviorPolicy { probs })
}

/// Every atom of length `len` over `n_obs × n_actions`, in lexicographic order.
pub fn all_atoms(n_obs: usize, n_actions: usize, len: usize) -> Vec<Vec<Pair>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * n_obs * n_actions);
        for atom in &out {
            for o in 0..n_obs {
                for a in 0..n_actions {
                    let mut t = atom.clone();
                    t.push((o, a));
                    next.push(t);
                }
            }
        }
        out = next;
    }
    out
}

/// Basis of `{v : E_h v = 0}` for the step-`h` emission matrix.
fn emission_null_space(model: &TabularPomdp, h: usize) -> Vec<Vec<f64>> {
    let e = model.forward_matrix(h);
    let square = e.transpose() * &e;
    let eig = nalgebra::SymmetricEigen::new(square);
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    (0..model.n_obs)
        .filter(|&i| eig.eigenvalues[i] <= 1e-12 * top)
        .map(|i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect()
}

/// Random table policy for `class` whose history dependence lies in the
/// null space of each step's emission matrix.
///
/// The policy is `π⁰_h(a | o) + c_h(τ) v_{h,a}(o)` with `E_h v_{h,a} = 0` and
/// `Σ_a v_{h,a} = 0`. When `n_obs = n_states` the null space is trivial and
/// the policy ignores its history.
pub fn null_space_history_policy(model: &TabularPomdp, class: HistoryClass, seed: u64) -> TargetPolicy {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n_a = model.n_actions;
    let uniform_a = vec![1.0 / n_a as f64; n_a];
    let mut table = PolicyTable::new(n_a);
    for h in 1..=model.horizon {
        let base: Vec<Vec<f64>> = (0..model.n_obs)
            .map(|_| mix(&uniform_a, &simplex(&mut rng, n_a), 0.3))
            .collect();
        let null = emission_null_space(model, h);
        let dir: Vec<f64> = if null.is_empty() || n_a < 2 {
            vec![0.0; model.n_obs]
        } else {
            let w: Vec<f64> = (0..null.len()).map(|_| rng.random::<f64>() - 0.5).collect();
            (0..model.n_obs)
                .map(|o| null.iter().zip(&w).map(|(v, c)| v[o] * c).sum())
                .collect()
        };
        let dmax = dir.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let room = base.iter().map(|r| r[0].min(r[1.min(n_a - 1)])).fold(f64::INFINITY, f64::min);
        let scale = if dmax > 0.0 { 0.9 * room / dmax } else { 0.0 };
        for atom in all_atoms(model.n_obs, n_a, class.atom_len(h)) {
            let c: f64 = if atom.is_empty() { 0.0 } else { 2.0 * rng.random::<f64>() - 1.0 };
            for (o, row) in base.iter().enumerate() {
                let mut p = row.clone();
                if n_a >= 2 {
                    p[0] += c * scale * dir[o];
                    p[1] -= c * scale * dir[o];
                }
                table.insert(h, o, atom.clone(), p);
            }
        }
    }
    TargetPolicy {
        history_class: class,
        form: PolicyForm::Table(table),
    }
}

/// Random table policy for `class` with unrestricted history dependence.
pub fn generic_history_policy(model: &TabularPomdp, class: HistoryClass, seed: u64) -> TargetPolicy {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_a = model.n_actions;
    let uniform_a = vec![1.0 / n_a as f64; n_a];
    let mut table = PolicyTable::new(n_a);
    for h in 1..=model.horizon {
        for atom in all_atoms(model.n_obs, n_a, class.atom_len(h)) {
            for o in 0..model.n_obs {
                table.insert(h, o, atom.clone(), mix(&uniform_a, &simplex(&mut rng, n_a), 0.2));
            }
        }
    }
    TargetPolicy {
        history_class: class,
        form: PolicyForm::Table(table),
    }
}

/// Smallest singular value of an arbitrary matrix, used by corpus filters.
pub fn min_singular(m: &DMatrix<f64>) -> f64 {
    crate::linalg::singular_values(m).last().copied().unwrap_or(0.0)
}
