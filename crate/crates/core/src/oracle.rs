//! Exact population quantities on tabular models.
//!
//! Every expectation is a finite sum over enumerated contexts. Bridge
//! systems are posed on observables: for each action `a` the unknown
//! `b_h(a, ·)` over `W = O_h` must reproduce the conditional moment of the
//! bridge target given `(A_h = a, Z_h)`. Underdetermined systems return the
//! minimum-norm solution.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::enumerate::{forward, Driver, Layers, DEFAULT_CAP};
use crate::error::{Error, Result};
use crate::linalg::{min_norm_solve, relative_residual, singular_values};
use crate::model::{has_rank, TabularPomdp};
use crate::policy::{BehaviorPolicy, HistoryClass, Pair, TargetPolicy};

/// Relative residual tolerance for bridge systems.
pub const SOLVE_TOL: f64 = 1e-9;

/// Tabular function over `A × O`, indexed `[a][o]`.
pub type Table = Vec<Vec<f64>>;

pub fn zero_table(model: &TabularPomdp) -> Table {
    vec![vec![0.0; model.n_obs]; model.n_actions]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueBridgeExact {
    pub history_class: HistoryClass,
    /// `tables[h-1][a][w] = b_h(a, w)`.
    pub tables: Vec<Table>,
    /// Relative residual of the observable system per step.
    pub residuals: Vec<f64>,
    /// Largest defect of the latent-conditional system per step.
    pub latent_residuals: Vec<f64>,
    pub solution: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBridgeExact {
    pub history_class: HistoryClass,
    /// `tables[h-1][a][z] = q_h(a, z)`.
    pub tables: Vec<Table>,
    pub residuals: Vec<f64>,
    pub solution: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// `max_h E_b[q_h(A_h, Z_h)^2]`; infinite without coverage.
    pub c_pi: f64,
    pub per_step: Vec<f64>,
    pub finite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentificationCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

/// Conditional moments of the one-step bridge defect given `(A_h, Z_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTable {
    /// `P_b(A_h = a, Z_h = z)`
    pub mass: Table,
    /// `E_b[ς · 1{A_h = a, Z_h = z}]`
    pub moment: Table,
}

impl ResidualTable {
    /// `ℓ(a, z) = E_b[ς | a, z]`, zero on null cells.
    pub fn ell(&self, a: usize, z: usize) -> f64 {
        let m = self.mass[a][z];
        if m > 0.0 {
            self.moment[a][z] / m
        } else {
            0.0
        }
    }

    /// `L = E_b[ℓ²]`.
    pub fn loss(&self) -> f64 {
        let mut total = 0.0;
        for (ma, sa) in self.mass.iter().zip(&self.moment) {
            for (&m, &s) in ma.iter().zip(sa) {
                if m > 0.0 {
                    total += s * s / m;
                }
            }
        }
        total
    }
}

/// Behavior-law enumeration reused across many population queries.
pub struct Population<'a> {
    pub model: &'a TabularPomdp,
    pub behavior: &'a BehaviorPolicy,
    pub layers: Layers,
}

impl<'a> Population<'a> {
    pub fn new(model: &'a TabularPomdp, behavior: &'a BehaviorPolicy, class: HistoryClass) -> Result<Self> {
        let layers = forward(model, Driver::Behavior(behavior), class, DEFAULT_CAP)?;
        Ok(Self {
            model,
            behavior,
            layers,
        })
    }

    pub fn class(&self) -> HistoryClass {
        self.layers.class
    }

    /// Latent value of the continuation `v(s') = Σ_o O_{h+1}(o|s') Σ_a b(a, o)`.
    fn continuation(&self, h: usize, next: Option<&Table>) -> Vec<f64> {
        let m = self.model;
        match next {
            None => vec![0.0; m.n_states],
            Some(b) => (0..m.n_states)
                .map(|s| {
                    (0..m.n_obs)
                        .map(|o| m.emit[h][s][o] * (0..m.n_actions).map(|a| b[a][o]).sum::<f64>())
                        .sum()
                })
                .collect(),
        }
    }

    /// Bridge target `R_h(s,a) + γ Σ_{s'} P_h(s'|s,a) v(s')`, before the policy factor.
    fn target_kernel(&self, h: usize, v: &[f64], s: usize, a: usize) -> f64 {
        let m = self.model;
        let cont: f64 = m.trans[h - 1][s][a].iter().zip(v).map(|(t, x)| t * x).sum();
        m.reward[h - 1][s][a] + m.gamma * cont
    }

    /// Visits `(context, z, atom, o, a, weight, π_h(a|o,atom), kernel)` under the behavior law.
    pub(crate) fn visit_steps<F>(&self, policy: &TargetPolicy, h: usize, next: Option<&Table>, mut f: F) -> Result<()>
    where
        F: FnMut(usize, usize, &[Pair], usize, usize, f64, f64, f64),
    {
        let m = self.model;
        let v = self.continuation(h, next);
        let class = self.class();
        for (ctx, &p) in self.layers.layer(h) {
            let z = class.z_value(h, ctx.o0, &ctx.past);
            let atom = class.atom(h, &ctx.past);
            let s = ctx.state;
            for (o, &e) in m.emit[h - 1][s].iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                let pi = policy.action_probs(h, o, atom)?;
                for (a, &pb) in self.behavior.probs[h - 1][s].iter().enumerate() {
                    if pb > 0.0 {
                        f(s, z, atom, o, a, p * e * pb, pi[a], self.target_kernel(h, &v, s, a));
                    }
                }
            }
        }
        Ok(())
    }

    /// `(mass, moment)` of the defect `b_h(A,W) − π_h(A|O,Γ)(R + γ Σ_{a'} b_{h+1}(a', W'))`.
    pub fn residual_table(
        &self,
        policy: &TargetPolicy,
        b_h: &Table,
        b_next: Option<&Table>,
        h: usize,
    ) -> Result<ResidualTable> {
        let m = self.model;
        let mut mass = vec![vec![0.0; m.n_obs]; m.n_actions];
        let mut moment = vec![vec![0.0; m.n_obs]; m.n_actions];
        self.visit_steps(policy, h, b_next, |_, z, _, o, a, w, pi, k| {
            mass[a][z] += w;
            moment[a][z] += w * (b_h[a][o] - pi * k);
        })?;
        Ok(ResidualTable { mass, moment })
    }

    /// `F(b) = E_b[Σ_a b_1(a, W_1)]`.
    pub fn head_value(&self, b1: &Table) -> f64 {
        let m = self.model;
        let mut total = 0.0;
        for (ctx, &p) in self.layers.layer(1) {
            for (o, &e) in m.emit[0][ctx.state].iter().enumerate() {
                total += p * e * (0..m.n_actions).map(|a| b1[a][o]).sum::<f64>();
            }
        }
        total
    }

    /// Singular values of `P_b(Z_h | S_h)`.
    pub fn control_spectrum(&self, h: usize) -> Vec<f64> {
        let m = self.model;
        let class = self.class();
        let mut joint = DMatrix::zeros(m.n_states, m.n_obs);
        let mut marg = vec![0.0; m.n_states];
        for (ctx, &p) in self.layers.layer(h) {
            joint[(ctx.state, class.z_value(h, ctx.o0, &ctx.past))] += p;
            marg[ctx.state] += p;
        }
        for (s, &ms) in marg.iter().enumerate() {
            for z in 0..m.n_obs {
                joint[(s, z)] = if ms > 0.0 { joint[(s, z)] / ms } else { 0.0 };
            }
        }
        singular_values(&joint)
    }

    fn check_ranks(&self, h: usize) -> Result<()> {
        let n = self.model.n_states;
        let fwd = singular_values(&self.model.forward_matrix(h));
        if !has_rank(&fwd, n) || !has_rank(&self.control_spectrum(h), n) {
            return Err(Error::RankDeficient(h));
        }
        Ok(())
    }

    pub fn value_bridge(&self, policy: &TargetPolicy) -> Result<ValueBridgeExact> {
        let m = self.model;
        let horizon = m.horizon;
        let mut tables = vec![zero_table(m); horizon];
        let mut residuals = vec![0.0; horizon];
        let mut latent_residuals = vec![0.0; horizon];
        for h in (1..=horizon).rev() {
            self.check_ranks(h)?;
            let next = if h < horizon { Some(tables[h].clone()) } else { None };
            let mut mats = vec![DMatrix::<f64>::zeros(m.n_obs, m.n_obs); m.n_actions];
            let mut rhs = vec![DVector::<f64>::zeros(m.n_obs); m.n_actions];
            let mut latent: IndexMap<(usize, Vec<Pair>), Vec<f64>> = IndexMap::new();
            self.visit_steps(policy, h, next.as_ref(), |s, z, atom, o, a, w, pi, k| {
                mats[a][(z, o)] += w;
                rhs[a][z] += w * pi * k;
                let row = latent
                    .entry((s, atom.to_vec()))
                    .or_insert_with(|| vec![f64::NAN; m.n_actions * m.n_obs]);
                row[a * m.n_obs + o] = pi * k;
            })?;
            let mut worst = 0.0_f64;
            for a in 0..m.n_actions {
                let x = min_norm_solve(&mats[a], &rhs[a]);
                worst = worst.max(relative_residual(&mats[a], &x, &rhs[a]));
                tables[h - 1][a] = x.iter().copied().collect();
            }
            residuals[h - 1] = worst;
            if worst > SOLVE_TOL {
                return Err(Error::Inconsistent { step: h, residual: worst });
            }
            let b = &tables[h - 1];
            let mut defect = 0.0_f64;
            for ((s, _), row) in &latent {
                for a in 0..m.n_actions {
                    if row[a * m.n_obs..(a + 1) * m.n_obs].iter().any(|x| x.is_nan()) {
                        continue;
                    }
                    let mut lhs = 0.0;
                    let mut target = 0.0;
                    for o in 0..m.n_obs {
                        let e = m.emit[h - 1][*s][o];
                        lhs += e * b[a][o];
                        target += e * row[a * m.n_obs + o];
                    }
                    defect = defect.max((lhs - target).abs());
                }
            }
            latent_residuals[h - 1] = defect;
        }
        Ok(ValueBridgeExact {
            history_class: self.class(),
            tables,
            residuals,
            latent_residuals,
            solution: "minimum-norm".into(),
        })
    }
}

/// `J(π) = E_π[Σ_h γ^{h-1} R_h]` by forward enumeration under the target policy.
pub fn true_value(model: &TabularPomdp, policy: &TargetPolicy) -> Result<f64> {
    let layers = forward(model, Driver::Target(policy), policy.history_class, DEFAULT_CAP)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    for h in 1..=model.horizon {
        let mut step = 0.0;
        layers.visit(model, Driver::Target(policy), h, |ctx, _, a, w| {
            step += w * model.reward[h - 1][ctx.state][a];
        })?;
        total += discount * step;
        discount *= model.gamma;
    }
    Ok(total)
}

pub fn solve_value_bridge(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    policy: &TargetPolicy,
) -> Result<ValueBridgeExact> {
    Population::new(model, behavior, policy.history_class)?.value_bridge(policy)
}

pub fn solve_weight_bridge(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    policy: &TargetPolicy,
) -> Result<WeightBridgeExact> {
    let class = policy.history_class;
    let pop = Population::new(model, behavior, class)?;
    let target = forward(model, Driver::Target(policy), class, DEFAULT_CAP)?;
    let mut tables = Vec::with_capacity(model.horizon);
    let mut residuals = Vec::with_capacity(model.horizon);
    for h in 1..=model.horizon {
        if !has_rank(&pop.control_spectrum(h), model.n_states) {
            return Err(Error::RankDeficient(h));
        }
        let pb = pop.layers.occupancy(h);
        let pt = target.occupancy(h);
        for (key, &p) in &pt {
            if p > 0.0 && pb.get(key).copied().unwrap_or(0.0) <= 0.0 {
                return Err(Error::Uncovered(h));
            }
        }
        let rows: Vec<&(usize, Vec<Pair>)> = pb.iter().filter(|(_, &p)| p > 0.0).map(|(k, _)| k).collect();
        let row_of: IndexMap<&(usize, Vec<Pair>), usize> = rows.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let mut cond = DMatrix::<f64>::zeros(rows.len(), model.n_obs);
        for (ctx, &p) in pop.layers.layer(h) {
            let key = (ctx.state, class.atom(h, &ctx.past).to_vec());
            if let Some(&r) = row_of.get(&key) {
                cond[(r, class.z_value(h, ctx.o0, &ctx.past))] += p / pb[&key];
            }
        }
        let mut table = zero_table(model);
        let mut worst = 0.0_f64;
        for a in 0..model.n_actions {
            let mut c = DVector::<f64>::zeros(rows.len());
            for (r, key) in rows.iter().enumerate() {
                let prob = behavior.probs[h - 1][key.0][a];
                if prob <= 0.0 {
                    return Err(Error::ZeroBehaviorProb {
                        step: h,
                        state: key.0,
                        action: a,
                    });
                }
                let mu = pt.get(*key).copied().unwrap_or(0.0) / pb[*key];
                c[r] = mu / prob;
            }
            let x = min_norm_solve(&cond, &c);
            worst = worst.max(relative_residual(&cond, &x, &c));
            table[a] = x.iter().copied().collect();
        }
        if worst > SOLVE_TOL {
            return Err(Error::Inconsistent { step: h, residual: worst });
        }
        tables.push(table);
        residuals.push(worst);
    }
    Ok(WeightBridgeExact {
        history_class: class,
        tables,
        residuals,
        solution: "minimum-norm".into(),
    })
}

pub fn identification_check(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    policy: &TargetPolicy,
) -> Result<IdentificationCheck> {
    let lhs = true_value(model, policy)?;
    let pop = Population::new(model, behavior, policy.history_class)?;
    let bridge = pop.value_bridge(policy)?;
    let rhs = pop.head_value(&bridge.tables[0]);
    Ok(IdentificationCheck {
        lhs,
        rhs,
        gap: (lhs - rhs).abs(),
    })
}

pub fn concentrability(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    policy: &TargetPolicy,
) -> Result<CoverageReport> {
    let q = match solve_weight_bridge(model, behavior, policy) {
        Ok(q) => q,
        Err(Error::Uncovered(_)) => {
            return Ok(CoverageReport {
                c_pi: f64::INFINITY,
                per_step: Vec::new(),
                finite: false,
            })
        }
        Err(e) => return Err(e),
    };
    let pop = Population::new(model, behavior, policy.history_class)?;
    let class = policy.history_class;
    let mut per_step = Vec::with_capacity(model.horizon);
    for h in 1..=model.horizon {
        let t = &q.tables[h - 1];
        let mut total = 0.0;
        for (ctx, &p) in pop.layers.layer(h) {
            let z = class.z_value(h, ctx.o0, &ctx.past);
            for (a, &pb) in behavior.probs[h - 1][ctx.state].iter().enumerate() {
                total += p * pb * t[a][z] * t[a][z];
            }
        }
        per_step.push(total);
    }
    let c_pi = per_step.iter().copied().fold(0.0, f64::max);
    Ok(CoverageReport {
        c_pi,
        per_step,
        finite: c_pi.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::policy::deterministic_reactive_set;

    #[test]
    fn zero_reward_gives_zero_everything() {
        let inst = instances::build("zero-reward", 0).unwrap();
        let p = TargetPolicy::uniform(&inst.model, HistoryClass::Reactive);
        assert_eq!(true_value(&inst.model, &p).unwrap(), 0.0);
        let b = solve_value_bridge(&inst.model, &inst.behavior, &p).unwrap();
        assert!(b.tables.iter().flatten().flatten().all(|&x| x.abs() < 1e-15));
        assert!(b.residuals.iter().all(|&r| r == 0.0));
        let c = identification_check(&inst.model, &inst.behavior, &p).unwrap();
        assert_eq!((c.lhs, c.gap), (0.0, 0.0));
    }

    #[test]
    fn single_step_value_has_closed_form() {
        let (mut m, b) = instances::random_full_rank(2, 3, 3, 2, 1);
        m.fill_defaults();
        let p = TargetPolicy::reactive_table(&[vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![1.0, 0.0]]]);
        let mut expect = 0.0;
        for s in 0..3 {
            for o in 0..3 {
                for a in 0..2 {
                    expect += m.mu1[s] * m.emit[0][s][o] * p.action_prob(1, a, o, &[]).unwrap() * m.reward[0][s][a];
                }
            }
        }
        assert!((true_value(&m, &p).unwrap() - expect).abs() < 1e-14);
        let _ = b;
    }

    #[test]
    fn identity_emission_single_step_bridge_is_direct_inversion() {
        let (mut m, b) = instances::identity_emission();
        m.horizon = 1;
        m.trans.truncate(1);
        m.emit.truncate(1);
        m.reward.truncate(1);
        let behavior = BehaviorPolicy { probs: b.probs[..1].to_vec() };
        let p = TargetPolicy::reactive_table(&[vec![vec![0.3, 0.7], vec![0.9, 0.1]]]);
        let bridge = solve_value_bridge(&m, &behavior, &p).unwrap();
        for a in 0..2 {
            for w in 0..2 {
                let expect = m.reward[0][w][a] * p.action_prob(1, a, w, &[]).unwrap();
                assert!((bridge.tables[0][a][w] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn more_observations_than_states_still_solve() {
        let (m, b) = instances::random_full_rank(8, 2, 3, 2, 3);
        let p = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let bridge = solve_value_bridge(&m, &b, &p).unwrap();
        assert!(bridge.residuals.iter().all(|&r| r <= 1e-9));
        assert!(bridge.latent_residuals.iter().all(|&r| r <= 1e-9));
    }

    #[test]
    fn reactive_identification_on_benchmark() {
        let (m, b) = instances::confounded();
        for p in &deterministic_reactive_set(2, 2, 2).unwrap().policies {
            let c = identification_check(&m, &b, p).unwrap();
            assert!(c.gap <= 1e-8, "{c:?}");
        }
    }

    #[test]
    fn constant_emission_is_rank_deficient() {
        let (mut m, b) = instances::confounded();
        let c = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        m.emit = vec![c.clone(); 2];
        m.emit0 = c;
        let p = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        assert!(matches!(solve_value_bridge(&m, &b, &p), Err(Error::RankDeficient(_))));
        assert!(matches!(solve_weight_bridge(&m, &b, &p), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn uniform_behavior_identity_system_gives_q_two() {
        let (m, _) = instances::identity_emission();
        let behavior = BehaviorPolicy::uniform(&m);
        let target = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let q = solve_weight_bridge(&m, &behavior, &target).unwrap();
        for t in &q.tables {
            assert!(t.iter().flatten().all(|&x| (x - 2.0).abs() < 1e-12));
        }
        let c = concentrability(&m, &behavior, &target).unwrap();
        assert!(c.finite);
        assert!((c.c_pi - 4.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_weight_bridge_inverts_propensity() {
        let (m, b) = instances::confounded();
        let p = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let q = solve_weight_bridge(&m, &b, &p).unwrap();
        // μ_1 ≡ 1, so E[q_1(a, Z) | a, s] = 1 / π^b_1(a|s).
        for s in 0..2 {
            for a in 0..2 {
                let e: f64 = (0..2).map(|z| m.emit0[s][z] * q.tables[0][a][z]).sum();
                assert!((e - 1.0 / b.probs[0][s][a]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_behavior_probability_is_reported() {
        let (m, mut b) = instances::identity_emission();
        b.probs[0][1] = vec![1.0, 0.0];
        let p = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        assert!(matches!(
            solve_weight_bridge(&m, &b, &p),
            Err(Error::ZeroBehaviorProb { step: 1, state: 1, action: 1 })
        ));
    }

    #[test]
    fn covered_target_reports_finite_coefficient() {
        let (m, b) = instances::confounded();
        for p in &deterministic_reactive_set(2, 2, 2).unwrap().policies {
            let c = concentrability(&m, &b, p).unwrap();
            assert!(c.finite && c.c_pi.is_finite() && c.c_pi >= 0.0);
        }
    }

    #[test]
    fn residual_table_vanishes_at_oracle_bridge() {
        let (m, b) = instances::confounded();
        let p = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let pop = Population::new(&m, &b, HistoryClass::Reactive).unwrap();
        let bridge = pop.value_bridge(&p).unwrap();
        for h in 1..=2 {
            let next = if h < 2 { Some(&bridge.tables[h]) } else { None };
            let r = pop.residual_table(&p, &bridge.tables[h - 1], next, h).unwrap();
            assert!(r.loss() < 1e-20);
        }
    }
}
