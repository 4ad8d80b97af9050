//! Exact forward enumeration over `(S_h, O_0, trailing (o, a) pairs)`.
//!
//! Layers are stored in insertion-ordered maps so every downstream sum runs
//! in a fixed order and results are bit-reproducible.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::TabularPomdp;
use crate::policy::{BehaviorPolicy, HistoryClass, Pair, TargetPolicy};

/// Default cap on the number of enumerated contexts per step.
pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Context {
    pub state: usize,
    pub o0: usize,
    /// Trailing pairs; the last one belongs to step `h - 1`.
    pub past: Vec<Pair>,
}

/// Joint law of `(S_h, Γ_{h-1})` at one step.
pub type Occupancy = IndexMap<(usize, Vec<Pair>), f64>;

#[derive(Clone, Copy)]
pub enum Driver<'a> {
    Behavior(&'a BehaviorPolicy),
    Target(&'a TargetPolicy),
}

impl Driver<'_> {
    pub fn probs(&self, h: usize, state: usize, o: usize, atom: &[Pair]) -> Result<Vec<f64>> {
        match self {
            Driver::Behavior(b) => Ok(b.probs[h - 1][state].clone()),
            Driver::Target(p) => p.action_probs(h, o, atom),
        }
    }
}

/// Per-step context distributions under a driver policy.
#[derive(Debug, Clone)]
pub struct Layers {
    pub class: HistoryClass,
    pub layers: Vec<IndexMap<Context, f64>>,
}

impl Layers {
    pub fn layer(&self, h: usize) -> &IndexMap<Context, f64> {
        &self.layers[h - 1]
    }

    /// Marginal over `(S_h, atom)` at step `h`.
    pub fn occupancy(&self, h: usize) -> Occupancy {
        let mut out = Occupancy::new();
        for (ctx, &p) in self.layer(h) {
            let atom = self.class.atom(h, &ctx.past).to_vec();
            *out.entry((ctx.state, atom)).or_insert(0.0) += p;
        }
        out
    }

    /// Visits every `(context, o_h, a_h)` at step `h` with its joint weight
    /// `P(context) · O_h(o | s) · π_h(a | ·)`, where the action law comes from `driver`.
    pub fn visit<F>(&self, model: &TabularPomdp, driver: Driver<'_>, h: usize, mut f: F) -> Result<()>
    where
        F: FnMut(&Context, usize, usize, f64),
    {
        for (ctx, &p) in self.layer(h) {
            let atom = self.class.atom(h, &ctx.past);
            for (o, &e) in model.emit[h - 1][ctx.state].iter().enumerate() {
                if e == 0.0 {
                    continue;
                }
                let probs = driver.probs(h, ctx.state, o, atom)?;
                for (a, &pa) in probs.iter().enumerate() {
                    if pa > 0.0 {
                        f(ctx, o, a, p * e * pa);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn forward(model: &TabularPomdp, driver: Driver<'_>, class: HistoryClass, cap: usize) -> Result<Layers> {
    let memory = class.memory(model.horizon);
    let mut first = IndexMap::new();
    for (s, &mu) in model.mu1.iter().enumerate() {
        if mu == 0.0 {
            continue;
        }
        for (o0, &e) in model.emit0[s].iter().enumerate() {
            if e > 0.0 {
                *first
                    .entry(Context {
                        state: s,
                        o0,
                        past: Vec::new(),
                    })
                    .or_insert(0.0) += mu * e;
            }
        }
    }
    if first.len() > cap {
        return Err(Error::HistoryExplosion { step: 1, cap });
    }
    let mut out = Layers {
        class,
        layers: vec![first],
    };
    for h in 1..model.horizon {
        let mut next: IndexMap<Context, f64> = IndexMap::new();
        let mut overflow = false;
        out.visit(model, driver, h, |ctx, o, a, w| {
            if overflow {
                return;
            }
            let mut past = ctx.past.clone();
            past.push((o, a));
            if past.len() > memory {
                past.remove(0);
            }
            for (sn, &t) in model.trans[h - 1][ctx.state][a].iter().enumerate() {
                if t > 0.0 {
                    *next
                        .entry(Context {
                            state: sn,
                            o0: ctx.o0,
                            past: past.clone(),
                        })
                        .or_insert(0.0) += w * t;
                }
            }
            overflow = next.len() > cap;
        })?;
        if overflow {
            return Err(Error::HistoryExplosion { step: h + 1, cap });
        }
        out.layers.push(next);
    }
    Ok(out)
}

/// Behavior-driven occupancies `P^b_h(S_h, Γ_{h-1})`.
pub fn behavior_occupancy(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    class: HistoryClass,
    cap: usize,
) -> Result<Vec<Occupancy>> {
    let layers = forward(model, Driver::Behavior(behavior), class, cap)?;
    Ok((1..=model.horizon).map(|h| layers.occupancy(h)).collect())
}

/// Target-driven occupancies `P^π_h(S_h, Γ_{h-1})`.
pub fn target_occupancy(model: &TabularPomdp, policy: &TargetPolicy, cap: usize) -> Result<Vec<Occupancy>> {
    let layers = forward(model, Driver::Target(policy), policy.history_class, cap)?;
    Ok((1..=model.horizon).map(|h| layers.occupancy(h)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    #[test]
    fn layers_are_normalized() {
        let (m, b) = instances::random_full_rank(5, 3, 3, 2, 4);
        for class in [
            HistoryClass::Reactive,
            HistoryClass::FiniteHistory(1),
            HistoryClass::FullHistory,
        ] {
            let layers = forward(&m, Driver::Behavior(&b), class, DEFAULT_CAP).unwrap();
            for layer in &layers.layers {
                let total: f64 = layer.values().sum();
                assert!((total - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cap_triggers_history_explosion() {
        let (m, b) = instances::random_full_rank(5, 3, 3, 2, 4);
        let err = forward(&m, Driver::Behavior(&b), HistoryClass::FullHistory, 50).unwrap_err();
        assert!(matches!(err, Error::HistoryExplosion { cap: 50, .. }));
    }

    #[test]
    fn single_step_occupancy_is_initial_law() {
        let (m, b) = instances::random_full_rank(9, 3, 3, 2, 1);
        let occ = behavior_occupancy(&m, &b, HistoryClass::FullHistory, DEFAULT_CAP).unwrap();
        for s in 0..3 {
            assert!((occ[0][&(s, vec![])] - m.mu1[s]).abs() < 1e-15);
        }
    }
}
