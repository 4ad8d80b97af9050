//! Finite episodic POMDP: tables, validation, JSON I/O and rank diagnostics.
//!
//! Steps are 1-based in every public API (`h ∈ 1..=H`); the tables are
//! stored 0-based, so `trans[h-1]` is the kernel of step `h`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::enumerate::{self, Occupancy, DEFAULT_CAP};
use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::policy::{BehaviorPolicy, HistoryClass};

/// Tolerance on probability-vector normalization.
pub const PROB_TOL: f64 = 1e-12;

/// Relative threshold on singular values for the rank conditions.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPomdp {
    pub n_states: usize,
    pub n_obs: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub mu1: Vec<f64>,
    /// `trans[h][s][a][s']`
    pub trans: Vec<Vec<Vec<Vec<f64>>>>,
    /// `emit[h][s][o]`
    pub emit: Vec<Vec<Vec<f64>>>,
    /// Law of the prior observation given the first state, `emit0[s][o]`.
    #[serde(default)]
    pub emit0: Vec<Vec<f64>>,
    /// `reward[h][s][a]`
    pub reward: Vec<Vec<Vec<f64>>>,
}

fn check_prob(v: &[f64], len: usize, field: String) -> Result<()> {
    if v.len() != len {
        return Err(Error::Validation(field));
    }
    let mut sum = 0.0;
    for &p in v {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::Validation(field));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Validation(field));
    }
    Ok(())
}

impl TabularPomdp {
    /// Checks every invariant; the error names the first violated field.
    pub fn validate(&self) -> Result<()> {
        let (s, o, a, h) = (self.n_states, self.n_obs, self.n_actions, self.horizon);
        for (name, v) in [("n_states", s), ("n_obs", o), ("n_actions", a), ("horizon", h)] {
            if v == 0 {
                return Err(Error::Validation(name.into()));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Validation("gamma".into()));
        }
        check_prob(&self.mu1, s, "mu1".into())?;
        if self.trans.len() != h {
            return Err(Error::Validation("trans".into()));
        }
        for (hi, layer) in self.trans.iter().enumerate() {
            if layer.len() != s {
                return Err(Error::Validation(format!("trans[{hi}]")));
            }
            for (si, row) in layer.iter().enumerate() {
                if row.len() != a {
                    return Err(Error::Validation(format!("trans[{hi}][{si}]")));
                }
                for (ai, p) in row.iter().enumerate() {
                    check_prob(p, s, format!("trans[{hi}][{si}][{ai}]"))?;
                }
            }
        }
        if self.emit.len() != h {
            return Err(Error::Validation("emit".into()));
        }
        for (hi, layer) in self.emit.iter().enumerate() {
            if layer.len() != s {
                return Err(Error::Validation(format!("emit[{hi}]")));
            }
            for (si, p) in layer.iter().enumerate() {
                check_prob(p, o, format!("emit[{hi}][{si}]"))?;
            }
        }
        if self.emit0.len() != s {
            return Err(Error::Validation("emit0".into()));
        }
        for (si, p) in self.emit0.iter().enumerate() {
            check_prob(p, o, format!("emit0[{si}]"))?;
        }
        if self.reward.len() != h {
            return Err(Error::Validation("reward".into()));
        }
        for (hi, layer) in self.reward.iter().enumerate() {
            if layer.len() != s {
                return Err(Error::Validation(format!("reward[{hi}]")));
            }
            for (si, row) in layer.iter().enumerate() {
                if row.len() != a {
                    return Err(Error::Validation(format!("reward[{hi}][{si}]")));
                }
                for (ai, &r) in row.iter().enumerate() {
                    if !r.is_finite() || !(0.0..=1.0).contains(&r) {
                        return Err(Error::Validation(format!("reward[{hi}][{si}][{ai}]")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Fills a missing `emit0` with the first-step emission table.
    pub fn fill_defaults(&mut self) {
        if self.emit0.is_empty() {
            if let Some(first) = self.emit.first() {
                self.emit0 = first.clone();
            }
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut m: TabularPomdp = serde_json::from_str(text)?;
        m.fill_defaults();
        Ok(m)
    }

    /// Reads and validates a model document.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m = Self::from_json_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }

    /// Latent marginals `P^b_h(S_h)` for `h = 1..=H` by plain forward recursion.
    pub fn latent_marginals(&self, behavior: &BehaviorPolicy) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.horizon);
        let mut cur = self.mu1.clone();
        for h in 0..self.horizon {
            out.push(cur.clone());
            if h + 1 == self.horizon {
                break;
            }
            let mut next = vec![0.0; self.n_states];
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let w = cur[s] * behavior.probs[h][s][a];
                    if w == 0.0 {
                        continue;
                    }
                    for (sn, &t) in self.trans[h][s][a].iter().enumerate() {
                        next[sn] += w * t;
                    }
                }
            }
            cur = next;
        }
        out
    }

    /// `P^b_h(O_h | S_h)` as an `|S| × |O|` matrix.
    pub fn forward_matrix(&self, h: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_obs, |s, o| self.emit[h - 1][s][o])
    }

    /// `P^b_h(O_{h-1} | S_h)` as an `|S| × |O|` matrix; rows of unreachable
    /// states are zero.
    pub fn backward_matrix(&self, behavior: &BehaviorPolicy, h: usize) -> DMatrix<f64> {
        if h == 1 {
            return DMatrix::from_fn(self.n_states, self.n_obs, |s, o| self.emit0[s][o]);
        }
        let marg = self.latent_marginals(behavior);
        let prev = &marg[h - 2];
        let mut joint = DMatrix::zeros(self.n_states, self.n_obs);
        for sp in 0..self.n_states {
            for o in 0..self.n_obs {
                let e = prev[sp] * self.emit[h - 2][sp][o];
                if e == 0.0 {
                    continue;
                }
                for a in 0..self.n_actions {
                    let w = e * behavior.probs[h - 2][sp][a];
                    for s in 0..self.n_states {
                        joint[(s, o)] += w * self.trans[h - 2][sp][a][s];
                    }
                }
            }
        }
        let cur = &marg[h - 1];
        for s in 0..self.n_states {
            if cur[s] > 0.0 {
                for o in 0..self.n_obs {
                    joint[(s, o)] /= cur[s];
                }
            } else {
                for o in 0..self.n_obs {
                    joint[(s, o)] = 0.0;
                }
            }
        }
        joint
    }
}

pub(crate) fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable value");
    hex::encode(Sha256::digest(&bytes))
}

/// Exact joint laws of `(S_h, Γ_{h-1})` under the behavior policy, one per step.
pub fn occupancy(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    class: HistoryClass,
) -> Result<Vec<Occupancy>> {
    enumerate::behavior_occupancy(model, behavior, class, DEFAULT_CAP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiagnostics {
    pub rank_tol: f64,
    /// Singular values of `P_h(O_h | S_h)`, decreasing, per step.
    pub forward: Vec<Vec<f64>>,
    /// Singular values of `P_h(O_{h-1} | S_h)`, decreasing, per step.
    pub backward: Vec<Vec<f64>>,
    pub rank_ok: Vec<bool>,
}

impl RankDiagnostics {
    pub fn all_ok(&self) -> bool {
        self.rank_ok.iter().all(|&b| b)
    }

    pub fn first_failure(&self) -> Option<usize> {
        self.rank_ok.iter().position(|&b| !b).map(|i| i + 1)
    }
}

/// True when `sv` (decreasing) has at least `rank` values above `RANK_TOL · σ_max`.
pub fn has_rank(sv: &[f64], rank: usize) -> bool {
    let smax = sv.first().copied().unwrap_or(0.0);
    smax > 0.0 && sv.len() >= rank && sv[rank - 1] > RANK_TOL * smax
}

pub fn rank_diagnostics(model: &TabularPomdp, behavior: &BehaviorPolicy) -> RankDiagnostics {
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    let mut rank_ok = Vec::new();
    for h in 1..=model.horizon {
        let f = singular_values(&model.forward_matrix(h));
        let b = singular_values(&model.backward_matrix(behavior, h));
        rank_ok.push(has_rank(&f, model.n_states) && has_rank(&b, model.n_states));
        forward.push(f);
        backward.push(b);
    }
    RankDiagnostics {
        rank_tol: RANK_TOL,
        forward,
        backward,
        rank_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;

    fn two_state_identity() -> TabularPomdp {
        let id = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        TabularPomdp {
            n_states: 2,
            n_obs: 2,
            n_actions: 2,
            horizon: 2,
            gamma: 1.0,
            mu1: vec![0.5, 0.5],
            trans: vec![vec![vec![vec![0.8, 0.2]; 2], vec![vec![0.3, 0.7]; 2]]; 2],
            emit: vec![id.clone(), id.clone()],
            emit0: id,
            reward: vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]; 2],
        }
    }

    #[test]
    fn identity_model_validates() {
        two_state_identity().validate().unwrap();
    }

    #[test]
    fn short_transition_row_names_its_index() {
        let mut m = two_state_identity();
        m.trans[0][1][0] = vec![0.78, 0.2];
        match m.validate() {
            Err(Error::Validation(f)) => assert_eq!(f, "trans[0][1][0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reward_out_of_range_is_rejected() {
        let mut m = two_state_identity();
        m.reward[1][0][1] = 1.5;
        match m.validate() {
            Err(Error::Validation(f)) => assert!(f.starts_with("reward"), "{f}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_emit0_defaults_to_first_emission() {
        let m = two_state_identity();
        let mut v = serde_json::to_value(&m).unwrap();
        v.as_object_mut().unwrap().remove("emit0");
        let back = TabularPomdp::from_json_str(&v.to_string()).unwrap();
        assert_eq!(back.emit0, m.emit[0]);
    }

    #[test]
    fn overflowing_number_is_rejected() {
        let text = serde_json::to_string(&two_state_identity())
            .unwrap()
            .replacen("\"gamma\":1.0", "\"gamma\":1e999", 1);
        let parsed = TabularPomdp::from_json_str(&text);
        assert!(parsed.is_err() || parsed.unwrap().validate().is_err());
    }

    #[test]
    fn identity_emission_has_unit_singular_values() {
        let m = two_state_identity();
        let b = BehaviorPolicy::uniform(&m);
        let d = rank_diagnostics(&m, &b);
        assert!(d.all_ok(), "{d:?}");
        for sv in &d.forward {
            assert!(sv.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
        assert!(d.backward[0].iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn constant_emission_is_rank_deficient() {
        let mut m = two_state_identity();
        let c = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        m.emit = vec![c.clone(), c.clone()];
        m.emit0 = c;
        let d = rank_diagnostics(&m, &BehaviorPolicy::uniform(&m));
        assert!(!d.all_ok());
        assert_eq!(d.first_failure(), Some(1));
        assert!(d.forward[0][1].abs() < 1e-12);
    }

    #[test]
    fn backward_matrix_rows_are_conditional_laws() {
        let (m, b) = instances::random_full_rank(11, 3, 4, 2, 3);
        for h in 1..=m.horizon {
            let bm = m.backward_matrix(&b, h);
            for s in 0..m.n_states {
                assert!((bm.row(s).sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
