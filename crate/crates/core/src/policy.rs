//! Behavior policies, history classes and target policies.
//!
//! A history atom is the tuple of `(o, a)` pairs a target policy may
//! condition on at step `h`: empty for reactive policies, pairs
//! `l..h-1` with `l = max(1, h-k)` for a window of `k`, and pairs
//! `1..h-1` for full-history policies.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{fingerprint_of, TabularPomdp, PROB_TOL};

pub type Pair = (usize, usize);

// ── Behavior ──

/// Latent-state behavior policy `probs[h][s][a] = π^b_h(a | s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl BehaviorPolicy {
    pub fn uniform(model: &TabularPomdp) -> Self {
        let row = vec![1.0 / model.n_actions as f64; model.n_actions];
        Self {
            probs: vec![vec![row; model.n_states]; model.horizon],
        }
    }

    pub fn validate(&self, model: &TabularPomdp) -> Result<()> {
        if self.probs.len() != model.horizon {
            return Err(Error::Validation("probs".into()));
        }
        for (h, layer) in self.probs.iter().enumerate() {
            if layer.len() != model.n_states {
                return Err(Error::Validation(format!("probs[{h}]")));
            }
            for (s, row) in layer.iter().enumerate() {
                let field = format!("probs[{h}][{s}]");
                if row.len() != model.n_actions || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(Error::Validation(field));
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > PROB_TOL {
                    return Err(Error::Validation(field));
                }
            }
        }
        Ok(())
    }

    /// Strict coverage: every entry is at least `min_prob`.
    pub fn check_coverage(&self, min_prob: f64) -> Result<()> {
        for (h, layer) in self.probs.iter().enumerate() {
            for (s, row) in layer.iter().enumerate() {
                if let Some(a) = row.iter().position(|&p| p < min_prob) {
                    return Err(Error::Validation(format!("probs[{h}][{s}][{a}]")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(self)
    }
}

// ── History classes ──

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryClass {
    Reactive,
    FiniteHistory(usize),
    FullHistory,
}

/// Which observations play the negative-control roles at a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeControls {
    /// `Z_h = O_{z_step}`.
    pub z_step: usize,
    /// `W_h = O_{w_step}`.
    pub w_step: usize,
}

impl HistoryClass {
    pub fn validate(&self) -> Result<()> {
        match self {
            HistoryClass::FiniteHistory(0) => Err(Error::Validation("history_class.k".into())),
            _ => Ok(()),
        }
    }

    /// First step `l` of the history window at step `h`.
    pub fn window_start(&self, h: usize) -> usize {
        match *self {
            HistoryClass::Reactive => h,
            HistoryClass::FiniteHistory(k) => h.saturating_sub(k).max(1),
            HistoryClass::FullHistory => 1,
        }
    }

    /// Number of `(o, a)` pairs in the atom at step `h`.
    pub fn atom_len(&self, h: usize) -> usize {
        h - self.window_start(h)
    }

    /// Longest atom over a horizon.
    pub fn max_atom_len(&self, horizon: usize) -> usize {
        (1..=horizon).map(|h| self.atom_len(h)).max().unwrap_or(0)
    }

    /// Pairs of trailing history that must be remembered to form both the
    /// atom and `Z_h`.
    pub fn memory(&self, horizon: usize) -> usize {
        match *self {
            HistoryClass::Reactive => 1,
            HistoryClass::FiniteHistory(k) => k + 1,
            HistoryClass::FullHistory => horizon,
        }
    }

    pub fn negative_controls(&self, h: usize) -> NegativeControls {
        NegativeControls {
            z_step: self.window_start(h) - 1,
            w_step: h,
        }
    }

    /// Atom at step `h` given the trailing pairs `past` (last entry is step `h-1`).
    pub fn atom<'a>(&self, h: usize, past: &'a [Pair]) -> &'a [Pair] {
        let len = self.atom_len(h);
        &past[past.len() - len..]
    }

    /// Value of `Z_h` given `o_0` and the trailing pairs.
    pub fn z_value(&self, h: usize, o0: usize, past: &[Pair]) -> usize {
        let z = self.negative_controls(h).z_step;
        if z == 0 {
            o0
        } else {
            past[past.len() - (h - z)].0
        }
    }
}

pub fn negative_controls(class: HistoryClass, h: usize) -> NegativeControls {
    class.negative_controls(h)
}

// ── Target policies ──

/// One-hot feature map ψ over `(a, o, atom)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OneHotPsi {
    pub n_actions: usize,
    pub n_obs: usize,
    pub max_history: usize,
}

impl OneHotPsi {
    pub fn n_atoms(&self) -> usize {
        let base = self.n_obs * self.n_actions;
        (0..=self.max_history).map(|j| base.pow(j as u32)).sum()
    }

    pub fn dim(&self) -> usize {
        self.n_actions * self.n_obs * self.n_atoms()
    }

    pub fn atom_index(&self, atom: &[Pair]) -> usize {
        let base = self.n_obs * self.n_actions;
        let offset: usize = (0..atom.len()).map(|j| base.pow(j as u32)).sum();
        let digits = atom.iter().fold(0, |acc, &(o, a)| acc * base + o * self.n_actions + a);
        offset + digits
    }

    pub fn index(&self, a: usize, o: usize, atom: &[Pair]) -> usize {
        (a * self.n_obs + o) * self.n_atoms() + self.atom_index(atom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub psi: OneHotPsi,
    pub beta: Vec<f64>,
    pub l_pi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableEntry {
    step: usize,
    obs: usize,
    history: Vec<Pair>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableDoc {
    n_actions: usize,
    entries: Vec<TableEntry>,
}

type TableKey = (usize, usize, Vec<Pair>);

/// Explicit action distributions keyed by `(step, o, atom)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TableDoc", into = "TableDoc")]
pub struct PolicyTable {
    pub n_actions: usize,
    keys: Vec<TableKey>,
    rows: Vec<Vec<f64>>,
    index: HashMap<TableKey, usize>,
}

impl From<TableDoc> for PolicyTable {
    fn from(doc: TableDoc) -> Self {
        let mut t = PolicyTable::new(doc.n_actions);
        for e in doc.entries {
            t.insert(e.step, e.obs, e.history, e.probs);
        }
        t
    }
}

impl From<PolicyTable> for TableDoc {
    fn from(t: PolicyTable) -> Self {
        TableDoc {
            n_actions: t.n_actions,
            entries: t
                .keys
                .into_iter()
                .zip(t.rows)
                .map(|((step, obs, history), probs)| TableEntry {
                    step,
                    obs,
                    history,
                    probs,
                })
                .collect(),
        }
    }
}

impl PolicyTable {
    pub fn new(n_actions: usize) -> Self {
        Self {
            n_actions,
            keys: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces the row for `(step, obs, history)`.
    pub fn insert(&mut self, step: usize, obs: usize, history: Vec<Pair>, probs: Vec<f64>) {
        let key = (step, obs, history);
        if let Some(&i) = self.index.get(&key) {
            self.rows[i] = probs;
        } else {
            self.index.insert(key.clone(), self.rows.len());
            self.keys.push(key);
            self.rows.push(probs);
        }
    }

    pub fn get(&self, step: usize, obs: usize, history: &[Pair]) -> Option<&[f64]> {
        self.index
            .get(&(step, obs, history.to_vec()))
            .map(|&i| self.rows[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyForm {
    Table(PolicyTable),
    LinearSoftmax(SoftmaxPolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPolicy {
    pub history_class: HistoryClass,
    pub form: PolicyForm,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

impl TargetPolicy {
    pub fn n_actions(&self) -> usize {
        match &self.form {
            PolicyForm::Table(t) => t.n_actions,
            PolicyForm::LinearSoftmax(p) => p.psi.n_actions,
        }
    }

    /// Uniform softmax policy (β = 0) for a class.
    pub fn uniform(model: &TabularPomdp, class: HistoryClass) -> Self {
        let psi = OneHotPsi {
            n_actions: model.n_actions,
            n_obs: model.n_obs,
            max_history: class.max_atom_len(model.horizon),
        };
        Self {
            history_class: class,
            form: PolicyForm::LinearSoftmax(SoftmaxPolicy {
                psi,
                beta: vec![0.0; psi.dim()],
                l_pi: 0.0,
            }),
        }
    }

    /// Reactive table policy from a per-step map `choice[h-1][o]` of probability rows.
    pub fn reactive_table(rows: &[Vec<Vec<f64>>]) -> Self {
        let n_actions = rows[0][0].len();
        let mut t = PolicyTable::new(n_actions);
        for (h, layer) in rows.iter().enumerate() {
            for (o, row) in layer.iter().enumerate() {
                t.insert(h + 1, o, Vec::new(), row.clone());
            }
        }
        Self {
            history_class: HistoryClass::Reactive,
            form: PolicyForm::Table(t),
        }
    }

    /// Action distribution `π_h(· | o, atom)`.
    pub fn action_probs(&self, h: usize, o: usize, atom: &[Pair]) -> Result<Vec<f64>> {
        match &self.form {
            PolicyForm::Table(t) => t.get(h, o, atom).map(|r| r.to_vec()).ok_or_else(|| {
                Error::UnknownHistoryAtom {
                    step: h,
                    obs: o,
                    history: atom.to_vec(),
                }
            }),
            PolicyForm::LinearSoftmax(p) => {
                let logits: Vec<f64> = (0..p.psi.n_actions)
                    .map(|a| p.beta[p.psi.index(a, o, atom)])
                    .collect();
                Ok(softmax(&logits))
            }
        }
    }

    pub fn action_prob(&self, h: usize, a: usize, o: usize, atom: &[Pair]) -> Result<f64> {
        Ok(self.action_probs(h, o, atom)?[a])
    }

    pub fn validate(&self, model: &TabularPomdp) -> Result<()> {
        self.history_class.validate()?;
        match &self.form {
            PolicyForm::Table(t) => {
                if t.n_actions != model.n_actions {
                    return Err(Error::Validation("form.table.n_actions".into()));
                }
                for (i, (key, row)) in t.keys.iter().zip(&t.rows).enumerate() {
                    let field = format!("form.table.entries[{i}]");
                    let (step, obs, hist) = key;
                    if *step == 0
                        || *step > model.horizon
                        || *obs >= model.n_obs
                        || hist.len() != self.history_class.atom_len(*step)
                        || hist.iter().any(|&(o, a)| o >= model.n_obs || a >= model.n_actions)
                    {
                        return Err(Error::Validation(field));
                    }
                    if row.len() != model.n_actions
                        || row.iter().any(|p| !p.is_finite() || *p < 0.0)
                        || (row.iter().sum::<f64>() - 1.0).abs() > PROB_TOL
                    {
                        return Err(Error::Validation(field + ".probs"));
                    }
                }
            }
            PolicyForm::LinearSoftmax(p) => {
                let need = OneHotPsi {
                    n_actions: model.n_actions,
                    n_obs: model.n_obs,
                    max_history: self.history_class.max_atom_len(model.horizon),
                };
                if p.psi.n_actions != need.n_actions
                    || p.psi.n_obs != need.n_obs
                    || p.psi.max_history < need.max_history
                {
                    return Err(Error::Validation("form.linear_softmax.psi".into()));
                }
                if p.beta.len() != p.psi.dim() || p.beta.iter().any(|b| !b.is_finite()) {
                    return Err(Error::Validation("form.linear_softmax.beta".into()));
                }
                let norm = p.beta.iter().map(|b| b * b).sum::<f64>().sqrt();
                if norm > p.l_pi * (1.0 + 1e-12) {
                    return Err(Error::Validation("form.linear_softmax.l_pi".into()));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

// ── Policy sets ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Enumerated,
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySet {
    pub provenance: Provenance,
    pub history_class: HistoryClass,
    pub policies: Vec<TargetPolicy>,
}

impl PolicySet {
    pub fn validate(&self, model: &TabularPomdp) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::Validation("policies".into()));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if p.history_class != self.history_class {
                return Err(Error::Validation(format!("policies[{i}].history_class")));
            }
            p.validate(model)
                .map_err(|e| Error::Validation(format!("policies[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Shape of sampled softmax members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxParams {
    pub n_actions: usize,
    pub n_obs: usize,
    pub horizon: usize,
    pub l_pi: f64,
}

/// Uniform policy followed by `count - 1` softmax policies with β drawn
/// uniformly from the ball of radius `L_π`.
pub fn sample_policy_set(class: HistoryClass, count: usize, seed: u64, params: SoftmaxParams) -> PolicySet {
    let psi = OneHotPsi {
        n_actions: params.n_actions,
        n_obs: params.n_obs,
        max_history: class.max_atom_len(params.horizon),
    };
    let d = psi.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut policies = Vec::with_capacity(count);
    for i in 0..count.max(1) {
        let beta = if i == 0 {
            vec![0.0; d]
        } else {
            let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let u: f64 = rng.random();
            let radius = params.l_pi * u.powf(1.0 / d as f64);
            dir.into_iter().map(|x| x / norm * radius).collect()
        };
        policies.push(TargetPolicy {
            history_class: class,
            form: PolicyForm::LinearSoftmax(SoftmaxPolicy {
                psi,
                beta,
                l_pi: params.l_pi,
            }),
        });
    }
    PolicySet {
        provenance: Provenance::Sampled { seed },
        history_class: class,
        policies,
    }
}

/// Uniform reactive table followed by every deterministic reactive policy,
/// in lexicographic order of the action assignment.
pub fn deterministic_reactive_set(n_obs: usize, n_actions: usize, horizon: usize) -> Result<PolicySet> {
    let slots = n_obs * horizon;
    let count = (n_actions as f64).powi(slots as i32);
    if count > 4096.0 {
        return Err(Error::InvalidArgument(format!(
            "{count} deterministic reactive policies exceed the enumeration limit"
        )));
    }
    let uniform = vec![vec![vec![1.0 / n_actions as f64; n_actions]; n_obs]; horizon];
    let mut policies = vec![TargetPolicy::reactive_table(&uniform)];
    for code in 0..count as usize {
        let mut rows = vec![vec![vec![0.0; n_actions]; n_obs]; horizon];
        let mut c = code;
        for slot in (0..slots).rev() {
            let a = c % n_actions;
            c /= n_actions;
            rows[slot / n_obs][slot % n_obs][a] = 1.0;
        }
        policies.push(TargetPolicy::reactive_table(&rows));
    }
    Ok(PolicySet {
        provenance: Provenance::Enumerated,
        history_class: HistoryClass::Reactive,
        policies,
    })
}
