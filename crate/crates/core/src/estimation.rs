//! Linear minimax estimation of value bridges from confounded data.
//!
//! Bridges are `b(a, w) = ⟨φ(a, w), θ⟩` and dual test functions are
//! `g(a, z) = ⟨ν(a, z), ω⟩`. For a fixed pair `(θ_h, θ_{h+1})` the inner
//! maximum over the `L_g`-ball has a closed form in the eigenbasis of the
//! dual second-moment matrix. The empirical moment vector is affine in both
//! parameters, `û = Â θ_h − ĉ_R − γ Ĉ θ_{h+1}`, so each policy's data is
//! reduced once to a handful of small matrices.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ball_secular, FlooredSpectrum};
use crate::model::TabularPomdp;
use crate::oracle::{Population, Table};
use crate::policy::{BehaviorPolicy, Pair, TargetPolicy};
use crate::simulate::{OfflineDataset, Trajectory};

// ── Features and bridges ──

/// Norm bounds of the primal and dual linear classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub l_b: f64,
    pub l_g: f64,
    pub m_b: f64,
    pub m_g: f64,
}

/// Tabular feature maps `φ(a, w)` and `ν(a, z)`, rows indexed by `a · |O| + o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_actions: usize,
    pub n_obs: usize,
    pub phi: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
    pub bounds: Bounds,
}

impl FeatureMap {
    /// Indicator features over `(a, w)` and `(a, z)`, so `d = |A|·|O|`.
    pub fn one_hot(n_actions: usize, n_obs: usize, bounds: Bounds) -> Self {
        let d = n_actions * n_obs;
        let eye: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            n_actions,
            n_obs,
            phi: eye.clone(),
            nu: eye,
            bounds,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }

    pub fn dual_dim(&self) -> usize {
        self.nu.first().map_or(0, Vec::len)
    }

    pub fn phi(&self, a: usize, w: usize) -> &[f64] {
        &self.phi[a * self.n_obs + w]
    }

    pub fn nu(&self, a: usize, z: usize) -> &[f64] {
        &self.nu[a * self.n_obs + z]
    }

    /// `ψ(w) = Σ_a φ(a, w)`, so `Σ_a b(a, w) = ⟨ψ(w), θ⟩`.
    pub fn psi(&self, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for a in 0..self.n_actions {
            for (o, x) in out.iter_mut().zip(self.phi(a, w)) {
                *o += x;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let rows = self.n_actions * self.n_obs;
        if self.phi.len() != rows || self.nu.len() != rows {
            return Err(Error::Validation("features.rows".into()));
        }
        let (d, dg) = (self.dim(), self.dual_dim());
        if d == 0 || dg == 0 {
            return Err(Error::Validation("features.dim".into()));
        }
        for (name, table, width) in [("phi", &self.phi, d), ("nu", &self.nu, dg)] {
            for (i, row) in table.iter().enumerate() {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if row.len() != width || !norm.is_finite() || norm > 1.0 + 1e-12 {
                    return Err(Error::Validation(format!("features.{name}[{i}]")));
                }
            }
        }
        let b = self.bounds;
        if !(b.l_b > 0.0 && b.l_g > 0.0 && b.m_b > 0.0 && b.m_g > 0.0) {
            return Err(Error::Validation("features.bounds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBridge {
    pub step: usize,
    pub theta: Vec<f64>,
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

impl LinearBridge {
    pub fn zero(step: usize, dim: usize) -> Self {
        Self {
            step,
            theta: vec![0.0; dim],
        }
    }

    pub fn eval(&self, fm: &FeatureMap, a: usize, w: usize) -> f64 {
        dot(fm.phi(a, w), &self.theta)
    }

    /// Inverse of `to_table` for indicator features.
    pub fn from_one_hot_table(step: usize, table: &Table) -> Self {
        Self {
            step,
            theta: table.iter().flatten().copied().collect(),
        }
    }

    pub fn to_table(&self, fm: &FeatureMap) -> Table {
        (0..fm.n_actions)
            .map(|a| (0..fm.n_obs).map(|w| self.eval(fm, a, w)).collect())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        dot(&self.theta, &self.theta).sqrt()
    }

    /// `sup_w |Σ_a b(a, w)|`.
    pub fn sup_sum(&self, fm: &FeatureMap) -> f64 {
        (0..fm.n_obs)
            .map(|w| dot(&fm.psi(w), &self.theta).abs())
            .fold(0.0, f64::max)
    }

    pub fn theta_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

// ── Samples and the inner maximum ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub varsigma: f64,
    pub nu: Vec<f64>,
}

/// Observable quantities of one trajectory at step `h`.
struct StepView<'a> {
    a: usize,
    w: usize,
    z: usize,
    r: f64,
    atom: &'a [Pair],
    next_w: Option<usize>,
}

fn step_view<'a>(t: &Trajectory, pairs: &'a [Pair], policy: &TargetPolicy, h: usize) -> StepView<'a> {
    let class = policy.history_class;
    let step = &t.steps[h - 1];
    StepView {
        a: step.a,
        w: step.o,
        z: t.obs(class.negative_controls(h).z_step),
        r: step.r,
        atom: class.atom(h, &pairs[..h - 1]),
        next_w: t.steps.get(h).map(|s| s.o),
    }
}

fn pairs_of(t: &Trajectory) -> Vec<Pair> {
    t.steps.iter().map(|s| (s.o, s.a)).collect()
}

/// One residual sample per trajectory at step `h`; `b_next = None` is the zero function.
pub fn residuals(
    dataset: &OfflineDataset,
    policy: &TargetPolicy,
    fm: &FeatureMap,
    gamma: f64,
    b_h: &LinearBridge,
    b_next: Option<&LinearBridge>,
    h: usize,
) -> Result<Vec<ResidualSample>> {
    let mut out = Vec::with_capacity(dataset.len());
    for t in &dataset.trajectories {
        let pairs = pairs_of(t);
        let v = step_view(t, &pairs, policy, h);
        let pi = policy.action_prob(h, v.a, v.w, v.atom)?;
        let cont = match (b_next, v.next_w) {
            (Some(b), Some(w2)) => dot(&fm.psi(w2), &b.theta),
            _ => 0.0,
        };
        out.push(ResidualSample {
            varsigma: b_h.eval(fm, v.a, v.w) - v.r * pi - gamma * cont * pi,
            nu: fm.nu(v.a, v.z).to_vec(),
        });
    }
    Ok(out)
}

/// Closed-form maximizer of `uᵀω − λ ωᵀΣω` over `‖ω‖ ≤ L_g`.
#[derive(Debug, Clone)]
pub struct DualSolver {
    spectrum: FlooredSpectrum,
    pub lambda: f64,
    pub l_g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOptimum {
    pub value: f64,
    pub omega: DVector<f64>,
    pub active: bool,
}

impl DualSolver {
    pub fn new(sigma: &DMatrix<f64>, lambda: f64, l_g: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        let spectrum = FlooredSpectrum::new(sigma).ok_or(Error::DegenerateDual)?;
        Ok(Self { spectrum, lambda, l_g })
    }

    pub fn ridge(&self) -> f64 {
        self.spectrum.floor
    }

    pub fn maximize(&self, u: &DVector<f64>) -> DualOptimum {
        let ut = self.spectrum.to_basis(u);
        let sol = ball_secular(&self.spectrum.values, &(&ut * 0.5), self.lambda, self.l_g);
        let quad: f64 = sol
            .x
            .iter()
            .zip(self.spectrum.values.iter())
            .map(|(w, s)| s * w * w)
            .sum();
        let value = (ut.dot(&sol.x) - self.lambda * quad).max(0.0);
        DualOptimum {
            value,
            omega: self.spectrum.from_basis(&sol.x),
            active: sol.active,
        }
    }
}

/// Empirical inner maximum from residual samples.
pub fn inner_max(samples: &[ResidualSample], lambda: f64, l_g: f64) -> Result<(f64, DVector<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no residual samples".into()))?;
    let d = first.nu.len();
    let n = samples.len() as f64;
    let mut u = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, d);
    for s in samples {
        let v = DVector::from_column_slice(&s.nu);
        u.axpy(s.varsigma / n, &v, 1.0);
        sigma.ger(1.0 / n, &v, &v, 1.0);
    }
    let opt = DualSolver::new(&sigma, lambda, l_g)?.maximize(&u);
    Ok((opt.value, opt.omega))
}

// ── Moments ──

/// Sufficient statistics of one policy's data at one step.
#[derive(Debug, Clone)]
pub struct StepMoments {
    pub step: usize,
    pub n: usize,
    /// `mean ν νᵀ`
    pub sigma: DMatrix<f64>,
    /// `mean ν φ(A, W)ᵀ`
    pub a_hat: DMatrix<f64>,
    /// `mean ν π R`
    pub c_reward: DVector<f64>,
    /// `mean ν π ψ(W')ᵀ`; zero at the last step.
    pub c_next: DMatrix<f64>,
    pub gamma: f64,
}

impl StepMoments {
    /// `û(θ_h, θ_{h+1})`.
    pub fn u(&self, theta: &DVector<f64>, theta_next: Option<&DVector<f64>>) -> DVector<f64> {
        let mut u = &self.a_hat * theta - &self.c_reward;
        if let Some(tn) = theta_next {
            u.gemv(-self.gamma, &self.c_next, tn, 1.0);
        }
        u
    }

    /// Target vector `ĉ = ĉ_R + γ Ĉ θ_{h+1}`.
    pub fn target(&self, theta_next: Option<&DVector<f64>>) -> DVector<f64> {
        let mut c = self.c_reward.clone();
        if let Some(tn) = theta_next {
            c.gemv(self.gamma, &self.c_next, tn, 1.0);
        }
        c
    }
}

/// Moments for every step plus the head functional `F̂(θ_1) = f̂ᵀθ_1`.
#[derive(Debug, Clone)]
pub struct PolicyMoments {
    pub steps: Vec<StepMoments>,
    pub head: DVector<f64>,
}

impl PolicyMoments {
    pub fn from_dataset(dataset: &OfflineDataset, policy: &TargetPolicy, fm: &FeatureMap, gamma: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let horizon = dataset.horizon;
        let n = dataset.len() as f64;
        // Cell sums keyed by observables; ordered maps keep reductions deterministic.
        let mut by_az: Vec<BTreeMap<(usize, usize), (f64, f64)>> = vec![BTreeMap::new(); horizon];
        let mut by_azw: Vec<BTreeMap<(usize, usize, usize), f64>> = vec![BTreeMap::new(); horizon];
        let mut by_azn: Vec<BTreeMap<(usize, usize, usize), f64>> = vec![BTreeMap::new(); horizon];
        let mut head_counts = vec![0.0; fm.n_obs];
        for t in &dataset.trajectories {
            let pairs = pairs_of(t);
            head_counts[t.steps[0].o] += 1.0;
            for h in 1..=horizon {
                let v = step_view(t, &pairs, policy, h);
                let pi = policy.action_prob(h, v.a, v.w, v.atom)?;
                let e = by_az[h - 1].entry((v.a, v.z)).or_insert((0.0, 0.0));
                e.0 += 1.0;
                e.1 += pi * v.r;
                *by_azw[h - 1].entry((v.a, v.z, v.w)).or_insert(0.0) += 1.0;
                if let Some(w2) = v.next_w {
                    *by_azn[h - 1].entry((v.a, v.z, w2)).or_insert(0.0) += pi;
                }
            }
        }
        let (d, dg) = (fm.dim(), fm.dual_dim());
        let mut steps = Vec::with_capacity(horizon);
        for h in 1..=horizon {
            let mut sigma = DMatrix::zeros(dg, dg);
            let mut c_reward = DVector::zeros(dg);
            for (&(a, z), &(count, pr)) in &by_az[h - 1] {
                let nu = DVector::from_column_slice(fm.nu(a, z));
                sigma.ger(count / n, &nu, &nu, 1.0);
                c_reward.axpy(pr / n, &nu, 1.0);
            }
            let mut a_hat = DMatrix::zeros(dg, d);
            for (&(a, z, w), &count) in &by_azw[h - 1] {
                let nu = DVector::from_column_slice(fm.nu(a, z));
                let phi = DVector::from_column_slice(fm.phi(a, w));
                a_hat.ger(count / n, &nu, &phi, 1.0);
            }
            let mut c_next = DMatrix::zeros(dg, d);
            for (&(a, z, w2), &mass) in &by_azn[h - 1] {
                let nu = DVector::from_column_slice(fm.nu(a, z));
                let psi = DVector::from_vec(fm.psi(w2));
                c_next.ger(mass / n, &nu, &psi, 1.0);
            }
            steps.push(StepMoments {
                step: h,
                n: dataset.len(),
                sigma,
                a_hat,
                c_reward,
                c_next,
                gamma,
            });
        }
        let mut head = DVector::zeros(d);
        for (w, &count) in head_counts.iter().enumerate() {
            head.axpy(count / n, &DVector::from_vec(fm.psi(w)), 1.0);
        }
        Ok(Self { steps, head })
    }

    /// `F̂(b_1) = Ê[Σ_a b_1(a, W_1)]`.
    pub fn head_value(&self, theta1: &DVector<f64>) -> f64 {
        self.head.dot(theta1)
    }
}

// ── Fitting ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub dual_ridge: f64,
    pub primal_ridge: f64,
    pub primal_constraint_active: bool,
    pub dual_constraint_active: bool,
    /// `sup_w |Σ_a b̂(a, w)|`, checked against `M_B`.
    pub sup_sum: f64,
    pub m_b_violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimaxFit {
    pub bridge: LinearBridge,
    /// `m̂(b̂_h, b_{h+1})`
    pub value: f64,
    pub diagnostics: FitDiagnostics,
}

/// Minimizes the inner maximum over `‖θ‖ ≤ L_b` for a fixed continuation.
pub fn fit_step(
    moments: &StepMoments,
    fm: &FeatureMap,
    theta_next: Option<&DVector<f64>>,
    lambda: f64,
) -> Result<MinimaxFit> {
    let bounds = fm.bounds;
    let dual = DualSolver::new(&moments.sigma, lambda, bounds.l_g)?;
    let c = moments.target(theta_next);
    // Whitened normal equations: N = Âᵀ Σ⁻¹ Â, r = Âᵀ Σ⁻¹ ĉ.
    let sinv_a = DMatrix::from_columns(
        &(0..moments.a_hat.ncols())
            .map(|j| dual.spectrum.solve(&moments.a_hat.column(j).into_owned()))
            .collect::<Vec<_>>(),
    );
    let normal = moments.a_hat.transpose() * &sinv_a;
    let rhs = sinv_a.transpose() * &c;
    let primal = FlooredSpectrum::new(&normal).ok_or(Error::DegeneratePrimal)?;
    let rt = primal.to_basis(&rhs);
    let sol = ball_secular(&primal.values, &rt, 1.0, bounds.l_b);
    let theta = primal.from_basis(&sol.x);
    let opt = dual.maximize(&moments.u(&theta, theta_next));
    let bridge = LinearBridge {
        step: moments.step,
        theta: theta.iter().copied().collect(),
    };
    let sup_sum = bridge.sup_sum(fm);
    Ok(MinimaxFit {
        value: opt.value,
        diagnostics: FitDiagnostics {
            dual_ridge: dual.ridge(),
            primal_ridge: primal.floor,
            primal_constraint_active: sol.active,
            dual_constraint_active: opt.active,
            sup_sum,
            m_b_violated: sup_sum > bounds.m_b,
        },
        bridge,
    })
}

/// Backward recursion from `h = H` with a zero continuation; returned in step order.
pub fn fit_chain(moments: &PolicyMoments, fm: &FeatureMap, lambda: f64) -> Result<Vec<MinimaxFit>> {
    let horizon = moments.steps.len();
    let mut fits: Vec<MinimaxFit> = Vec::with_capacity(horizon);
    let mut next: Option<DVector<f64>> = None;
    for h in (1..=horizon).rev() {
        let fit = fit_step(&moments.steps[h - 1], fm, next.as_ref(), lambda)?;
        next = Some(fit.bridge.theta_vec());
        fits.push(fit);
    }
    fits.reverse();
    Ok(fits)
}

// ── Population counterparts ──

/// Exact `L_h = E_b[ℓ_h²]` for linear bridges.
#[allow(clippy::too_many_arguments)]
pub fn population_rmse(
    model: &TabularPomdp,
    behavior: &BehaviorPolicy,
    policy: &TargetPolicy,
    fm: &FeatureMap,
    b_h: &LinearBridge,
    b_next: Option<&LinearBridge>,
    h: usize,
) -> Result<f64> {
    let pop = Population::new(model, behavior, policy.history_class)?;
    let next = b_next.map(|b| b.to_table(fm));
    Ok(pop.residual_table(policy, &b_h.to_table(fm), next.as_ref(), h)?.loss())
}

/// Population moments `(E[ς ν(A,Z)], E[ν νᵀ])` for tabular bridges and an
/// arbitrary dual feature map.
pub fn population_dual_moments(
    pop: &Population<'_>,
    policy: &TargetPolicy,
    fm: &FeatureMap,
    b_h: &Table,
    b_next: Option<&Table>,
    h: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let dg = fm.dual_dim();
    let mut u = DVector::zeros(dg);
    let mut sigma = DMatrix::zeros(dg, dg);
    pop.visit_steps(policy, h, b_next, |_, z, _, o, a, w, pi, k| {
        let nu = DVector::from_column_slice(fm.nu(a, z));
        let varsigma = b_h[a][o] - pi * k;
        u.axpy(w * varsigma, &nu, 1.0);
        sigma.ger(w, &nu, &nu, 1.0);
    })?;
    Ok((u, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::policy::HistoryClass;
    use crate::simulate::generate;

    fn bounds() -> Bounds {
        Bounds { l_b: 10.0, l_g: 1e6, m_b: 10.0, m_g: 1e6 }
    }

    fn scalar_samples(u: f64) -> Vec<ResidualSample> {
        vec![ResidualSample { varsigma: u, nu: vec![1.0] }]
    }

    #[test]
    fn inner_max_scalar_cases() {
        let (v, w) = inner_max(&scalar_samples(0.0), 1.0, 100.0).unwrap();
        assert_eq!((v, w[0]), (0.0, 0.0));
        let (v, w) = inner_max(&scalar_samples(3.0), 1.0, 100.0).unwrap();
        assert!((v - 9.0 / 4.0).abs() < 1e-9 && (w[0] - 1.5).abs() < 1e-9);
        let (v, w) = inner_max(&scalar_samples(10.0), 1.0, 1.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-9 && (v - 9.0).abs() < 1e-8);
    }

    #[test]
    fn degenerate_dual_is_reported() {
        let s = vec![ResidualSample { varsigma: 1.0, nu: vec![0.0, 0.0] }];
        assert!(matches!(inner_max(&s, 1.0, 1.0), Err(Error::DegenerateDual)));
    }

    #[test]
    fn scalar_fit_matches_formula() {
        // Σ̂ = 0.5, Â = 0.25, ĉ = 0.1 → θ = ĉ / Â = 0.4 when unconstrained.
        let m = StepMoments {
            step: 1,
            n: 1,
            sigma: DMatrix::from_element(1, 1, 0.5),
            a_hat: DMatrix::from_element(1, 1, 0.25),
            c_reward: DVector::from_element(1, 0.1),
            c_next: DMatrix::zeros(1, 1),
            gamma: 1.0,
        };
        let mut fm = FeatureMap::one_hot(1, 1, bounds());
        let fit = fit_step(&m, &fm, None, 1.0).unwrap();
        assert!((fit.bridge.theta[0] - 0.4).abs() < 1e-12);
        assert!(fit.value < 1e-20);
        fm.bounds.l_b = 0.3;
        let fit = fit_step(&m, &fm, None, 1.0).unwrap();
        assert!((fit.bridge.theta[0] - 0.3).abs() < 1e-9);
        assert!(fit.diagnostics.primal_constraint_active);
    }

    #[test]
    fn residuals_match_hand_arithmetic() {
        let (m, b) = instances::confounded();
        let d = generate(&m, &b, 1, 4);
        let t = &d.trajectories[0];
        let fm = FeatureMap::one_hot(2, 2, bounds());
        let policy = TargetPolicy::reactive_table(&vec![vec![vec![0.3, 0.7], vec![0.6, 0.4]]; 2]);
        let b1 = LinearBridge { step: 1, theta: vec![0.1, 0.2, 0.3, 0.4] };
        let b2 = LinearBridge { step: 2, theta: vec![1.0, -1.0, 0.5, 0.25] };
        let s = residuals(&d, &policy, &fm, 0.9, &b1, Some(&b2), 1).unwrap();
        let (o, a, r) = (t.steps[0].o, t.steps[0].a, t.steps[0].r);
        let pi = policy.action_prob(1, a, o, &[]).unwrap();
        let w2 = t.steps[1].o;
        let cont = b2.theta[w2] + b2.theta[2 + w2];
        let expect = b1.theta[a * 2 + o] - r * pi - 0.9 * cont * pi;
        assert!((s[0].varsigma - expect).abs() < 1e-15);
        assert_eq!(s[0].nu[a * 2 + t.o0], 1.0);
    }

    #[test]
    fn moments_agree_with_sample_route() {
        let (m, b) = instances::random_full_rank(6, 2, 3, 2, 3);
        let d = generate(&m, &b, 400, 1);
        let fm = FeatureMap::one_hot(2, 3, bounds());
        let policy = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let pm = PolicyMoments::from_dataset(&d, &policy, &fm, m.gamma).unwrap();
        let th = LinearBridge { step: 2, theta: (0..6).map(|i| i as f64 * 0.1 - 0.2).collect() };
        let tn = LinearBridge { step: 3, theta: (0..6).map(|i| 0.3 - i as f64 * 0.05).collect() };
        let samples = residuals(&d, &policy, &fm, m.gamma, &th, Some(&tn), 2).unwrap();
        let (v1, _) = inner_max(&samples, 1.0, 5.0).unwrap();
        let st = &pm.steps[1];
        let u = st.u(&th.theta_vec(), Some(&tn.theta_vec()));
        let v2 = DualSolver::new(&st.sigma, 1.0, 5.0).unwrap().maximize(&u).value;
        assert!((v1 - v2).abs() < 1e-12, "{v1} vs {v2}");
    }

    #[test]
    fn zero_reward_chain_is_zero() {
        let inst = instances::build("zero-reward", 0).unwrap();
        let d = generate(&inst.model, &inst.behavior, 500, 3);
        let fm = FeatureMap::one_hot(2, 2, bounds());
        let policy = TargetPolicy::uniform(&inst.model, HistoryClass::Reactive);
        let pm = PolicyMoments::from_dataset(&d, &policy, &fm, 1.0).unwrap();
        for fit in fit_chain(&pm, &fm, 1.0).unwrap() {
            assert!(fit.bridge.theta.iter().all(|x| x.abs() < 1e-12));
            assert!(fit.value.abs() < 1e-20);
        }
    }

    #[test]
    fn single_cell_perturbation_loss() {
        let (m, b) = instances::identity_emission();
        let policy = TargetPolicy::uniform(&m, HistoryClass::Reactive);
        let pop = Population::new(&m, &b, HistoryClass::Reactive).unwrap();
        let exact = pop.value_bridge(&policy).unwrap();
        let delta = 0.3;
        let mut pert = exact.tables[1].clone();
        pert[1][0] += delta;
        let loss = pop.residual_table(&policy, &pert, None, 2).unwrap().loss();
        // Identity emission: W_2 = S_2, and the perturbed cell is (a = 1, w = 0).
        // ℓ(1, z) = δ · P(S_2 = 0 | A_2 = 1, O_1 = z).
        let marg = m.latent_marginals(&b);
        let mut expect = 0.0;
        for z in 0..2 {
            let mut joint = [0.0; 2];
            for s in 0..2 {
                let back = m.backward_matrix(&b, 2)[(s, z)];
                joint[s] = marg[1][s] * back * b.probs[1][s][1];
            }
            let mass: f64 = joint.iter().sum();
            expect += (delta * joint[0]).powi(2) / mass;
        }
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }
}
