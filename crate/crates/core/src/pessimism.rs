//! Confidence regions over finite candidate grids, pessimistic values and
//! policy selection.
//!
//! Layer `h` of a grid holds candidates for `b_h`. The edge `(i, j)` at step
//! `h < H` pairs candidate `i` of layer `h` with candidate `j` of layer
//! `h + 1`; layer `H` has a single column for the zero continuation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{fit_chain, Bounds, DualSolver, FeatureMap, LinearBridge, MinimaxFit, PolicyMoments};
use crate::policy::PolicySet;
use crate::simulate::OfflineDataset;

/// Confidence level parameter for the linear-class schedule.
#[allow(clippy::too_many_arguments)]
pub fn xi_schedule(n: usize, d: usize, horizon: usize, m_b: f64, m_g: f64, l_b: f64, l_pi: f64, delta: f64, c1: f64) -> f64 {
    let n = n as f64;
    let log_term = (1.0 + l_b * l_pi * horizon as f64 * n / delta).ln();
    c1 * m_b * m_b * m_g * m_g * d as f64 * horizon as f64 * log_term / n
}

// ── Candidate grid ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Fitted,
    Zero,
    Perturbed { seed: u64, radius: f64 },
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub perturbations: usize,
    pub radius: f64,
    pub seed: u64,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            perturbations: 16,
            radius: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    /// `layers[h-1]` lists the candidates for `b_h`.
    pub layers: Vec<Vec<LinearBridge>>,
    pub sources: Vec<Vec<CandidateSource>>,
}

impl CandidateGrid {
    /// Fitted chain at index 0, zero bridge at index 1, then seeded
    /// perturbations of the fitted bridge drawn uniformly from a ball and
    /// clipped to `‖θ‖ ≤ L_b`.
    pub fn around(fits: &[MinimaxFit], params: &GridParams, stream: u64, l_b: f64) -> Self {
        let mut layers = Vec::with_capacity(fits.len());
        let mut sources = Vec::with_capacity(fits.len());
        for fit in fits {
            let h = fit.bridge.step;
            let d = fit.bridge.theta.len();
            let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
            rng.set_stream(stream.wrapping_mul(1 << 16).wrapping_add(h as u64));
            let mut layer = vec![fit.bridge.clone(), LinearBridge::zero(h, d)];
            let mut src = vec![CandidateSource::Fitted, CandidateSource::Zero];
            for _ in 0..params.perturbations {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let u: f64 = rng.random();
                let r = params.radius * u.powf(1.0 / d as f64);
                let mut theta: Vec<f64> = fit.bridge.theta.iter().zip(&dir).map(|(t, x)| t + r * x / norm).collect();
                let tn = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
                if tn > l_b {
                    theta.iter_mut().for_each(|x| *x *= l_b / tn);
                }
                layer.push(LinearBridge { step: h, theta });
                src.push(CandidateSource::Perturbed {
                    seed: params.seed,
                    radius: params.radius,
                });
            }
            layers.push(layer);
            sources.push(src);
        }
        Self { layers, sources }
    }

    /// Appends one candidate per layer; returns their indices.
    pub fn inject(&mut self, chain: &[LinearBridge], source: CandidateSource) -> Vec<usize> {
        let mut idx = Vec::with_capacity(chain.len());
        for (b, (layer, src)) in chain.iter().zip(self.layers.iter_mut().zip(self.sources.iter_mut())) {
            idx.push(layer.len());
            layer.push(b.clone());
            src.push(source.clone());
        }
        idx
    }

    pub fn horizon(&self) -> usize {
        self.layers.len()
    }
}

// ── Region ──

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRegion {
    pub xi: f64,
    /// `values[h-1][(i, j)] = m̂_h(i, j)`; one column at the last step.
    pub values: Vec<DMatrix<f64>>,
    pub col_min: Vec<Vec<f64>>,
    pub feasible: Vec<Vec<Vec<bool>>>,
}

impl ConfidenceRegion {
    pub fn is_feasible(&self, h: usize, i: usize, j: usize) -> bool {
        self.feasible[h - 1][i][j]
    }

    /// True when the chain (one index per layer, continuation zero at `H`) satisfies every edge.
    pub fn chain_feasible(&self, chain: &[usize]) -> bool {
        let horizon = self.feasible.len();
        (1..=horizon).all(|h| {
            let j = if h < horizon { chain[h] } else { 0 };
            self.is_feasible(h, chain[h - 1], j)
        })
    }

    /// Same region with a different level.
    pub fn with_xi(&self, xi: f64) -> Self {
        let feasible = self
            .values
            .iter()
            .zip(&self.col_min)
            .map(|(v, mins)| {
                (0..v.nrows())
                    .map(|i| (0..v.ncols()).map(|j| v[(i, j)] - mins[j] <= xi).collect())
                    .collect()
            })
            .collect();
        Self {
            xi,
            values: self.values.clone(),
            col_min: self.col_min.clone(),
            feasible,
        }
    }
}

pub fn build_region(
    moments: &PolicyMoments,
    grid: &CandidateGrid,
    lambda: f64,
    l_g: f64,
    xi: f64,
) -> Result<ConfidenceRegion> {
    let horizon = grid.horizon();
    let mut values = Vec::with_capacity(horizon);
    let mut col_min = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let st = &moments.steps[h - 1];
        let dual = DualSolver::new(&st.sigma, lambda, l_g)?;
        let fitted: Vec<DVector<f64>> = grid.layers[h - 1].iter().map(|b| &st.a_hat * b.theta_vec()).collect();
        let targets: Vec<DVector<f64>> = if h < horizon {
            grid.layers[h].iter().map(|b| st.target(Some(&b.theta_vec()))).collect()
        } else {
            vec![st.target(None)]
        };
        let mut v = DMatrix::zeros(fitted.len(), targets.len());
        for (j, c) in targets.iter().enumerate() {
            for (i, ai) in fitted.iter().enumerate() {
                v[(i, j)] = dual.maximize(&(ai - c)).value;
            }
        }
        let mins: Vec<f64> = (0..v.ncols()).map(|j| v.column(j).min()).collect();
        values.push(v);
        col_min.push(mins);
    }
    let region = ConfidenceRegion {
        xi,
        values,
        col_min,
        feasible: Vec::new(),
    };
    Ok(region.with_xi(xi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PessimisticValue {
    pub value: f64,
    /// Witness chain, one candidate index per layer.
    pub chain: Vec<usize>,
    /// Number of reachable candidates per layer.
    pub reachable: Vec<usize>,
}

/// Backward reachability followed by a minimum of `F̂` over reachable heads.
pub fn pessimistic_value(
    moments: &PolicyMoments,
    region: &ConfidenceRegion,
    grid: &CandidateGrid,
) -> Result<PessimisticValue> {
    let horizon = grid.horizon();
    let mut reach: Vec<Vec<bool>> = vec![Vec::new(); horizon];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); horizon];
    reach[horizon - 1] = (0..grid.layers[horizon - 1].len())
        .map(|i| region.is_feasible(horizon, i, 0))
        .collect();
    succ[horizon - 1] = vec![0; grid.layers[horizon - 1].len()];
    for h in (1..horizon).rev() {
        let m = grid.layers[h - 1].len();
        let mut r = vec![false; m];
        let mut s = vec![0; m];
        for i in 0..m {
            if let Some(j) = (0..grid.layers[h].len()).find(|&j| reach[h][j] && region.is_feasible(h, i, j)) {
                r[i] = true;
                s[i] = j;
            }
        }
        reach[h - 1] = r;
        succ[h - 1] = s;
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in grid.layers[0].iter().enumerate() {
        if !reach[0][i] {
            continue;
        }
        let f = moments.head_value(&b.theta_vec());
        if best.is_none_or(|(_, v)| f < v) {
            best = Some((i, f));
        }
    }
    let (head, value) = best.ok_or(Error::EmptyRegion)?;
    let mut chain = vec![head];
    for h in 1..horizon {
        let prev = chain[h - 1];
        chain.push(succ[h - 1][prev]);
    }
    Ok(PessimisticValue {
        value,
        chain,
        reachable: reach.iter().map(|r| r.iter().filter(|&&x| x).count()).collect(),
    })
}

// ── Policy selection ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P3oConfig {
    pub lambda: f64,
    pub c1: f64,
    pub delta: f64,
    pub l_pi: f64,
    pub bounds: Bounds,
    pub grid: GridParams,
}

impl Default for P3oConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            c1: 1.0,
            delta: 0.1,
            l_pi: 10.0,
            // Large enough to contain the exact bridges of the two-state benchmark.
            bounds: Bounds {
                l_b: 4.0,
                l_g: 4.0,
                m_b: 2.5,
                m_g: 1.0,
            },
            grid: GridParams::default(),
        }
    }
}

impl P3oConfig {
    pub fn xi(&self, n: usize, d: usize, horizon: usize) -> f64 {
        let b = self.bounds;
        xi_schedule(n, d, horizon, b.m_b, b.m_g, b.l_b, self.l_pi, self.delta, self.c1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub index: usize,
    /// `None` stands for the −∞ sentinel of a failed or empty region.
    pub j_pess: Option<f64>,
    pub f_hat_fitted: Option<f64>,
    pub reachable: Vec<usize>,
    pub chain: Vec<usize>,
    pub m_b_violations: usize,
    pub error: Option<String>,
    pub true_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PessimismReport {
    pub artifact_version: String,
    pub n: usize,
    pub xi: f64,
    pub grid_size: usize,
    pub policies: Vec<PolicyOutcome>,
    pub selected: Option<usize>,
    pub best_true_value: Option<f64>,
    pub suboptimality: Option<f64>,
    pub notes: Vec<String>,
}

/// Evaluates one policy: fit, grid, region and pessimistic value.
pub struct PolicyRun {
    pub moments: PolicyMoments,
    pub fits: Vec<MinimaxFit>,
    pub grid: CandidateGrid,
    pub region: ConfidenceRegion,
    pub value: PessimisticValue,
}

pub fn run_policy(
    dataset: &OfflineDataset,
    policy: &crate::policy::TargetPolicy,
    fm: &FeatureMap,
    gamma: f64,
    config: &P3oConfig,
    stream: u64,
    inject: Option<&[LinearBridge]>,
) -> Result<PolicyRun> {
    let moments = PolicyMoments::from_dataset(dataset, policy, fm, gamma)?;
    let fits = fit_chain(&moments, fm, config.lambda)?;
    let mut grid = CandidateGrid::around(&fits, &config.grid, stream, fm.bounds.l_b);
    if let Some(chain) = inject {
        grid.inject(chain, CandidateSource::User);
    }
    let xi = config.xi(dataset.len(), fm.dim(), dataset.horizon);
    let region = build_region(&moments, &grid, config.lambda, fm.bounds.l_g, xi)?;
    let value = pessimistic_value(&moments, &region, &grid)?;
    Ok(PolicyRun {
        moments,
        fits,
        grid,
        region,
        value,
    })
}

/// Lowest-index argmax over finite scores; `None` entries never win.
pub fn argmax_lowest(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = *s {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

pub fn p3o(dataset: &OfflineDataset, set: &PolicySet, fm: &FeatureMap, gamma: f64, config: &P3oConfig) -> PessimismReport {
    let xi = config.xi(dataset.len(), fm.dim(), dataset.horizon);
    let policies: Vec<PolicyOutcome> = set
        .policies
        .par_iter()
        .enumerate()
        .map(|(index, policy)| match run_policy(dataset, policy, fm, gamma, config, index as u64, None) {
            Ok(run) => PolicyOutcome {
                index,
                j_pess: Some(run.value.value),
                f_hat_fitted: Some(run.moments.head_value(&run.fits[0].bridge.theta_vec())),
                reachable: run.value.reachable,
                chain: run.value.chain,
                m_b_violations: run.fits.iter().filter(|f| f.diagnostics.m_b_violated).count(),
                error: None,
                true_value: None,
            },
            Err(e) => PolicyOutcome {
                index,
                j_pess: None,
                f_hat_fitted: None,
                reachable: Vec::new(),
                chain: Vec::new(),
                m_b_violations: 0,
                error: Some(e.to_string()),
                true_value: None,
            },
        })
        .collect();
    let scores: Vec<Option<f64>> = policies.iter().map(|p| p.j_pess).collect();
    PessimismReport {
        artifact_version: crate::artifact_version(),
        n: dataset.len(),
        xi,
        grid_size: 2 + config.grid.perturbations,
        selected: argmax_lowest(&scores),
        policies,
        best_true_value: None,
        suboptimality: None,
        notes: vec!["xi follows a fixed schedule; adaptive or bootstrap calibration is not implemented".into()],
    }
}

impl PessimismReport {
    /// Attaches oracle values and the suboptimality of the selected policy.
    pub fn attach_truth(&mut self, values: &[f64]) {
        for (p, &v) in self.policies.iter_mut().zip(values) {
            p.true_value = Some(v);
        }
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.best_true_value = Some(best);
        self.suboptimality = self.selected.map(|i| best - values[i]);
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n = {}  xi = {:.6}  grid = {}", self.n, self.xi, self.grid_size);
        let _ = writeln!(out, "{:>6}  {:>12}  {:>12}  {:>12}  reachable", "policy", "J_pess", "F_hat", "J_true");
        let fmt = |x: Option<f64>| x.map_or_else(|| "-inf".to_string(), |v| format!("{v:.6}"));
        for p in &self.policies {
            let mark = if Some(p.index) == self.selected { "*" } else { " " };
            let _ = writeln!(
                out,
                "{:>5}{}  {:>12}  {:>12}  {:>12}  {:?}",
                p.index,
                mark,
                fmt(p.j_pess),
                fmt(p.f_hat_fitted),
                p.true_value.map_or_else(|| "-".into(), |v| format!("{v:.6}")),
                p.reachable
            );
        }
        if let Some(s) = self.suboptimality {
            let _ = writeln!(out, "suboptimality of selected policy: {s:.6}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xi_schedule_arithmetic() {
        let xi = xi_schedule(1000, 4, 2, 1.0, 1.0, 1.0, 1.0, 0.1, 1.0);
        let expect = 8.0 * (20001.0_f64).ln() / 1000.0;
        assert!((xi - expect).abs() < 1e-15);
        assert_eq!(xi_schedule(1000, 4, 2, 1.0, 1.0, 1.0, 1.0, 0.1, 0.0), 0.0);
        assert!(xi_schedule(2000, 4, 2, 1.0, 1.0, 1.0, 1.0, 0.1, 1.0) < xi);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax_lowest(&[Some(1.0), Some(1.0)]), Some(0));
        assert_eq!(argmax_lowest(&[None, Some(-5.0), Some(-5.0)]), Some(1));
        assert_eq!(argmax_lowest(&[None, None]), None);
    }
}
