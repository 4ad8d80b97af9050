//! Confounder-ignoring baseline: tabular fitted-Q evaluation that treats the
//! current observation as the state, followed by greedy selection over the
//! policy set without any pessimism.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::pessimism::argmax_lowest;
use crate::policy::{Pair, PolicySet, TargetPolicy};
use crate::simulate::OfflineDataset;

/// Fitted-Q estimate of `J(π)` with `Q_h` tabulated over `(o_h, a_h)`.
pub fn fitted_q_value(
    dataset: &OfflineDataset,
    policy: &TargetPolicy,
    n_obs: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<f64> {
    let horizon = dataset.horizon;
    let class = policy.history_class;
    let pairs: Vec<Vec<Pair>> = dataset
        .trajectories
        .iter()
        .map(|t| t.steps.iter().map(|s| (s.o, s.a)).collect())
        .collect();
    let mut q_next: Option<Vec<Vec<f64>>> = None;
    for h in (1..=horizon).rev() {
        let mut sum = vec![vec![0.0; n_actions]; n_obs];
        let mut count = vec![vec![0.0; n_actions]; n_obs];
        for (t, p) in dataset.trajectories.iter().zip(&pairs) {
            let s = &t.steps[h - 1];
            let mut y = s.r;
            if let Some(q) = &q_next {
                let o2 = t.steps[h].o;
                let probs = policy.action_probs(h + 1, o2, class.atom(h + 1, &p[..h]))?;
                y += gamma * probs.iter().zip(&q[o2]).map(|(pa, qa)| pa * qa).sum::<f64>();
            }
            sum[s.o][s.a] += y;
            count[s.o][s.a] += 1.0;
        }
        let q: Vec<Vec<f64>> = sum
            .iter()
            .zip(&count)
            .map(|(sr, cr)| sr.iter().zip(cr).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect())
            .collect();
        q_next = Some(q);
    }
    let q1 = q_next.expect("horizon is at least one");
    let mut total = 0.0;
    for t in &dataset.trajectories {
        let o = t.steps[0].o;
        let probs = policy.action_probs(1, o, &[])?;
        total += probs.iter().zip(&q1[o]).map(|(pa, qa)| pa * qa).sum::<f64>();
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub estimates: Vec<Option<f64>>,
    pub selected: Option<usize>,
}

/// Greedy argmax of the fitted-Q estimates, lowest index on ties.
pub fn select(dataset: &OfflineDataset, set: &PolicySet, n_obs: usize, n_actions: usize, gamma: f64) -> BaselineReport {
    let estimates: Vec<Option<f64>> = set
        .policies
        .iter()
        .map(|p| fitted_q_value(dataset, p, n_obs, n_actions, gamma).ok())
        .collect();
    BaselineReport {
        selected: argmax_lowest(&estimates),
        estimates,
    }
}
