//! Confounded trajectory generation and JSON Lines persistence.
//!
//! Trajectory `i` draws from ChaCha20 seeded with the dataset seed on
//! stream `i`, so the output does not depend on `n` or on thread count.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TabularPomdp;
use crate::policy::BehaviorPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub o: usize,
    pub a: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub o0: usize,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// Observation `O_j` for `j ∈ 0..=H`.
    pub fn obs(&self, j: usize) -> usize {
        if j == 0 {
            self.o0
        } else {
            self.steps[j - 1].o
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_fingerprint: String,
    behavior_fingerprint: String,
    seed: u64,
    n: usize,
    horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub model_fingerprint: String,
    pub behavior_fingerprint: String,
    pub seed: u64,
    pub horizon: usize,
    pub trajectories: Vec<Trajectory>,
}

fn categorical(rng: &mut ChaCha20Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

fn sample_trajectory(model: &TabularPomdp, behavior: &BehaviorPolicy, seed: u64, index: u64) -> Trajectory {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut s = categorical(&mut rng, &model.mu1);
    let o0 = categorical(&mut rng, &model.emit0[s]);
    let mut steps = Vec::with_capacity(model.horizon);
    for h in 0..model.horizon {
        let o = categorical(&mut rng, &model.emit[h][s]);
        let a = categorical(&mut rng, &behavior.probs[h][s]);
        steps.push(Step {
            o,
            a,
            r: model.reward[h][s][a],
        });
        if h + 1 < model.horizon {
            s = categorical(&mut rng, &model.trans[h][s][a]);
        }
    }
    Trajectory { o0, steps }
}

pub fn generate(model: &TabularPomdp, behavior: &BehaviorPolicy, n: usize, seed: u64) -> OfflineDataset {
    let trajectories = (0..n as u64)
        .into_par_iter()
        .map(|i| sample_trajectory(model, behavior, seed, i))
        .collect();
    OfflineDataset {
        model_fingerprint: model.fingerprint(),
        behavior_fingerprint: behavior.fingerprint(),
        seed,
        horizon: model.horizon,
        trajectories,
    }
}

/// Arithmetic mean of a trajectory functional.
pub fn empirical_mean<F: Fn(&Trajectory) -> f64>(dataset: &OfflineDataset, f: F) -> f64 {
    dataset.trajectories.iter().map(f).sum::<f64>() / dataset.len() as f64
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Checks that every index fits the model's spaces.
    pub fn check_model(&self, model: &TabularPomdp) -> Result<()> {
        if self.horizon != model.horizon {
            return Err(Error::InvalidArgument(format!(
                "dataset horizon {} differs from model horizon {}",
                self.horizon, model.horizon
            )));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            let bad = t.o0 >= model.n_obs
                || t.steps.iter().any(|s| s.o >= model.n_obs || s.a >= model.n_actions);
            if bad {
                return Err(Error::Format {
                    line: i + 2,
                    msg: "index outside model spaces".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            model_fingerprint: self.model_fingerprint.clone(),
            behavior_fingerprint: self.behavior_fingerprint.clone(),
            seed: self.seed,
            n: self.len(),
            horizon: self.horizon,
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for t in &self.trajectories {
            out.push_str(&serde_json::to_string(t)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let first = lines.next().ok_or(Error::Format {
            line: 1,
            msg: "missing header".into(),
        })??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Format {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        let mut trajectories = Vec::with_capacity(header.n);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let t = parse_trajectory(&line, lineno, header.horizon)?;
            trajectories.push(t);
        }
        if trajectories.len() != header.n || header.n == 0 {
            let mut msg = String::new();
            let _ = write!(msg, "expected {} trajectories, found {}", header.n, trajectories.len());
            return Err(Error::Format {
                line: trajectories.len() + 2,
                msg,
            });
        }
        Ok(Self {
            model_fingerprint: header.model_fingerprint,
            behavior_fingerprint: header.behavior_fingerprint,
            seed: header.seed,
            horizon: header.horizon,
            trajectories,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(BufReader::new(file))
    }
}

fn parse_trajectory(line: &str, lineno: usize, horizon: usize) -> Result<Trajectory> {
    let t: Trajectory = match serde_json::from_str(line) {
        Ok(t) => t,
        Err(e) => {
            let text = e.to_string();
            let non_finite = line.contains("NaN") || line.contains("Infinity") || text.contains("out of range");
            let msg = if non_finite {
                "non-finite reward".to_string()
            } else {
                text
            };
            return Err(Error::Format { line: lineno, msg });
        }
    };
    if t.steps.len() != horizon {
        return Err(Error::Format {
            line: lineno,
            msg: format!("expected {horizon} steps, found {}", t.steps.len()),
        });
    }
    for s in &t.steps {
        if !s.r.is_finite() {
            return Err(Error::Format {
                line: lineno,
                msg: "non-finite reward".into(),
            });
        }
        if !(0.0..=1.0).contains(&s.r) {
            return Err(Error::Format {
                line: lineno,
                msg: "reward outside [0, 1]".into(),
            });
        }
    }
    Ok(t)
}
