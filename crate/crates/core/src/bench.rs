//! Experiment harness: configs, rate sweeps, baseline comparison and report
//! emission.
//!
//! Reports carry no timestamps or host data, so identical configs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline;
use crate::error::{Error, Result};
use crate::estimation::{Bounds, FeatureMap};
use crate::instances;
use crate::model::{fingerprint_of, TabularPomdp};
use crate::oracle::true_value;
use crate::pessimism::{p3o, GridParams, P3oConfig, PessimismReport};
use crate::policy::{deterministic_reactive_set, sample_policy_set, BehaviorPolicy, HistoryClass, PolicySet, SoftmaxParams};
use crate::simulate::{generate, OfflineDataset};

// ── Config ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Builder {
        name: String,
        #[serde(default)]
        seed: u64,
    },
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorSource {
    /// The behavior policy shipped with the builder instance.
    #[default]
    Instance,
    Uniform,
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySetSpec {
    /// Uniform table followed by every deterministic reactive policy.
    DeterministicReactive,
    Sampled { count: usize, seed: u64 },
    Path(PathBuf),
}

fn default_lambda() -> f64 {
    1.0
}
fn default_c1() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    0.1
}
fn default_l_pi() -> f64 {
    P3oConfig::default().l_pi
}
fn default_bounds() -> Bounds {
    P3oConfig::default().bounds
}
fn default_bootstrap() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub behavior: BehaviorSource,
    #[serde(default = "reactive")]
    pub history_class: HistoryClass,
    pub policy_set: PolicySetSpec,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_l_pi")]
    pub l_pi: f64,
    #[serde(default = "default_bounds")]
    pub bounds: Bounds,
    #[serde(default)]
    pub grid: GridParams,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
    #[serde(default)]
    pub bootstrap_seed: u64,
    /// Optional dataset used by the single-run `p3o` command.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
}

fn reactive() -> HistoryClass {
    HistoryClass::Reactive
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ModelSource::Path(p) = &mut self.model {
            fix(p);
        }
        if let BehaviorSource::Path(p) = &mut self.behavior {
            fix(p);
        }
        if let PolicySetSpec::Path(p) = &mut self.policy_set {
            fix(p);
        }
        if let Some(p) = &mut self.dataset {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) || self.n_grid[0] == 0 {
            return Err(Error::Validation("n_grid".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        if seeds.is_empty() || seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("seeds".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Validation("lambda".into()));
        }
        if !(self.c1 >= 0.0) {
            return Err(Error::Validation("c1".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Validation("delta".into()));
        }
        self.history_class.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        fingerprint_of(self)
    }

    pub fn p3o_config(&self) -> P3oConfig {
        P3oConfig {
            lambda: self.lambda,
            c1: self.c1,
            delta: self.delta,
            l_pi: self.l_pi,
            bounds: self.bounds,
            grid: self.grid,
        }
    }
}

// ── Resolved experiment ──

pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: TabularPomdp,
    pub behavior: BehaviorPolicy,
    pub set: PolicySet,
    pub features: FeatureMap,
    pub true_values: Vec<f64>,
    pub best_value: f64,
    /// Smallest positive gap `J(π*) − J(π)` over the set; zero when all values tie.
    pub resolution_floor: f64,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (model, inst_behavior) = match &config.model {
            ModelSource::Builder { name, seed } => {
                let inst = instances::build(name, *seed)?;
                (inst.model, Some(inst.behavior))
            }
            ModelSource::Path(p) => (TabularPomdp::load(p)?, None),
        };
        let behavior = match &config.behavior {
            BehaviorSource::Instance => inst_behavior.ok_or_else(|| {
                Error::Validation("behavior: a model file needs an explicit behavior source".into())
            })?,
            BehaviorSource::Uniform => BehaviorPolicy::uniform(&model),
            BehaviorSource::Path(p) => BehaviorPolicy::load(p)?,
        };
        behavior.validate(&model)?;
        let set = match &config.policy_set {
            PolicySetSpec::DeterministicReactive => deterministic_reactive_set(model.n_obs, model.n_actions, model.horizon)?,
            PolicySetSpec::Sampled { count, seed } => sample_policy_set(
                config.history_class,
                *count,
                *seed,
                SoftmaxParams {
                    n_actions: model.n_actions,
                    n_obs: model.n_obs,
                    horizon: model.horizon,
                    l_pi: config.l_pi,
                },
            ),
            PolicySetSpec::Path(p) => PolicySet::load(p)?,
        };
        set.validate(&model)?;
        let features = FeatureMap::one_hot(model.n_actions, model.n_obs, config.bounds);
        features.validate()?;
        let true_values = set
            .policies
            .par_iter()
            .map(|p| true_value(&model, p))
            .collect::<Result<Vec<f64>>>()?;
        let best_value = true_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let resolution_floor = true_values
            .iter()
            .map(|v| best_value - v)
            .filter(|g| *g > 1e-12)
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            config,
            model,
            behavior,
            set,
            features,
            true_values,
            best_value,
            resolution_floor: if resolution_floor.is_finite() { resolution_floor } else { 0.0 },
        })
    }

    pub fn dataset(&self, n: usize, seed: u64) -> OfflineDataset {
        generate(&self.model, &self.behavior, n, seed)
    }

    pub fn run_p3o(&self, dataset: &OfflineDataset) -> Result<PessimismReport> {
        dataset.check_model(&self.model)?;
        let mut report = p3o(dataset, &self.set, &self.features, self.model.gamma, &self.config.p3o_config());
        report.attach_truth(&self.true_values);
        Ok(report)
    }

    pub fn suboptimality(&self, selected: Option<usize>) -> Option<f64> {
        selected.map(|i| self.best_value - self.true_values[i])
    }
}

// ── Statistics ──

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept)`.
pub fn ols_line(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    if x.len() < 2 {
        return None;
    }
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn loglog_fit(ns: &[usize], medians: &[Option<f64>]) -> Option<(f64, f64)> {
    let (x, y): (Vec<f64>, Vec<f64>) = ns
        .iter()
        .zip(medians)
        .filter_map(|(&n, m)| m.filter(|v| *v > 0.0).map(|v| ((n as f64).ln(), v.ln())))
        .unzip();
    ols_line(&x, &y)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

// ── Rate sweep ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub seed: u64,
    pub selected: Option<usize>,
    pub suboptimality: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Percentile interval of the slope over seed bootstrap resamples.
    pub slope_ci: Option<(f64, f64)>,
    /// Grid points with a positive median that entered the fit.
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub true_values: Vec<f64>,
    pub best_value: f64,
    pub resolution_floor: f64,
    pub medians: Vec<Option<f64>>,
    pub fit: Option<RateFit>,
    pub median_at_largest_n: Option<f64>,
    pub below_floor_at_largest_n: bool,
    pub failed_cells: usize,
    pub cells: Vec<Cell>,
}

fn cell_grid(config: &ExperimentConfig) -> Vec<(usize, u64)> {
    config
        .n_grid
        .iter()
        .flat_map(|&n| config.seeds.iter().map(move |&s| (n, s)))
        .collect()
}

/// Runs `f` on every `(n, seed)` cell in parallel; a failing cell yields `Err` in its slot only.
fn sweep<T: Send, F>(config: &ExperimentConfig, f: F) -> Vec<((usize, u64), std::result::Result<T, String>)>
where
    F: Fn(usize, u64) -> Result<T> + Sync,
{
    cell_grid(config)
        .into_par_iter()
        .map(|(n, seed)| {
            let out = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(n, seed)));
            let res = match out {
                Ok(Ok(v)) => Ok(v),
                Ok(Err(e)) => Err(e.to_string()),
                Err(_) => Err("cell panicked".to_string()),
            };
            ((n, seed), res)
        })
        .collect()
}

/// Medians of `values[cell]` per n over the chosen seed indices.
fn medians_by_n(ns: &[usize], nseeds: usize, values: &[Option<f64>], pick: &[usize]) -> Vec<Option<f64>> {
    ns.iter()
        .enumerate()
        .map(|(i, _)| {
            let v: Vec<f64> = pick.iter().filter_map(|&s| values[i * nseeds + s]).collect();
            median(&v)
        })
        .collect()
}

pub fn rate_bench(exp: &Experiment) -> RateReport {
    let config = &exp.config;
    let raw = sweep(config, |n, seed| {
        let d = exp.dataset(n, seed);
        let rep = exp.run_p3o(&d)?;
        Ok(rep.selected)
    });
    let cells: Vec<Cell> = raw
        .into_iter()
        .map(|((n, seed), r)| match r {
            Ok(sel) => Cell {
                n,
                seed,
                selected: sel,
                suboptimality: exp.suboptimality(sel),
                error: if sel.is_none() { Some("no policy selected".into()) } else { None },
            },
            Err(e) => Cell {
                n,
                seed,
                selected: None,
                suboptimality: None,
                error: Some(e),
            },
        })
        .collect();
    let nseeds = config.seeds.len();
    let values: Vec<Option<f64>> = cells.iter().map(|c| c.suboptimality).collect();
    let all: Vec<usize> = (0..nseeds).collect();
    let medians = medians_by_n(&config.n_grid, nseeds, &values, &all);
    let fit = (config.n_grid.len() >= 4).then(|| {
        let line = loglog_fit(&config.n_grid, &medians);
        let mut rng = ChaCha20Rng::seed_from_u64(config.bootstrap_seed);
        let mut slopes = Vec::with_capacity(config.bootstrap);
        for _ in 0..config.bootstrap {
            let pick: Vec<usize> = (0..nseeds).map(|_| rng.random_range(0..nseeds)).collect();
            if let Some((s, _)) = loglog_fit(&config.n_grid, &medians_by_n(&config.n_grid, nseeds, &values, &pick)) {
                slopes.push(s);
            }
        }
        slopes.sort_by(f64::total_cmp);
        RateFit {
            slope: line.map(|l| l.0),
            intercept: line.map(|l| l.1),
            slope_ci: (!slopes.is_empty()).then(|| (percentile(&slopes, 0.025), percentile(&slopes, 0.975))),
            points_used: medians.iter().filter(|m| m.is_some_and(|v| v > 0.0)).count(),
        }
    });
    let median_at_largest_n = medians.last().copied().flatten();
    RateReport {
        artifact_version: crate::artifact_version(),
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        n_grid: config.n_grid.clone(),
        true_values: exp.true_values.clone(),
        best_value: exp.best_value,
        resolution_floor: exp.resolution_floor,
        median_at_largest_n,
        below_floor_at_largest_n: median_at_largest_n.is_some_and(|m| m < exp.resolution_floor),
        failed_cells: cells.iter().filter(|c| c.error.is_some()).count(),
        medians,
        fit,
        cells,
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn optu(x: Option<usize>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl RateReport {
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("n,seed,selected,suboptimality,error\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.n,
                c.seed,
                optu(c.selected),
                opt(c.suboptimality),
                c.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        out
    }

    pub fn medians_csv(&self) -> String {
        let mut out = String::from("n,median_suboptimality\n");
        for (n, m) in self.n_grid.iter().zip(&self.medians) {
            let _ = writeln!(out, "{n},{}", opt(*m));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rate_bench.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("rate_cells.csv"), self.cells_csv())?;
        std::fs::write(dir.join("rate_medians.csv"), self.medians_csv())?;
        Ok(())
    }
}

// ── Baseline comparison ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedCell {
    pub n: usize,
    pub seed: u64,
    pub p3o_selected: Option<usize>,
    pub p3o_suboptimality: Option<f64>,
    pub baseline_selected: Option<usize>,
    pub baseline_suboptimality: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub n: usize,
    pub p3o_median: Option<f64>,
    pub baseline_median: Option<f64>,
    /// `baseline_median − p3o_median`
    pub median_gap: Option<f64>,
    /// Bootstrap standard error of the median gap, resampling seeds in pairs.
    pub gap_se: Option<f64>,
    pub p3o_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub true_values: Vec<f64>,
    pub best_value: f64,
    pub summaries: Vec<PairedSummary>,
    pub cells: Vec<PairedCell>,
}

pub fn baseline_compare(exp: &Experiment) -> CompareReport {
    let config = &exp.config;
    let m = &exp.model;
    let raw = sweep(config, |n, seed| {
        let d = exp.dataset(n, seed);
        let rep = exp.run_p3o(&d)?;
        let base = baseline::select(&d, &exp.set, m.n_obs, m.n_actions, m.gamma);
        Ok((rep.selected, base.selected))
    });
    let cells: Vec<PairedCell> = raw
        .into_iter()
        .map(|((n, seed), r)| match r {
            Ok((p, b)) => PairedCell {
                n,
                seed,
                p3o_selected: p,
                p3o_suboptimality: exp.suboptimality(p),
                baseline_selected: b,
                baseline_suboptimality: exp.suboptimality(b),
                error: None,
            },
            Err(e) => PairedCell {
                n,
                seed,
                p3o_selected: None,
                p3o_suboptimality: None,
                baseline_selected: None,
                baseline_suboptimality: None,
                error: Some(e),
            },
        })
        .collect();
    let nseeds = config.seeds.len();
    let mut rng = ChaCha20Rng::seed_from_u64(config.bootstrap_seed);
    let summaries = config
        .n_grid
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let pairs: Vec<(f64, f64)> = cells[i * nseeds..(i + 1) * nseeds]
                .iter()
                .filter_map(|c| Some((c.p3o_suboptimality?, c.baseline_suboptimality?)))
                .collect();
            let p_med = median(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let b_med = median(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let gap = p_med.zip(b_med).map(|(p, b)| b - p);
            let gap_se = (!pairs.is_empty() && config.bootstrap > 1).then(|| {
                let k = pairs.len();
                let gaps: Vec<f64> = (0..config.bootstrap)
                    .map(|_| {
                        let pick: Vec<(f64, f64)> = (0..k).map(|_| pairs[rng.random_range(0..k)]).collect();
                        let p = median(&pick.iter().map(|x| x.0).collect::<Vec<_>>()).unwrap_or(0.0);
                        let b = median(&pick.iter().map(|x| x.1).collect::<Vec<_>>()).unwrap_or(0.0);
                        b - p
                    })
                    .collect();
                let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
                (gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt()
            });
            PairedSummary {
                n,
                p3o_median: p_med,
                baseline_median: b_med,
                median_gap: gap,
                p3o_better: match (gap, gap_se) {
                    (Some(g), Some(se)) => g > 0.0 && g > 2.0 * se,
                    _ => false,
                },
                gap_se,
            }
        })
        .collect();
    CompareReport {
        artifact_version: crate::artifact_version(),
        config_hash: config.hash(),
        seeds: config.seeds.clone(),
        n_grid: config.n_grid.clone(),
        true_values: exp.true_values.clone(),
        best_value: exp.best_value,
        summaries,
        cells,
    }
}

impl CompareReport {
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("n,seed,p3o_selected,p3o_suboptimality,baseline_selected,baseline_suboptimality,error\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.n,
                c.seed,
                optu(c.p3o_selected),
                opt(c.p3o_suboptimality),
                optu(c.baseline_selected),
                opt(c.baseline_suboptimality),
                c.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("n,p3o_median,baseline_median,median_gap,gap_se,p3o_better\n");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.n,
                opt(s.p3o_median),
                opt(s.baseline_median),
                opt(s.median_gap),
                opt(s.gap_se),
                s.p3o_better
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("baseline_compare.json"), serde_json::to_string_pretty(self)? + "\n")?;
        std::fs::write(dir.join("baseline_cells.csv"), self.cells_csv())?;
        std::fs::write(dir.join("baseline_summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

// ── Single run ──

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleRun {
    pub artifact_version: String,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub report: PessimismReport,
}

/// Runs P3O once, on the configured dataset or on a fresh one at the first `(n, seed)`.
pub fn single_run(exp: &Experiment) -> Result<SingleRun> {
    let config = &exp.config;
    let (dataset, seed) = match &config.dataset {
        Some(p) => (OfflineDataset::load(p)?, None),
        None => (exp.dataset(config.n_grid[0], config.seeds[0]), Some(config.seeds[0])),
    };
    Ok(SingleRun {
        artifact_version: crate::artifact_version(),
        config_hash: config.hash(),
        seed,
        report: exp.run_p3o(&dataset)?,
    })
}

impl SingleRun {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("p3o_report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        let mut table = format!("config {}\nversion {}\n", self.config_hash, self.artifact_version);
        table.push_str(&self.report.to_table());
        std::fs::write(dir.join("p3o_report.txt"), table)?;
        Ok(())
    }
}
