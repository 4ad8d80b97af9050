//! End-to-end runs of the experiment harness.

use std::path::Path;

use p3o_core::bench::{baseline_compare, rate_bench, single_run, Experiment, ExperimentConfig};
use p3o_core::policy::{deterministic_reactive_set, Provenance};
use p3o_core::simulate::generate;
use p3o_core::{instances, HistoryClass, PolicySet};

fn config(extra: serde_json::Value, out: &Path) -> ExperimentConfig {
    let mut v = serde_json::json!({
        "model": {"builder": {"name": "confounded"}},
        "policy_set": "deterministic_reactive",
        "n_grid": [500],
        "seeds": [1, 2, 3],
        "bootstrap": 200,
        "output_dir": out,
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    serde_json::from_value(v).unwrap()
}

fn write_set(dir: &Path, set: &PolicySet) -> std::path::PathBuf {
    let path = dir.join("set.json");
    set.save(&path).unwrap();
    path
}

#[test]
fn singleton_set_selects_its_only_policy() {
    let dir = tempfile::tempdir().unwrap();
    let full = deterministic_reactive_set(2, 2, 2).unwrap();
    let set = PolicySet {
        provenance: Provenance::Enumerated,
        history_class: HistoryClass::Reactive,
        policies: vec![full.policies[5].clone()],
    };
    let path = write_set(dir.path(), &set);
    let exp = Experiment::new(config(serde_json::json!({"policy_set": {"path": path}}), dir.path())).unwrap();
    let run = single_run(&exp).unwrap();
    assert_eq!(run.report.selected, Some(0));
    assert_eq!(run.report.suboptimality, Some(0.0));
}

#[test]
fn identical_policies_tie_to_lowest_index() {
    let dir = tempfile::tempdir().unwrap();
    let full = deterministic_reactive_set(2, 2, 2).unwrap();
    let set = PolicySet {
        provenance: Provenance::Enumerated,
        history_class: HistoryClass::Reactive,
        policies: vec![full.policies[11].clone(), full.policies[11].clone()],
    };
    let path = write_set(dir.path(), &set);
    let exp = Experiment::new(config(serde_json::json!({"policy_set": {"path": path}}), dir.path())).unwrap();
    let rep = rate_bench(&exp);
    assert!(rep.cells.iter().all(|c| c.selected == Some(0) && c.suboptimality == Some(0.0)));
    assert_eq!(exp.resolution_floor, 0.0);
}

#[test]
fn one_point_grid_reports_medians_without_a_fit() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(serde_json::json!({}), dir.path())).unwrap();
    let rep = rate_bench(&exp);
    assert!(rep.fit.is_none());
    assert_eq!(rep.medians.len(), 1);
    assert!(rep.medians[0].is_some());
    rep.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("rate_cells.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn zero_reward_instance_has_no_suboptimality() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(
        serde_json::json!({"model": {"builder": {"name": "zero-reward"}}, "n_grid": [300]}),
        dir.path(),
    ))
    .unwrap();
    let rep = baseline_compare(&exp);
    for c in &rep.cells {
        assert_eq!(c.p3o_suboptimality, Some(0.0));
        assert_eq!(c.baseline_suboptimality, Some(0.0));
    }
}

#[test]
fn unconfounded_instance_is_solved_by_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(
        serde_json::json!({"model": {"builder": {"name": "identity-emission"}}, "n_grid": [20000], "seeds": [1, 2, 3], "c1": 0.25}),
        dir.path(),
    ))
    .unwrap();
    let rep = baseline_compare(&exp);
    let s = &rep.summaries[0];
    assert_eq!(s.baseline_median, Some(0.0), "{s:?}");
    assert!(s.p3o_median.unwrap() < exp.resolution_floor, "{s:?}");
}

#[test]
fn saved_dataset_reproduces_the_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let (m, b) = instances::confounded();
    let d = generate(&m, &b, 500, 1);
    let path = dir.path().join("data.jsonl");
    d.save(&path).unwrap();
    let fresh = Experiment::new(config(serde_json::json!({}), dir.path())).unwrap();
    let loaded = Experiment::new(config(serde_json::json!({"dataset": path}), dir.path())).unwrap();
    let a = single_run(&fresh).unwrap();
    let b = single_run(&loaded).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.seed, Some(1));
    assert_eq!(b.seed, None);
}

#[test]
fn config_paths_resolve_relative_to_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"model": {"builder": {"name": "confounded"}}, "policy_set": "deterministic_reactive",
        "n_grid": [200], "seeds": [4], "output_dir": "out"}"#;
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, text).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("out"));
    let exp = Experiment::new(cfg).unwrap();
    single_run(&exp).unwrap().write(&exp.config.output_dir).unwrap();
    assert!(dir.path().join("out/p3o_report.txt").exists());
}

#[test]
fn unknown_config_fields_are_rejected() {
    let text = r#"{"model": {"builder": {"name": "confounded"}}, "policy_set": "deterministic_reactive",
        "n_grid": [200], "seeds": [4], "output_dir": "out", "typo": 1}"#;
    assert!(serde_json::from_str::<ExperimentConfig>(text).is_err());
}
