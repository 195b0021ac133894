//! Configuration handling and end-to-end runs on tiny problems.

use std::fs;
use std::path::Path;
use std::process::Command;

use bcrl::config::MdpKind;
use bcrl::experiment::{run_experiment, run_sweep, Stage, SweepAxis};
use bcrl::plotdata::emit_plotdata;
use bcrl::{ExperimentConfig, HarnessError};

const TINY: &str = r#"
seeds = [0, 1]

[mdp]
kind = "tabular"
states = 4
actions = 2

[data]
n = 200

[features]
kind = "one-hot"

[lspe]
iterations = 30

[eval]
lbc_probes = 16
"#;

const TRAINED: &str = r#"
seeds = [3]

[mdp]
kind = "low-rank"
states = 6
actions = 2
dim = 3

[data]
n = 300

[features]
dim = 3
hidden = [8]

[train]
steps = 20
batch_size = 300

[baselines]
fqe = true
fqe_iterations = 3
fqe_inner_steps = 2
fqe_batch_size = 64
ablations = true

[eval]
lbc_probes = 8
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn every_violation_is_listed() {
    let mut cfg = ExperimentConfig::from_toml(TRAINED).unwrap();
    cfg.data.n = 0;
    cfg.mdp.gamma = 1.5;
    cfg.lspe.radius = -1.0;
    cfg.seeds = vec![1, 1];
    cfg.train.learning_rate = 0.0;
    let Err(HarnessError::Validation(list)) = cfg.validate() else { panic!("expected validation errors") };
    for needle in ["data.n", "mdp.gamma", "lspe.radius", "seeds", "train."] {
        assert!(list.iter().any(|v| v.contains(needle)), "{needle} missing from {list:?}");
    }
    assert_eq!(HarnessError::Validation(list).exit_code(), 2);
}

#[test]
fn unknown_keys_are_rejected() {
    let text = format!("{TINY}\n[extra]\nx = 1\n");
    assert!(matches!(ExperimentConfig::from_toml(&text), Err(HarnessError::Validation(_))));
    let text = TINY.replace("iterations = 30", "iterations = 30\nitterations = 2");
    assert!(ExperimentConfig::from_toml(&text).is_err());
}

#[test]
fn zero_samples_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.data.n = 0;
    assert!(run_experiment(&cfg, dir.path(), Stage::Evaluate, 1).is_err());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn hash_ignores_output_dir_and_tracks_everything_else() {
    let a = tiny();
    let mut b = a.clone();
    b.output_dir = "elsewhere".into();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
    b.data.n += 1;
    assert_ne!(a.hash(), b.hash());
    let reparsed = ExperimentConfig::from_toml(&a.to_toml()).unwrap();
    assert_eq!(reparsed, a);
    assert_eq!(reparsed.hash(), a.hash());
}

#[test]
fn one_hot_lspe_pipeline_recovers_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.data.n = 5000;
    let run = run_experiment(&cfg, dir.path(), Stage::Evaluate, 1).unwrap();
    assert_eq!(run.report.records.len(), 2);
    let gamma = cfg.mdp.gamma;
    for r in &run.report.records {
        assert_eq!(r.method, "one-hot");
        assert_eq!(r.iterates.len(), 31);
        // One-hot features are exactly complete: only the contraction and
        // sampling terms remain.
        assert!(r.lbc_error.unwrap() < 1e-9, "{:?}", r.lbc_error);
        let contraction = gamma.powf(15.0) / (1.0 - gamma);
        assert!(r.abs_error <= contraction + 0.05 / (1.0 - gamma), "{}", r.abs_error);
    }
    for f in ["config.toml", "manifest.json", "report.json", "reports.csv", "summary.csv", "seed-0/split.json", "seed-1/dataset.bin"] {
        assert!(run.dir.join(f).is_file(), "{f}");
    }
    let split: serde_json::Value = serde_json::from_slice(&fs::read(run.dir.join("seed-0/split.json")).unwrap()).unwrap();
    let indices = |key: &str| -> std::collections::BTreeSet<u64> {
        split[key].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect()
    };
    let (first, second) = (indices("first_indices"), indices("second_indices"));
    assert_eq!((first.len(), second.len()), (5000, 5000));
    assert!(first.is_disjoint(&second));
    assert_eq!(first.union(&second).count(), 10_000);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run.dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.hash());
}

#[test]
fn runs_are_reproducible_except_for_the_manifest() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = ExperimentConfig::from_toml(TRAINED).unwrap();
    let ra = run_experiment(&cfg, a.path(), Stage::Evaluate, 1).unwrap();
    let rb = run_experiment(&cfg, b.path(), Stage::Evaluate, 2).unwrap();
    let methods: Vec<&str> = ra.report.records.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["bcrl", "bcrl-no-design", "bcrl-design-only", "fqe"]);
    let (fa, fb) = (files_under(&ra.dir), files_under(&rb.dir));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na != "manifest.json" {
            assert!(ba == bb, "{na} differs between runs");
        }
    }
    let trace = fs::read_to_string(ra.dir.join("seed-3/trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l.starts_with("fqe,")));
    assert!(ra.dir.join("seed-3/bcrl.ckpt").is_file());
}

#[test]
fn earlier_stages_write_less() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml(TRAINED).unwrap();
    let gen = run_experiment(&cfg, dir.path(), Stage::Generate, 1).unwrap();
    assert!(gen.dir.join("seed-3/dataset.bin").is_file());
    assert!(!gen.dir.join("seed-3/trace.csv").exists());
    assert!(!gen.dir.join("report.json").exists());
    let train = run_experiment(&cfg, dir.path(), Stage::Train, 1).unwrap();
    assert!(train.dir.join("seed-3/bcrl.ckpt").is_file());
    assert!(!train.dir.join("report.json").exists());
}

#[test]
fn single_value_sweep_matches_a_plain_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    let plain = run_experiment(&cfg, a.path(), Stage::Evaluate, 1).unwrap();
    let points = run_sweep(&cfg, SweepAxis::N, &[200.0], b.path(), 1).unwrap();
    assert_eq!(points.len(), 1);
    assert_eq!(points[0].run.report, plain.report);
    let csv = fs::read_to_string(b.path().join(format!("sweep-n-{}.csv", cfg.hash()))).unwrap();
    assert_eq!(csv.lines().count(), 1 + plain.report.records.len());
}

#[test]
fn sweeps_reject_duplicates_and_bad_values_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let Err(HarnessError::Validation(list)) = run_sweep(&cfg, SweepAxis::N, &[100.0, 100.0, 2.5], dir.path(), 1) else {
        panic!("expected validation errors")
    };
    assert_eq!(list.len(), 2, "{list:?}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn plotdata_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = emit_plotdata(dir.path()).unwrap();
    for f in ["ope_vs_iteration.csv", "spectra.csv", "slices.csv"] {
        assert_eq!(fs::read_to_string(out.join(f)).unwrap().lines().count(), 1, "{f}");
    }
    let run = run_experiment(&tiny(), dir.path(), Stage::Evaluate, 1).unwrap();
    emit_plotdata(dir.path()).unwrap();
    let iterations = fs::read_to_string(out.join("ope_vs_iteration.csv")).unwrap();
    assert_eq!(iterations.lines().count(), 1 + 2 * 31);
    let spectra = fs::read_to_string(out.join("spectra.csv")).unwrap();
    assert_eq!(spectra.lines().count(), 1 + 2 * 8);
    emit_plotdata(dir.path()).unwrap();
    assert_eq!(fs::read_to_string(out.join("spectra.csv")).unwrap(), spectra);

    fs::remove_file(run.dir.join("report.json")).unwrap();
    let Err(HarnessError::MissingInputs(missing)) = emit_plotdata(dir.path()) else { panic!("expected missing inputs") };
    assert_eq!(missing.len(), 1);
    assert!(missing[0].ends_with("report.json"));
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_bcrl");
    let good = dir.path().join("good.toml");
    fs::write(&good, TINY).unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, TINY.replace("n = 200", "n = 0")).unwrap();
    let out = dir.path().join("runs");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();

    assert_eq!(status(&["eval", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap()]), Some(0));
    assert_eq!(status(&["eval", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]), Some(2));
    assert_eq!(status(&["eval", "--config", dir.path().join("none.toml").to_str().unwrap()]), Some(1));
    assert_eq!(status(&["plotdata", "--out", out.to_str().unwrap()]), Some(0));
    let seeds = status(&["gen", "--config", good.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed-list", "4,5"]);
    assert_eq!(seeds, Some(0));
}

#[test]
fn failed_run_is_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.mdp.kind = MdpKind::File;
    cfg.mdp.path = Some(dir.path().join("missing.toml"));
    let err = run_experiment(&cfg, dir.path(), Stage::Evaluate, 1).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert!(!dir.path().join(cfg.hash()).exists());
    let quarantined: Vec<_> = fs::read_dir(dir.path().join("quarantine")).unwrap().flatten().collect();
    assert_eq!(quarantined.len(), 1);
    assert!(quarantined[0].path().join("error.txt").is_file());
    assert!(quarantined[0].path().join("config.toml").is_file());
}

#[test]
fn numeric_failures_map_to_exit_code_three() {
    assert_eq!(HarnessError::Numeric("x".into()).exit_code(), 3);
    let core = bcrl_core::Error::NonFinite { what: "loss".into(), step: 4 };
    assert_eq!(HarnessError::Core(core).exit_code(), 3);
    assert_eq!(HarnessError::Core(bcrl_core::Error::InvalidGamma(2.0)).exit_code(), 2);
}
