use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use expcli::bound::{BoundReport, REPORT_FILE};
use expcli::config::{load_experiment, to_pretty_json, Overrides};
use expcli::data::{build_datasets, DumpManifest, DUMP_MANIFEST, TEST_DUMP, TRAIN_DUMP};
use expcli::run::{read_metrics, seed_dir, MeanSd, RunSummary, METRICS_FILE, RESOLVED_FILE, SUMMARY_FILE};
use expcli::sweep::{cell_dir, SweepRow, SWEEP_FILE};
use irss_core::synthdata::read_dataset;
use irss_core::theorybound::bound_value;
use serde_json::{json, Value};
use tempfile::TempDir;

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The shipped SCM config, shrunk to run in well under a second.
fn tiny_scm(dir: &Path) -> PathBuf {
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(repo_config("scm_default.json")).unwrap()).unwrap();
    doc["data"]["n_per_env"] = json!(40);
    doc["eval"]["n_test"] = json!(100);
    doc["train"]["bigsteps"] = json!(2);
    doc["train"]["steps"] = json!(12);
    doc["train"]["log_every"] = json!(5);
    doc["seeds"] = json!([0, 1]);
    doc["out"] = json!(dir.join("out"));
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();
    path
}

fn irss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irss")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn resolved_config_reloads_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tiny_scm(tmp.path());
    let overrides = Overrides {
        set: vec!["train.S=3".into(), "train.k_env=5".into()],
        ..Overrides::default()
    };
    let cfg = load_experiment(&cfg_path, &overrides).unwrap();
    assert_eq!(cfg.train.styles, 3);
    assert_eq!(cfg.train.k_env, 5);
    let resolved = tmp.path().join(RESOLVED_FILE);
    fs::write(&resolved, to_pretty_json(&cfg)).unwrap();
    let again = load_experiment(&resolved, &Overrides::default()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(to_pretty_json(&again), to_pretty_json(&cfg));
}

#[test]
fn run_writes_metrics_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let out = tmp.path().join("run");
    let o = irss(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--method", "irss-birm"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(out.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.run_id, "irss-birm");
    let mut finals = Vec::new();
    for seed in [0, 1] {
        let rows = read_metrics(&seed_dir(&out, seed).join(METRICS_FILE)).unwrap();
        assert!(rows.windows(2).all(|w| w[0].iter < w[1].iter));
        assert_eq!(rows.last().unwrap().iter, 24);
        assert!(rows.iter().all(|r| r.seed == seed && r.run_id == "irss-birm" && r.ood_acc.is_some()));
        finals.push(rows.last().unwrap().ood_acc.unwrap());
    }
    assert_eq!(summary.ood_acc, MeanSd::of(&finals));

    let resolved: Value = serde_json::from_str(&fs::read_to_string(out.join(RESOLVED_FILE)).unwrap()).unwrap();
    assert_eq!(resolved["train"]["weights"]["penalty"], "birm");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let bytes = |dir: &str| {
        let out = tmp.path().join(dir);
        let o = irss(&["run", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "1"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(seed_dir(&out, 1).join(METRICS_FILE)).unwrap()
    };
    assert_eq!(bytes("a"), bytes("b"));
}

#[test]
fn config_errors_exit_2_with_the_field_path() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let c = cfg.to_str().unwrap();
    for (args, path) in [
        (vec!["--set", "train.k_env=many"], "train.k_env"),
        (vec!["--set", "train.bogus=1"], "train.bogus"),
        (vec!["--set", "model.classes=3"], "model.classes"),
        (vec!["--set", "data.test.alphas=[1,0]"], "data.test"),
        (vec!["--set", "train.batch_size=0"], "train"),
        (vec!["--seeds", "5..5"], "--seeds"),
    ] {
        let mut full = vec!["run", "-c", c];
        full.extend(args.iter().copied());
        let o = irss(&full);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(stderr(&o).contains(&format!("`{path}`")), "{args:?}: {}", stderr(&o));
    }
    let o = irss(&["run", "-c", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1_with_the_iteration() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let out = tmp.path().join("blown");
    let o = irss(&[
        "run",
        "-c",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.optimizer.lr=1e300",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("at iter "), "{}", stderr(&o));
}

#[test]
fn sweep_means_match_metrics_files() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let out = tmp.path().join("sweep");
    let o = irss(&[
        "sweep",
        "-c",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--grid",
        "train.S=1,2,3",
        "--grid",
        "train.k_env=2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let rows: Vec<SweepRow> = csv::Reader::from_path(out.join(SWEEP_FILE))
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.cell, i);
        assert_eq!(row.assignment, format!("train.S={};train.k_env=2", i + 1));
        let finals: Vec<f64> = [0, 1]
            .iter()
            .map(|&s| read_metrics(&seed_dir(&cell_dir(&out, i), s).join(METRICS_FILE)).unwrap().last().unwrap().ood_acc.unwrap())
            .collect();
        let m = MeanSd::of(&finals);
        assert_eq!(row.mean_ood_acc, m.mean);
        assert_eq!(row.sd_ood_acc, m.sd);
    }
}

#[test]
fn empty_or_bad_grids_exit_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let c = cfg.to_str().unwrap();
    for extra in [vec![], vec!["--grid", "train.S="], vec!["--grid", "train.S=1,x"]] {
        let mut args = vec!["sweep", "-c", c];
        args.extend(extra.iter().copied());
        let o = irss(&args);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
    assert!(!tmp.path().join("out").exists(), "no cell may run when the grid is invalid");
}

#[test]
fn bound_report_echoes_inputs_without_training() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bound");
    let o = irss(&[
        "bound",
        "-c",
        repo_config("bound_default.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--no-empirical",
        "--set",
        "inputs.c=0.25",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let raw: Value = serde_json::from_str(&fs::read_to_string(out.join(REPORT_FILE)).unwrap()).unwrap();
    let report: BoundReport = serde_json::from_value(raw.clone()).unwrap();
    assert!(report.empirical.is_none());
    assert_eq!(report.inputs.c, 0.25);
    let shipped: Value = serde_json::from_str(&fs::read_to_string(repo_config("bound_default.json")).unwrap()).unwrap();
    for key in ["delta", "epsilon", "beta0", "gamma", "sigma_erm", "alphas", "sigma_test"] {
        assert_eq!(raw["inputs"][key], shipped["inputs"][key], "{key}");
    }
    assert_eq!(report.bound, bound_value(&report.inputs.params(&report.scm)).unwrap());
    assert_eq!(report.params.k, 3);
}

#[test]
fn gen_data_round_trips() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let out = tmp.path().join("data");
    let o = irss(&["gen-data", "-c", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = seed_dir(&out, 4);
    let manifest: DumpManifest = serde_json::from_str(&fs::read_to_string(dir.join(DUMP_MANIFEST)).unwrap()).unwrap();
    assert_eq!((manifest.n_train, manifest.n_test), (120, 100));
    let resolved = load_experiment(&cfg, &Overrides::default()).unwrap();
    let (train, test) = build_datasets(&resolved, 4).unwrap();
    assert_eq!(read_dataset(fs::File::open(dir.join(TRAIN_DUMP)).unwrap()).unwrap(), train);
    assert_eq!(read_dataset(fs::File::open(dir.join(TEST_DUMP)).unwrap()).unwrap(), test);
}

#[test]
fn unknown_method_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_scm(tmp.path());
    let o = irss(&["run", "-c", cfg.to_str().unwrap(), "--method", "dro"]);
    assert_eq!(o.status.code(), Some(2));
}
