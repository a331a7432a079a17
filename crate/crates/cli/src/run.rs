//! The `run` verb: train every seed, write metrics and a summary.
//!
//! Layout under `out`:
//!
//! ```text
//! config.resolved.json
//! seed-<s>/metrics.csv
//! summary.json
//! ```
//!
//! `metrics.csv` columns, one row per logged step, `iter` strictly increasing:
//! `run_id, seed, iter, bigstep, loss_total, loss_erm, loss_irm, loss_ent,
//! loss_adv, penalty_raw, entropy_raw, train_acc, ood_acc, style_probe_acc,
//! env_inertia`. Loss columns are weighted terms, `*_raw` are unweighted.
//! `style_probe_acc` is filled on the last row only and only when the data
//! carries style labels; blank cells mean "not measured".

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use irss_core::trainer::{train_observed, MetricsRow, RunState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{to_pretty_json, ExperimentConfig};
use crate::data::build_datasets;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_FILE: &str = "config.resolved.json";

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub iter: u64,
    pub bigstep: usize,
    pub loss_total: f64,
    pub loss_erm: f64,
    pub loss_irm: f64,
    pub loss_ent: f64,
    pub loss_adv: f64,
    pub penalty_raw: f64,
    pub entropy_raw: f64,
    pub train_acc: f64,
    pub ood_acc: Option<f64>,
    pub style_probe_acc: Option<f64>,
    pub env_inertia: f64,
}

impl MetricsRecord {
    pub fn new(run_id: &str, seed: u64, row: &MetricsRow) -> Self {
        let l = &row.losses;
        Self {
            run_id: run_id.to_string(),
            seed,
            iter: row.iter,
            bigstep: row.bigstep,
            loss_total: l.total,
            loss_erm: l.erm,
            loss_irm: l.irm,
            loss_ent: l.ent,
            loss_adv: l.adv,
            penalty_raw: l.penalty_raw,
            entropy_raw: l.entropy_raw,
            train_acc: row.train_acc,
            ood_acc: row.ood_acc,
            style_probe_acc: row.style_probe_acc,
            env_inertia: row.env_inertia,
        }
    }

    fn numbers(&self) -> impl Iterator<Item = (&'static str, f64)> + '_ {
        [
            ("loss_total", Some(self.loss_total)),
            ("loss_erm", Some(self.loss_erm)),
            ("loss_irm", Some(self.loss_irm)),
            ("loss_ent", Some(self.loss_ent)),
            ("loss_adv", Some(self.loss_adv)),
            ("penalty_raw", Some(self.penalty_raw)),
            ("entropy_raw", Some(self.entropy_raw)),
            ("train_acc", Some(self.train_acc)),
            ("ood_acc", self.ood_acc),
            ("style_probe_acc", self.style_probe_acc),
            ("env_inertia", Some(self.env_inertia)),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
    }
}

/// Final accuracies of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub iters: u64,
    pub train_acc: f64,
    pub ood_acc: f64,
    pub style_probe_acc: Option<f64>,
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub per_seed: Vec<SeedResult>,
    pub train_acc: MeanSd,
    pub ood_acc: MeanSd,
    #[serde(default)]
    pub style_probe_acc: Option<MeanSd>,
}

impl RunSummary {
    pub fn from_seeds(run_id: &str, per_seed: Vec<SeedResult>) -> Self {
        let pick = |f: fn(&SeedResult) -> f64| MeanSd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        let probes: Option<Vec<f64>> = per_seed.iter().map(|s| s.style_probe_acc).collect();
        Self {
            run_id: run_id.to_string(),
            train_acc: pick(|s| s.train_acc),
            ood_acc: pick(|s| s.ood_acc),
            style_probe_acc: probes.map(|p| MeanSd::of(&p)),
            per_seed,
        }
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Builds the data and trains one seed; no files are touched.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<(RunState, Vec<MetricsRecord>, SeedResult)> {
    let (train_set, test_set) = build_datasets(cfg, seed).with_context(|| format!("seed {seed}: building data"))?;
    let train_cfg = irss_core::trainer::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let state = train_observed(&train_set, &cfg.model, &train_cfg, Some(&test_set)).with_context(|| format!("seed {seed}"))?;
    let records: Vec<MetricsRecord> = state.history.iter().map(|r| MetricsRecord::new(cfg.run_id(), seed, r)).collect();
    for r in &records {
        if let Some((name, v)) = r.numbers().find(|(_, v)| !v.is_finite()) {
            return Err(anyhow!("seed {seed}: non-finite {name} ({v}) at iter {}", r.iter));
        }
    }
    let last = state.history.last().ok_or_else(|| anyhow!("seed {seed}: no metrics were logged"))?;
    let result = SeedResult {
        seed,
        iters: state.iter,
        train_acc: last.train_acc,
        ood_acc: last.ood_acc.ok_or_else(|| anyhow!("seed {seed}: final row lacks OOD accuracy"))?,
        style_probe_acc: last.style_probe_acc,
    };
    Ok((state, records, result))
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Trains all seeds in parallel and writes the run directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> anyhow::Result<RunSummary> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    write_text(&cfg.out.join(RESOLVED_FILE), &to_pretty_json(cfg))?;

    let per_seed = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (_, records, result) = train_seed(cfg, seed)?;
            let dir = seed_dir(&cfg.out, seed);
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_metrics(&dir.join(METRICS_FILE), &records)?;
            Ok(result)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;

    let summary = RunSummary::from_seeds(cfg.run_id(), per_seed);
    write_text(&cfg.out.join(SUMMARY_FILE), &to_pretty_json(&summary))?;
    Ok(summary)
}
