//! The `sweep` verb: a Cartesian grid of overrides, one run directory per
//! cell, and `sweep.csv` aggregating final OOD accuracy per cell.
//!
//! `sweep.csv` columns: `cell, assignment, seeds, mean_ood_acc, sd_ood_acc,
//! mean_train_acc, sd_train_acc`. `assignment` joins the cell's overrides
//! with `;`. Means are over seeds of the last `ood_acc` in each
//! `cell-<i>/seed-<s>/metrics.csv`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{experiment_from_value, set_path, ConfigError, ExperimentConfig, Overrides};
use crate::run::{run_experiment, RunSummary};

pub const SWEEP_FILE: &str = "sweep.csv";

/// One grid axis: a dotted path and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub path: String,
    pub values: Vec<String>,
}

/// Splits on commas outside brackets and braces, so JSON lists survive.
fn split_top_level(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in raw.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Parses `path=v1,v2,...`.
pub fn parse_axis(raw: &str) -> Result<Axis, ConfigError> {
    let (path, values) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::new("--grid", format!("expected PATH=V1,V2,..., got `{raw}`")))?;
    let values = split_top_level(values);
    if values.is_empty() {
        return Err(ConfigError::new(path.trim(), "grid axis has no values"));
    }
    Ok(Axis {
        path: path.trim().to_string(),
        values,
    })
}

/// Every combination of axis values, first axis slowest.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.path.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub assignment: String,
    pub seeds: usize,
    pub mean_ood_acc: f64,
    pub sd_ood_acc: f64,
    pub mean_train_acc: f64,
    pub sd_train_acc: f64,
}

pub fn cell_dir(out: &Path, cell: usize) -> PathBuf {
    out.join(format!("cell-{cell}"))
}

/// Resolves every cell up front so a bad value fails before any training.
pub fn plan(doc: &Value, overrides: &Overrides, axes: &[Axis]) -> Result<(PathBuf, Vec<(String, ExperimentConfig)>), ConfigError> {
    if axes.is_empty() {
        return Err(ConfigError::new("--grid", "the sweep grid is empty"));
    }
    let base = experiment_from_value(doc.clone(), overrides)?;
    let root = base.out.clone();
    cells(axes)
        .into_iter()
        .enumerate()
        .map(|(i, assignment)| {
            let mut d = doc.clone();
            let mut cell_overrides = overrides.clone();
            cell_overrides.out = None;
            for (path, value) in &assignment {
                cell_overrides.set.push(format!("{path}={value}"));
            }
            set_path(&mut d, "out", Value::String(cell_dir(&root, i).display().to_string()))?;
            let cfg = experiment_from_value(d, &cell_overrides)
                .map_err(|e| ConfigError::new(e.path, format!("{} (grid cell {i})", e.message)))?;
            let label = assignment.iter().map(|(p, v)| format!("{p}={v}")).collect::<Vec<_>>().join(";");
            Ok((label, cfg))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(|c| (root, c))
}

pub fn summarize(cell: usize, assignment: &str, s: &RunSummary) -> SweepRow {
    SweepRow {
        cell,
        assignment: assignment.to_string(),
        seeds: s.per_seed.len(),
        mean_ood_acc: s.ood_acc.mean,
        sd_ood_acc: s.ood_acc.sd,
        mean_train_acc: s.train_acc.mean,
        sd_train_acc: s.train_acc.sd,
    }
}

/// Runs the planned cells in order and writes `sweep.csv` under `root`.
pub fn run_sweep(root: &Path, cells: &[(String, ExperimentConfig)]) -> anyhow::Result<Vec<SweepRow>> {
    std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, (label, cfg)) in cells.iter().enumerate() {
        let summary = run_experiment(cfg).with_context(|| format!("grid cell {i} ({label})"))?;
        rows.push(summarize(i, label, &summary));
    }
    let path = root.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
