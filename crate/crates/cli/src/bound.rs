//! The `bound` verb: conditions, bound value and, unless skipped, the
//! empirical IRM risk across seeds, written to `bound_report.json`.

use std::fs;

use anyhow::Context;
use irss_core::synthdata::{make_ood_test_env, OodTestEnv, ScmConfig};
use irss_core::theorybound::{
    bound_value, check_conditions, empirical_confrontation, BoundInputs, BoundParams, ConditionReport, ConfrontationReport,
    ConfrontationSetup,
};
use irss_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::config::{to_pretty_json, BoundConfig};

pub const REPORT_FILE: &str = "bound_report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub scm: ScmConfig,
    pub train: TrainConfig,
    pub confrontation: ConfrontationSetup,
    pub params: BoundParams,
    pub bound: f64,
    pub test_env: OodTestEnv,
    pub conditions: ConditionReport,
    /// Absent with `--no-empirical`.
    pub empirical: Option<ConfrontationReport>,
}

pub fn bound_report(cfg: &BoundConfig, empirical: bool) -> anyhow::Result<BoundReport> {
    let scm = cfg.scm.resolve();
    let test_env = make_ood_test_env(&scm, &cfg.inputs.alphas, cfg.inputs.sigma_test)?;
    let params = cfg.inputs.params(&scm);
    let bound = bound_value(&params)?;
    let conditions = check_conditions(&cfg.inputs, &scm, &test_env);
    let empirical = if empirical {
        Some(empirical_confrontation(&scm, &test_env, &cfg.inputs, &cfg.train, &cfg.confrontation)?)
    } else {
        None
    };
    Ok(BoundReport {
        inputs: cfg.inputs.clone(),
        scm,
        train: cfg.train.clone(),
        confrontation: cfg.confrontation.clone(),
        params,
        bound,
        test_env,
        conditions,
        empirical,
    })
}

/// Computes the report and writes it under `cfg.out`.
pub fn run_bound(cfg: &BoundConfig, empirical: bool) -> anyhow::Result<BoundReport> {
    let report = bound_report(cfg, empirical)?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let path = cfg.out.join(REPORT_FILE);
    fs::write(&path, to_pretty_json(&report)).with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}
