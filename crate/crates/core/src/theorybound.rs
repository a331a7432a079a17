//! Lower bound on the 0-1 risk of IRM under a Gaussian SCM, its
//! preconditions, and a Monte-Carlo confrontation with trained IRM models.
//!
//! Notation: `||mu_e||_2^2` for the squared spurious mean norm and
//! `sigma_{k+1}` for the test-environment standard deviation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Architecture, InputShape};
use crate::error::{Error, Result};
use crate::rng::{stream, sub_seed};
use crate::synthdata::{sample_scm, sample_scm_env, Dataset, OodTestEnv, ScmConfig};
use crate::trainer::{accuracy_report, run_baseline, Baseline, TrainConfig};

/// Standard normal CDF, `0.5 * erfc(-x / sqrt 2)`.
pub fn gaussian_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub c: f64,
    pub k: usize,
    pub delta: f64,
    pub r: f64,
}

/// `F(2c) - (2k / (sqrt(R pi) delta)) exp(-R delta^2)`.
pub fn bound_value(p: &BoundParams) -> Result<f64> {
    if !(p.delta > 0.0) {
        return Err(Error::Domain(format!("delta must be positive, got {}", p.delta)));
    }
    if !(p.r > 0.0) {
        return Err(Error::Domain(format!("R must be positive, got {}", p.r)));
    }
    if p.k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let correction = 2.0 * p.k as f64 / ((p.r * std::f64::consts::PI).sqrt() * p.delta) * (-p.r * p.delta * p.delta).exp();
    Ok(gaussian_cdf(2.0 * p.c) - correction)
}

/// `min_e sigma_e^2 / sigma_test^2`.
pub fn variance_ratio(scm: &ScmConfig, sigma_test: f64) -> f64 {
    scm.envs
        .iter()
        .map(|e| e.sigma_e * e.sigma_e)
        .fold(f64::INFINITY, f64::min)
        / (sigma_test * sigma_test)
}

/// Inputs to the bound and its conditions. `beta0`, `gamma` and `sigma_erm`
/// are taken as given and flagged as such in reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    pub c: f64,
    pub delta: f64,
    #[serde(default)]
    pub epsilon: f64,
    pub beta0: f64,
    pub gamma: f64,
    pub sigma_erm: f64,
    pub alphas: Vec<f64>,
    pub sigma_test: f64,
}

impl BoundInputs {
    pub fn params(&self, scm: &ScmConfig) -> BoundParams {
        BoundParams {
            c: self.c,
            k: scm.envs.len(),
            delta: self.delta,
            r: variance_ratio(scm, self.sigma_test),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationCheck {
    pub env: usize,
    pub margin: f64,
    pub required: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaCheck {
    pub lhs: f64,
    /// Absent when `gamma >= 1`, which leaves the condition undefined.
    pub rhs: Option<f64>,
    pub satisfied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub separation: Vec<SeparationCheck>,
    pub alpha: AlphaCheck,
    pub all_satisfied: bool,
    pub degenerate_test_env: bool,
    pub opaque_inputs: Vec<String>,
}

/// Evaluates the separation and alpha conditions; never fails.
pub fn check_conditions(inputs: &BoundInputs, scm: &ScmConfig, test: &OodTestEnv) -> ConditionReport {
    let d_e = scm.d_e() as f64;
    let separation: Vec<SeparationCheck> = scm
        .envs
        .iter()
        .zip(&test.margins)
        .enumerate()
        .map(|(env, (e, &margin))| {
            let required = (inputs.epsilon.max(0.0).sqrt() + inputs.delta) * e.sigma_e * d_e.sqrt();
            SeparationCheck {
                env,
                margin,
                required,
                satisfied: margin >= required,
            }
        })
        .collect();

    let lhs: f64 = scm
        .envs
        .iter()
        .zip(&inputs.alphas)
        .map(|(e, a)| a * e.mu_e.iter().map(|v| v * v).sum::<f64>() / (e.sigma_e * e.sigma_e))
        .sum();
    let mu_c_sq: f64 = scm.mu_c.iter().map(|v| v * v).sum();
    let rhs = (inputs.gamma < 1.0).then(|| {
        (mu_c_sq / (scm.sigma_c * scm.sigma_c) + inputs.beta0.abs() / 2.0 + inputs.c * inputs.sigma_erm)
            / (1.0 - inputs.gamma)
    });
    let alpha = AlphaCheck {
        lhs,
        rhs,
        satisfied: rhs.is_some_and(|r| lhs >= r),
    };
    let all_satisfied = alpha.satisfied && separation.iter().all(|s| s.satisfied) && !test.degenerate;
    ConditionReport {
        separation,
        alpha,
        all_satisfied,
        degenerate_test_env: test.degenerate,
        opaque_inputs: vec!["beta0".into(), "gamma".into(), "sigma_erm".into()],
    }
}

/// Sample sizes and seeds for [`empirical_confrontation`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfrontationSetup {
    pub n_per_env: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfrontationReport {
    pub seeds: Vec<u64>,
    pub risks: Vec<f64>,
    pub risk_mean: f64,
    pub risk_sd: f64,
    pub bound: f64,
    pub conditions: ConditionReport,
}

/// Linear classifier on the raw input.
pub fn linear_arch(scm: &ScmConfig) -> Architecture {
    Architecture {
        input: InputShape::Vector(scm.input_dim()),
        extractor: Vec::new(),
        classes: 2,
    }
}

/// Training environments and the test environment for one seed.
pub fn confrontation_data(scm: &ScmConfig, test: &OodTestEnv, setup: &ConfrontationSetup, seed: u64) -> Result<(Dataset, Dataset)> {
    let k = scm.envs.len();
    let parts = (0..k)
        .map(|e| sample_scm(scm, e, setup.n_per_env, sub_seed(seed, stream::DATA, e as u64)))
        .collect::<Result<Vec<_>>>()?;
    let test_set = sample_scm_env(scm, &test.env, k, setup.n_test, sub_seed(seed, stream::DATA, k as u64))?;
    Ok((Dataset::concat(parts), test_set))
}

/// Trains linear IRMv1 on the training environments for each seed (in
/// parallel) and reports test 0-1 risk next to the bound.
pub fn empirical_confrontation(
    scm: &ScmConfig,
    test: &OodTestEnv,
    inputs: &BoundInputs,
    train_cfg: &TrainConfig,
    setup: &ConfrontationSetup,
) -> Result<ConfrontationReport> {
    if setup.seeds.is_empty() {
        return Err(Error::Config("confrontation needs at least one seed".into()));
    }
    let bound = bound_value(&inputs.params(scm))?;
    let conditions = check_conditions(inputs, scm, test);
    let arch = linear_arch(scm);
    let risks = setup
        .seeds
        .par_iter()
        .map(|&seed| {
            let (train_set, test_set) = confrontation_data(scm, test, setup, seed)?;
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let state = run_baseline(Baseline::IrmV1, &train_set, &arch, &cfg)?;
            Ok(1.0 - accuracy_report(&state.params, &arch, &test_set)?.0.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = risks.len() as f64;
    let risk_mean = risks.iter().sum::<f64>() / n;
    let risk_sd = if risks.len() > 1 {
        (risks.iter().map(|r| (r - risk_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ConfrontationReport {
        seeds: setup.seeds.clone(),
        risks,
        risk_mean,
        risk_sd,
        bound,
        conditions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_ood_test_env;

    #[test]
    fn cdf_symmetry_and_known_values() {
        assert_eq!(gaussian_cdf(0.0), 0.5);
        for x in [0.1, 1.0, 2.5, 7.0] {
            assert!((gaussian_cdf(x) + gaussian_cdf(-x) - 1.0).abs() < 1e-15);
        }
        assert!((gaussian_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn bound_limits_and_domain() {
        let p = BoundParams { c: 0.0, k: 1, delta: 1e3, r: 1.0 };
        assert_eq!(bound_value(&p).unwrap(), 0.5);
        assert!(matches!(bound_value(&BoundParams { delta: 0.0, ..p }), Err(Error::Domain(_))));
        assert!(matches!(bound_value(&BoundParams { r: -1.0, ..p }), Err(Error::Domain(_))));
    }

    #[test]
    fn scaled_means_scale_margins() {
        let scm = ScmConfig::default_instance(1);
        let mut big = scm.clone();
        for e in &mut big.envs {
            e.mu_e.iter_mut().for_each(|v| *v *= 10.0);
        }
        let a = make_ood_test_env(&scm, &[0.3, 0.3, 0.3], 0.5).unwrap();
        let b = make_ood_test_env(&big, &[0.3, 0.3, 0.3], 0.5).unwrap();
        for (x, y) in a.margins.iter().zip(&b.margins) {
            assert!((10.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_alphas_fail_alpha_condition() {
        let scm = ScmConfig::default_instance(1);
        let test = make_ood_test_env(&scm, &[0.0; 3], 0.5).unwrap();
        let inputs = BoundInputs {
            c: 0.1,
            delta: 1.0,
            epsilon: 0.0,
            beta0: 0.0,
            gamma: 0.0,
            sigma_erm: 1.0,
            alphas: vec![0.0; 3],
            sigma_test: 0.5,
        };
        let r = check_conditions(&inputs, &scm, &test);
        assert_eq!(r.alpha.lhs, 0.0);
        assert!(!r.alpha.satisfied);
        assert!(r.degenerate_test_env);
        assert!(!r.all_satisfied);
    }
}
