use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream, sub_seed};

/// Spurious-feature distribution of one environment: `z_e ~ N(U mu_e, sigma_e^2 I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmEnv {
    pub mu_e: Vec<f64>,
    pub sigma_e: f64,
}

/// Two-class Gaussian SCM.
///
/// `U` is +1 with probability `eta`, else -1; `y = 1{U = +1}`;
/// `z_c ~ N(U mu_c, sigma_c^2 I)`; `x = mixing . [z_c; z_e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmConfig {
    pub mu_c: Vec<f64>,
    pub sigma_c: f64,
    pub envs: Vec<ScmEnv>,
    pub eta: f64,
    /// Square matrix, row-major, `D x (d_c + d_e)`.
    pub mixing: Vec<Vec<f64>>,
}

impl ScmConfig {
    pub fn d_c(&self) -> usize {
        self.mu_c.len()
    }

    pub fn d_e(&self) -> usize {
        self.envs.first().map_or(0, |e| e.mu_e.len())
    }

    pub fn input_dim(&self) -> usize {
        self.mixing.len()
    }

    fn mixing_matrix(&self) -> DMatrix<f64> {
        let n = self.mixing.len();
        DMatrix::from_fn(n, n, |i, j| self.mixing[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.mu_c.is_empty() {
            return bad("mu_c must be non-empty".into());
        }
        if self.envs.is_empty() {
            return bad("at least one training environment is required".into());
        }
        if !(self.sigma_c > 0.0) {
            return bad(format!("sigma_c must be > 0, got {}", self.sigma_c));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        let d_e = self.d_e();
        for (i, env) in self.envs.iter().enumerate() {
            if env.mu_e.len() != d_e || d_e == 0 {
                return bad(format!("envs[{i}].mu_e has length {}, expected {d_e}", env.mu_e.len()));
            }
            if !(env.sigma_e > 0.0) {
                return bad(format!("envs[{i}].sigma_e must be > 0, got {}", env.sigma_e));
            }
        }
        let d = self.d_c() + d_e;
        if self.mixing.len() != d || self.mixing.iter().any(|r| r.len() != d) {
            return bad(format!("mixing must be {d}x{d}"));
        }
        let det = self.mixing_matrix().determinant();
        if !(det.abs() > 1e-8) {
            return bad(format!("mixing is not invertible (|det| = {:e})", det.abs()));
        }
        Ok(())
    }

    /// Reference instance: `d_c = d_e = 5`, three environments with
    /// `sigma_e` in {0.3, 0.6, 1.0}, `eta = 0.5`, random orthogonal mixing.
    pub fn default_instance(mixing_seed: u64) -> Self {
        let mu_c = vec![0.3; 5];
        let envs = vec![
            ScmEnv {
                mu_e: vec![1.0, 1.0, 0.5, 0.0, 0.0],
                sigma_e: 0.3,
            },
            ScmEnv {
                mu_e: vec![1.0, 0.0, 1.0, 0.5, 0.0],
                sigma_e: 0.6,
            },
            ScmEnv {
                mu_e: vec![0.5, 0.0, 0.0, 1.0, 1.0],
                sigma_e: 1.0,
            },
        ];
        Self {
            mu_c,
            sigma_c: 1.0,
            envs,
            eta: 0.5,
            mixing: random_orthogonal(10, mixing_seed),
        }
    }

    /// `g1(z)`.
    pub fn mix(&self, z: &[f64]) -> Vec<f64> {
        self.mixing
            .iter()
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `g1^{-1}(x)`.
    pub fn unmix(&self, x: &[f64]) -> Result<Vec<f64>> {
        let inv = self
            .mixing_matrix()
            .try_inverse()
            .ok_or_else(|| Error::Config("mixing is not invertible".into()))?;
        let v = inv * nalgebra::DVector::from_column_slice(x);
        Ok(v.iter().copied().collect())
    }
}

/// Orthogonal `n x n` matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::DATA, u64::MAX));
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the factorization is unique
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    (0..n).map(|i| (0..n).map(|j| q[(i, j)]).collect()).collect()
}

/// Draws `n` samples from training environment `env_index`.
pub fn sample_scm(cfg: &ScmConfig, env_index: usize, n: usize, seed: u64) -> Result<Dataset> {
    let env = cfg.envs.get(env_index).ok_or_else(|| {
        Error::Range(format!(
            "environment {env_index} requested but only {} exist",
            cfg.envs.len()
        ))
    })?;
    sample_scm_env(cfg, env, env_index, n, seed)
}

/// Draws `n` samples with spurious distribution `env`, labelled `env_id`.
pub fn sample_scm_env(cfg: &ScmConfig, env: &ScmEnv, env_id: usize, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    if env.mu_e.len() != cfg.d_e() || !(env.sigma_e > 0.0) {
        return Err(Error::Config("environment does not match the SCM".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::DATA, env_id as u64));
    let mut z = vec![0.0; cfg.d_c() + cfg.d_e()];
    let samples = (0..n)
        .map(|_| {
            let positive = rng.random_bool(cfg.eta);
            let u = if positive { 1.0 } else { -1.0 };
            for (zi, &m) in z.iter_mut().zip(&cfg.mu_c) {
                *zi = u * m + cfg.sigma_c * rng.sample::<f64, _>(StandardNormal);
            }
            for (zi, &m) in z[cfg.d_c()..].iter_mut().zip(&env.mu_e) {
                *zi = u * m + env.sigma_e * rng.sample::<f64, _>(StandardNormal);
            }
            Sample::new(cfg.mix(&z), positive as usize, env_id)
        })
        .collect();
    Ok(Dataset {
        samples,
        sample_shape: vec![cfg.input_dim()],
        classes: 2,
    })
}

/// Test environment with spurious mean `-sum_e alpha_e mu_e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodTestEnv {
    pub env: ScmEnv,
    /// `min_U || mu_test - U mu_e ||_2` for each training environment.
    pub margins: Vec<f64>,
    /// All weights are zero although some training mean is not.
    pub degenerate: bool,
}

pub fn make_ood_test_env(cfg: &ScmConfig, alphas: &[f64], sigma_test: f64) -> Result<OodTestEnv> {
    cfg.validate()?;
    if alphas.len() != cfg.envs.len() {
        return Err(Error::Config(format!(
            "{} alphas given for {} training environments",
            alphas.len(),
            cfg.envs.len()
        )));
    }
    if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::Config("alphas must be finite and non-negative".into()));
    }
    if !(sigma_test > 0.0) {
        return Err(Error::Config(format!("sigma_test must be > 0, got {sigma_test}")));
    }
    let mut mu = vec![0.0; cfg.d_e()];
    for (a, env) in alphas.iter().zip(&cfg.envs) {
        for (m, v) in mu.iter_mut().zip(&env.mu_e) {
            *m -= a * v;
        }
    }
    let margins = cfg.envs.iter().map(|e| separation_margin(&mu, &e.mu_e)).collect();
    let degenerate = alphas.iter().all(|&a| a == 0.0) && cfg.envs.iter().any(|e| e.mu_e.iter().any(|&v| v != 0.0));
    Ok(OodTestEnv {
        env: ScmEnv {
            mu_e: mu,
            sigma_e: sigma_test,
        },
        margins,
        degenerate,
    })
}

/// `min(||a - b||, ||a + b||)`.
pub(crate) fn separation_margin(a: &[f64], b: &[f64]) -> f64 {
    let minus: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let plus: f64 = a.iter().zip(b).map(|(x, y)| (x + y).powi(2)).sum();
    minus.min(plus).sqrt()
}
