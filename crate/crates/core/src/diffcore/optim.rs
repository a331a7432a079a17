use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// Adam at lr 1e-4 (the PACS setting).
    pub fn adam_default() -> Self {
        Self::adam(1e-4)
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// SGD at lr 1e-3 with momentum 0.9 (the OfficeHome / NICO setting).
    pub fn sgd_default() -> Self {
        OptimizerConfig::SgdMomentum { lr: 1e-3, momentum: 0.9 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::SgdMomentum { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok && self.lr().is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros.clone(),
            OptimizerConfig::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            config,
            first: zeros,
            second,
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) -> Result<()> {
        if grads.0.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients supplied for {} parameters",
                grads.0.len(),
                params.len()
            )));
        }
        for ((name, tensor), grad) in params.names().iter().zip(params.tensors()).zip(&grads.0) {
            match grad {
                None => return Err(Error::MissingGradient(name.clone())),
                Some(g) if g.shape() != tensor.shape() => {
                    return Err(Error::shape(format!("gradient of {name}"), tensor.shape(), g.shape()))
                }
                Some(_) => {}
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (tensor, grad)) in params.tensors_mut().iter_mut().zip(&grads.0).enumerate() {
            let g = grad.as_ref().expect("checked above").data();
            let values = tensor.data_mut();
            match self.config {
                OptimizerConfig::SgdMomentum { lr, momentum } => {
                    for ((p, v), &gi) in values.iter_mut().zip(self.first[i].iter_mut()).zip(g) {
                        *v = momentum * *v + gi;
                        *p -= lr * *v;
                    }
                }
                OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((p, mi), vi), &gi) in values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
