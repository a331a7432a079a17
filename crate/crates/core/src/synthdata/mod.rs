//! Synthetic data: the two-class Gaussian SCM with per-environment spurious
//! means, and a family of styled images whose content combines a class shape
//! with a label-correlated corner motif.

mod dump;
mod images;
mod scm;

pub use dump::{read_dataset, write_dataset, DumpHeader, DUMP_MAGIC};
pub use images::{sample_styled_images, sample_styled_images_env, ImageEnv, StyleImageConfig, StyleSpec};
pub use scm::{make_ood_test_env, sample_scm, sample_scm_env, OodTestEnv, ScmConfig, ScmEnv};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::Result;

/// One labelled example plus generator-side ground truth and learner-assigned labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    /// Ground truth, hidden from the learner.
    pub true_style: Option<usize>,
    pub true_env: usize,
    pub true_spurious: Option<usize>,
    /// Assigned by style clustering.
    pub pseudo_style: Option<usize>,
    /// Assigned by environment clustering.
    pub env_label: Option<usize>,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: usize, true_env: usize) -> Self {
        Self {
            x,
            y,
            true_style: None,
            true_env,
            true_spurious: None,
            pseudo_style: None,
            env_label: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Per-sample shape, e.g. `[10]` or `[3, 16, 16]`.
    pub sample_shape: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    /// Stacks the selected samples into a `[n, D]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.samples[i].x.as_slice()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn all_x(&self) -> Result<Tensor> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn concat(parts: Vec<Dataset>) -> Dataset {
        let mut iter = parts.into_iter();
        let mut first = iter.next().expect("at least one dataset");
        for part in iter {
            first.samples.extend(part.samples);
        }
        first
    }
}
