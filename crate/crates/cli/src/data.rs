//! Train/test set construction for one seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use irss_core::rng::{stream, sub_seed};
use irss_core::synthdata::{make_ood_test_env, sample_styled_images, sample_styled_images_env, write_dataset, Dataset};
use irss_core::theorybound::{confrontation_data, ConfrontationSetup};
use serde::{Deserialize, Serialize};

use crate::config::{to_pretty_json, DataConfig, ExperimentConfig};

/// Training environments and the held-out environment. Both depend only on
/// the data section, `eval.n_test` and `seed`.
pub fn build_datasets(cfg: &ExperimentConfig, seed: u64) -> irss_core::Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataConfig::Scm(d) => {
            let scm = d.scm.resolve();
            let test = make_ood_test_env(&scm, &d.test.alphas, d.test.sigma_test)?;
            let setup = ConfrontationSetup {
                n_per_env: d.n_per_env,
                n_test: cfg.eval.n_test,
                seeds: vec![seed],
            };
            confrontation_data(&scm, &test, &setup, seed)
        }
        DataConfig::Images(d) => {
            let k = d.images.envs.len();
            let parts = (0..k)
                .map(|e| sample_styled_images(&d.images, e, d.n_per_env, sub_seed(seed, stream::DATA, e as u64)))
                .collect::<irss_core::Result<Vec<_>>>()?;
            let test = sample_styled_images_env(&d.images, &d.test, k, cfg.eval.n_test, sub_seed(seed, stream::DATA, k as u64))?;
            Ok((Dataset::concat(parts), test))
        }
    }
}

/// Sidecar describing a dumped train/test pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub seed: u64,
    pub data: DataConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub train_file: String,
    pub test_file: String,
}

pub const TRAIN_DUMP: &str = "train.bin";
pub const TEST_DUMP: &str = "test.bin";
pub const DUMP_MANIFEST: &str = "data.json";

/// Writes `train.bin`, `test.bin` and `data.json` into `dir`.
pub fn dump_datasets(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> anyhow::Result<DumpManifest> {
    let (train_set, test_set) = build_datasets(cfg, seed).with_context(|| format!("seed {seed}: building data"))?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, set) in [(TRAIN_DUMP, &train_set), (TEST_DUMP, &test_set)] {
        let path = dir.join(name);
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        write_dataset(&mut w, set).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
    }
    let manifest = DumpManifest {
        seed,
        data: cfg.data.clone(),
        n_train: train_set.len(),
        n_test: test_set.len(),
        sample_shape: train_set.sample_shape.clone(),
        classes: train_set.classes,
        train_file: TRAIN_DUMP.into(),
        test_file: TEST_DUMP.into(),
    };
    fs::write(dir.join(DUMP_MANIFEST), to_pretty_json(&manifest))?;
    Ok(manifest)
}
