//! Dataset dump format.
//!
//! ```text
//! offset 0   8 bytes   magic "IRSSDAT1"
//! offset 8   u64 LE    header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header (see DumpHeader)
//! then       n * D     f64 LE feature values, sample-major, D = product(sample_shape)
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 8] = b"IRSSDAT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub n: usize,
    pub sample_shape: Vec<usize>,
    pub classes: usize,
    pub labels: Vec<usize>,
    pub true_env: Vec<usize>,
    pub true_style: Vec<Option<usize>>,
    pub true_spurious: Vec<Option<usize>>,
}

pub fn write_dataset<W: Write>(mut w: W, data: &Dataset) -> Result<()> {
    let header = DumpHeader {
        n: data.len(),
        sample_shape: data.sample_shape.clone(),
        classes: data.classes,
        labels: data.samples.iter().map(|s| s.y).collect(),
        true_env: data.samples.iter().map(|s| s.true_env).collect(),
        true_style: data.samples.iter().map(|s| s.true_style).collect(),
        true_spurious: data.samples.iter().map(|s| s.true_spurious).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let width: usize = data.sample_shape.iter().product();
    for s in &data.samples {
        if s.x.len() != width {
            return Err(Error::shape("dataset dump", &[width], &[s.x.len()]));
        }
        for v in &s.x {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Contract("not a dataset dump (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let h: DumpHeader = serde_json::from_slice(&json)?;
    let columns = [h.labels.len(), h.true_env.len(), h.true_style.len(), h.true_spurious.len()];
    if columns.iter().any(|&c| c != h.n) {
        return Err(Error::Contract(format!("header columns {columns:?} disagree with n = {}", h.n)));
    }
    let width: usize = h.sample_shape.iter().product();
    let mut buf = [0u8; 8];
    let mut samples = Vec::with_capacity(h.n);
    for i in 0..h.n {
        let mut x = Vec::with_capacity(width);
        for _ in 0..width {
            r.read_exact(&mut buf)?;
            x.push(f64::from_le_bytes(buf));
        }
        let mut s = Sample::new(x, h.labels[i], h.true_env[i]);
        s.true_style = h.true_style[i];
        s.true_spurious = h.true_spurious[i];
        samples.push(s);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Contract(format!("{} trailing bytes after dataset body", rest.len())));
    }
    Ok(Dataset {
        samples,
        sample_shape: h.sample_shape,
        classes: h.classes,
    })
}
