//! Style-aligned invariant risk minimization on synthetic out-of-distribution
//! benchmarks: a small reverse-mode autodiff core, data generators, style
//! clustering, the training objective, a trainer and a theory-bound checker.

pub mod clusterer;
pub mod diffcore;
mod error;
pub mod objectives;
pub mod rng;
pub mod stylefeat;
pub mod synthdata;
pub mod theorybound;
pub mod trainer;

pub use error::{Error, Result};
