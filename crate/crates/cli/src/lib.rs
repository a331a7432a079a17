//! Experiment runner for `irss-core`: JSON configs with dotted overrides,
//! dataset generation, multi-seed training, grid sweeps and bound reports.

pub mod bound;
pub mod cli;
pub mod config;
pub mod data;
pub mod run;
pub mod sweep;
