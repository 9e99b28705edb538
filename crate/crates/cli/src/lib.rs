//! Experiment orchestration over the sequence-modeling lab: declarative
//! configs, dataset/checkpoint persistence, delta sweeps, ablation grids,
//! random hyperparameter search and figure-data reports.

pub mod ablate;
pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod search;
pub mod sweep;
