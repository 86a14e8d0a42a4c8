//! Experiment driver: the active-learning loop with persistence and
//! resumability, baseline sampling strategies, evaluation, and study/report
//! generation on top of `ampforge-core`.

pub mod ablate;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod report;
pub mod rundir;
pub mod sampling;
pub mod seeds;
pub mod signals;
pub mod testset;
