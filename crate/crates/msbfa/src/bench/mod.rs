//! Benchmark harness: simulation scenario generators, evaluation metrics,
//! resource profiling, and report emission.

pub mod metrics;
pub mod profile;
pub mod report;
pub mod scenarios;
