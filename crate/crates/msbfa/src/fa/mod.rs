//! Sampling-based and EM estimators.

pub mod control;
pub mod gibbs_core;
pub mod mgps_models;
pub mod momss;
pub mod pfa;
pub mod sufa;
pub mod tetris;

pub use control::McmcControl;
