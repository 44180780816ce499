//! Bayesian integrative factor analysis for multi-study data.
//!
//! This crate estimates covariance structure that is shared across studies
//! and structure that is specific to each study, under the factor model
//! `y = Phi f + eps`. Seven estimators are provided, from pooled and
//! per-study baselines to samplers that learn how factors are shared:
//!
//! * [`fa::fit_stack_fa`] — one factor model on the pooled rows.
//! * [`fa::fit_ind_fa`] — independent factor models per study.
//! * [`fa::fit_bmsfa`] — common + study-specific loadings.
//! * [`fa::pfa::fit_pfa`] — shared loadings with per-study perturbations.
//! * [`fa::momss::fit_momss`] — EM with a non-local spike-and-slab and
//!   covariate adjustment.
//! * [`fa::sufa::fit_sufa`] — study factors living in the span of the shared
//!   loadings.
//! * [`fa::tetris::fit_tetris`] — binary factor-sharing matrix learned from
//!   the data.
//!
//! [`postprocess`] turns raw draws into aligned point estimates,
//! [`bench`] generates the five simulation scenarios and scores fits, and
//! [`data`] holds the dataset container and CSV layer.

pub mod bench;
pub mod data;
pub mod error;
pub mod fa;
pub mod linalg;
pub mod postprocess;
pub mod priors;
pub mod rng;
pub mod stats;

pub use data::{load_dataset, preprocess, MultiStudyDataset, PreprocessSpec};
pub use error::{Error, Result};
