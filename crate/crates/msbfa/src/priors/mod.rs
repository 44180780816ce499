//! Shrinkage and sparsity priors shared by the samplers.
//!
//! Each prior owns its hyper-state and exposes a Gibbs update conditioned on
//! the current loadings. Residual-variance priors are deliberately not here:
//! every sampler owns its own residual conjugacy.

pub mod dl;
pub mod ibp;
pub mod mgps;
pub mod nlp;

pub use dl::{DlHyper, DlState};
pub use ibp::{ibp_sample_sharing, IbpConfig};
pub use mgps::{MgpsHyper, MgpsState};
pub use nlp::{nlp_slab_logdensity, nlp_spike_logdensity, NlpSpikeSlabConfig};
