//! Non-local spike-and-slab prior on individual loadings.
//!
//! The spike is `N(0, tau0)`; the slab is the moment-penalized density
//! `f(phi) = (phi^2 / tau1) N(phi; 0, tau1)`, which vanishes at zero and so
//! separates "exactly irrelevant" from "small but real" loadings. Inclusion
//! indicators are `gamma_pk ~ Bernoulli(zeta_k)` with
//! `zeta_k ~ Beta(a_zeta / k, b_zeta)`, thinning later columns a priori.

use crate::error::{Error, Result};

/// Configuration of the spike-and-slab mixture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlpSpikeSlabConfig {
    /// Spike variance.
    pub tau0: f64,
    /// Slab variance.
    pub tau1: f64,
    /// Beta prior numerator for inclusion probabilities (divided by the
    /// 1-based column index).
    pub a_zeta: f64,
    /// Beta prior second parameter.
    pub b_zeta: f64,
}

impl Default for NlpSpikeSlabConfig {
    fn default() -> Self {
        NlpSpikeSlabConfig {
            tau0: 0.026,
            tau1: 0.28,
            a_zeta: 1.0,
            b_zeta: 1.0,
        }
    }
}

impl NlpSpikeSlabConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau1 > 0.0 && self.a_zeta > 0.0 && self.b_zeta > 0.0) {
            return Err(Error::Config(format!(
                "spike-and-slab parameters must be positive: tau0={}, tau1={}, a_zeta={}, b_zeta={}",
                self.tau0, self.tau1, self.a_zeta, self.b_zeta
            )));
        }
        Ok(())
    }
}

/// Log density of the moment slab `(phi^2 / tau1) N(phi; 0, tau1)`.
///
/// Returns negative infinity at `phi = 0` (the defining non-local property).
pub fn nlp_slab_logdensity(phi: f64, tau1: f64) -> Result<f64> {
    if !(tau1 > 0.0) || !tau1.is_finite() {
        return Err(Error::Config(format!(
            "slab variance must be positive and finite, got {tau1}"
        )));
    }
    if !phi.is_finite() {
        return Err(Error::Config(format!("loading must be finite, got {phi}")));
    }
    if phi == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((phi * phi / tau1).ln() - 0.5 * (2.0 * std::f64::consts::PI * tau1).ln()
        - phi * phi / (2.0 * tau1))
}

/// Log density of the spike `N(phi; 0, tau0)`.
pub fn nlp_spike_logdensity(phi: f64, tau0: f64) -> Result<f64> {
    if !(tau0 > 0.0) || !tau0.is_finite() {
        return Err(Error::Config(format!(
            "spike variance must be positive and finite, got {tau0}"
        )));
    }
    if !phi.is_finite() {
        return Err(Error::Config(format!("loading must be finite, got {phi}")));
    }
    Ok(-0.5 * (2.0 * std::f64::consts::PI * tau0).ln() - phi * phi / (2.0 * tau0))
}
