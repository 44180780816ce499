//! Chain-length and seeding control shared by all samplers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How long to run a chain and which draws to keep.
///
/// Draws with index `>= burn` are retained every `thin` iterations, so the
/// number of stored draws is `ceil((nrun - burn) / thin)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McmcControl {
    /// Total iterations.
    pub nrun: usize,
    /// Iterations discarded from the front.
    pub burn: usize,
    /// Keep every `thin`-th post-burn draw.
    pub thin: usize,
    /// Seed for the chain's random stream.
    pub seed: u64,
}

impl Default for McmcControl {
    fn default() -> Self {
        McmcControl {
            nrun: 10_000,
            burn: 8_000,
            thin: 1,
            seed: 0,
        }
    }
}

impl McmcControl {
    pub fn new(nrun: usize, burn: usize, thin: usize, seed: u64) -> Result<Self> {
        let ctrl = McmcControl {
            nrun,
            burn,
            thin,
            seed,
        };
        ctrl.validate()?;
        Ok(ctrl)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nrun == 0 {
            return Err(Error::Config("nrun must be positive".into()));
        }
        if self.burn >= self.nrun {
            return Err(Error::Config(format!(
                "burn ({}) must be smaller than nrun ({})",
                self.burn, self.nrun
            )));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the draw at `iteration` (0-based) is stored.
    pub fn keeps(&self, iteration: usize) -> bool {
        iteration >= self.burn && (iteration - self.burn) % self.thin == 0
    }

    /// Number of draws a full run stores.
    pub fn n_draws(&self) -> usize {
        (self.nrun - self.burn).div_ceil(self.thin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_long_chain_with_deep_burn() {
        let c = McmcControl::default();
        assert_eq!((c.nrun, c.burn, c.thin), (10_000, 8_000, 1));
        assert!(c.validate().is_ok());
        assert_eq!(c.n_draws(), 2_000);
    }

    #[test]
    fn burn_not_smaller_than_nrun_is_rejected() {
        assert!(McmcControl::new(100, 100, 1, 0).is_err());
        assert!(McmcControl::new(100, 101, 1, 0).is_err());
        assert!(McmcControl::new(0, 0, 1, 0).is_err());
        assert!(McmcControl::new(100, 50, 0, 0).is_err());
    }

    #[test]
    fn keep_schedule_counts_match() {
        let c = McmcControl::new(10, 4, 2, 0).unwrap();
        let kept: Vec<usize> = (0..10).filter(|&i| c.keeps(i)).collect();
        assert_eq!(kept, vec![4, 6, 8]);
        assert_eq!(c.n_draws(), 3);
    }
}
