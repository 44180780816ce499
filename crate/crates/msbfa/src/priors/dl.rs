//! Dirichlet-Laplace shrinkage on loading matrices.
//!
//! Loadings have the double-exponential prior
//! `phi_pk ~ Laplace(omega_p * theta)` with a shared global scale
//! `theta ~ Gamma(a * P, 1/2)` and row scales `omega ~ Dirichlet(a, ..., a)`.
//! The conjugate augmentation `phi_pk ~ N(0, psi_aux_pk (omega_p theta)^2)`,
//! `psi_aux ~ Exp(1/2)`, turns the prior into a Gaussian with per-entry
//! variances, which is what the samplers consume.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::stats::{gamma_draw, gig_draw, inverse_gaussian_draw};

/// Jitter applied to |phi| so scale updates stay proper at exact zeros.
const ZERO_LOADING_JITTER: f64 = 1e-10;

/// Dirichlet-Laplace concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlHyper {
    pub a_dl: f64,
}

impl Default for DlHyper {
    fn default() -> Self {
        DlHyper { a_dl: 0.5 }
    }
}

/// Gibbs state of the Dirichlet-Laplace prior for a `P x K` loading matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DlState {
    /// Row scales on the P-simplex.
    pub omega: DVector<f64>,
    /// Global scale.
    pub theta: f64,
    /// `P x K` auxiliary variance multipliers.
    pub psi_aux: DMatrix<f64>,
    pub hyper: DlHyper,
}

impl DlState {
    /// Prior-mean initialization: uniform row scales, `theta` at its prior
    /// mean `2 a P`, auxiliary multipliers at their prior mean 2.
    pub fn new(p: usize, k: usize, hyper: DlHyper) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Dimension(format!(
                "DL state needs positive dimensions, got {p} x {k}"
            )));
        }
        if !(hyper.a_dl > 0.0) {
            return Err(Error::Config(format!(
                "DL concentration must be positive, got {}",
                hyper.a_dl
            )));
        }
        Ok(DlState {
            omega: DVector::from_element(p, 1.0 / p as f64),
            theta: 2.0 * hyper.a_dl * p as f64,
            psi_aux: DMatrix::from_element(p, k, 2.0),
            hyper,
        })
    }

    /// State drawn from the prior.
    pub fn init_from_prior<R: Rng>(p: usize, k: usize, hyper: DlHyper, rng: &mut R) -> Result<Self> {
        let mut state = DlState::new(p, k, hyper)?;
        let mut total = 0.0;
        for v in state.omega.iter_mut() {
            *v = gamma_draw(rng, hyper.a_dl, 1.0)?;
            total += *v;
        }
        state.omega /= total;
        state.theta = gamma_draw(rng, hyper.a_dl * p as f64, 0.5)?;
        let exp = Exp::new(0.5).expect("rate is positive");
        for v in state.psi_aux.iter_mut() {
            *v = exp.sample(rng);
        }
        Ok(state)
    }

    pub fn p(&self) -> usize {
        self.omega.len()
    }

    pub fn k(&self) -> usize {
        self.psi_aux.ncols()
    }

    /// Per-entry prior variances `psi_aux_pk * (omega_p * theta)^2`.
    pub fn prior_variances(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p(), self.k(), |p, k| {
            self.psi_aux[(p, k)] * (self.omega[p] * self.theta).powi(2)
        })
    }

    /// One Gibbs sweep conditioned on the current loadings.
    ///
    /// The `(omega, theta)` block is drawn jointly with the auxiliary
    /// multipliers integrated out: with `T_p ~ GIG(a - K, 1, 2 sum_k |phi_pk|)`
    /// independently per row, `theta = sum_p T_p` and `omega = T / theta` is
    /// an exact draw from their joint conditional (a change of variables
    /// turns the simplex-constrained density into independent GIG factors).
    /// The multipliers are then refreshed from their inverse-Gaussian
    /// conditional given the new scales.
    pub fn gibbs_update<R: Rng>(&mut self, loadings: &DMatrix<f64>, rng: &mut R) -> Result<()> {
        let (p, k) = (self.p(), self.k());
        if loadings.nrows() != p || loadings.ncols() != k {
            return Err(Error::Dimension(format!(
                "loadings are {} x {}, DL state is {} x {}",
                loadings.nrows(),
                loadings.ncols(),
                p,
                k
            )));
        }
        let order = self.hyper.a_dl - k as f64;
        let mut t = DVector::zeros(p);
        for pi in 0..p {
            let row_abs: f64 = (0..k)
                .map(|ki| loadings[(pi, ki)].abs().max(ZERO_LOADING_JITTER))
                .sum();
            t[pi] = gig_draw(rng, order, 1.0, 2.0 * row_abs)?;
        }
        let total: f64 = t.sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numeric(
                "DL scale update produced a degenerate total".into(),
            ));
        }
        self.theta = total;
        self.omega = t / total;
        for pi in 0..p {
            let scale = self.omega[pi] * self.theta;
            for ki in 0..k {
                let abs_phi = loadings[(pi, ki)].abs().max(ZERO_LOADING_JITTER);
                let inv = inverse_gaussian_draw(rng, scale / abs_phi, 1.0)?;
                self.psi_aux[(pi, ki)] = (1.0 / inv).max(f64::MIN_POSITIVE);
            }
        }
        Ok(())
    }

    /// Draw loadings from the Gaussian form of the prior at the current
    /// state.
    pub fn draw_loadings_from_prior<R: Rng>(&self, rng: &mut R) -> DMatrix<f64> {
        let v = self.prior_variances();
        DMatrix::from_fn(self.p(), self.k(), |p, k| {
            crate::stats::normal_draw(rng, 0.0, v[(p, k)].sqrt())
        })
    }

    /// Shannon entropy of the row-scale simplex.
    pub fn omega_entropy(&self) -> f64 {
        -self
            .omega
            .iter()
            .filter(|&&w| w > 0.0)
            .map(|&w| w * w.ln())
            .sum::<f64>()
    }
}
