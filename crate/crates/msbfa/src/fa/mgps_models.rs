//! Gibbs samplers for the three factor models built on the multiplicative
//! gamma process prior: a pooled fit over all studies, independent
//! per-study fits, and the combined model with shared plus study-specific
//! loadings. All three share one loading/factor/residual update kernel;
//! the pooled fit is the combined model with no study-specific columns.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::MultiStudyDataset;
use crate::error::{Error, Result};
use crate::fa::control::McmcControl;
use crate::fa::gibbs_core::{
    draw_factor_scores, draw_loading_matrix, draw_residual_variances, LoadingUpdateGroup,
};
use crate::postprocess::{op_align, FitResult, Method, Provenance};
use crate::priors::mgps::{MgpsHyper, MgpsState};
use crate::rng::stream_rng;

/// Prior settings shared by the three samplers.
#[derive(Debug, Clone)]
pub struct MgpsOptions {
    pub hyper: MgpsHyper,
    /// Residual variance prior: `psi ~ IG(psi_shape, psi_rate)`.
    pub psi_shape: f64,
    pub psi_rate: f64,
}

impl Default for MgpsOptions {
    fn default() -> Self {
        MgpsOptions {
            hyper: MgpsHyper::default(),
            psi_shape: 1.0,
            psi_rate: 0.3,
        }
    }
}

/// Posterior draws from one of the three MGPS samplers.
///
/// Draw-major layout: `phi_draws[t]` is the shared P x K loading draw
/// (empty list for the per-study model), `lambda_draws[t][s]` the study-s
/// P x J_s draw (empty list for the pooled model), `psi_draws[t][s]` the
/// residual diagonal of block `s` (a single pooled block for the pooled
/// model). Marginal covariance draws are reconstructed on demand to keep
/// memory linear in P.
#[derive(Debug, Clone)]
pub struct MgpsFit {
    pub method: Method,
    /// Studies in the dataset the fit came from (the pooled model still
    /// reports per-study quantities replicated over this count).
    pub n_studies: usize,
    pub k: usize,
    pub j: Vec<usize>,
    pub phi_draws: Vec<DMatrix<f64>>,
    pub lambda_draws: Vec<Vec<DMatrix<f64>>>,
    pub psi_draws: Vec<Vec<DVector<f64>>>,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl MgpsFit {
    pub fn n_draws(&self) -> usize {
        self.psi_draws.len()
    }

    /// Shared-covariance draw `Phi Phi'`; absent for the per-study model.
    pub fn sigma_phi_draw(&self, t: usize) -> Option<DMatrix<f64>> {
        let phi = self.phi_draws.get(t)?;
        Some(phi * phi.transpose())
    }

    /// Marginal covariance draw of study `s`, reconstructed from the
    /// stored loading and residual draws.
    pub fn sigma_marginal_draw(&self, t: usize, s: usize) -> Result<DMatrix<f64>> {
        if t >= self.n_draws() || s >= self.n_studies {
            return Err(Error::Dimension(format!(
                "draw {t} study {s} out of range ({} draws, {} studies)",
                self.n_draws(),
                self.n_studies
            )));
        }
        let psi = match self.method {
            Method::StackFa => &self.psi_draws[t][0],
            _ => &self.psi_draws[t][s],
        };
        let p = psi.len();
        let mut sigma = DMatrix::from_diagonal(psi);
        if let Some(phi) = self.phi_draws.get(t) {
            sigma += phi * phi.transpose();
        }
        if let Some(lams) = self.lambda_draws.get(t) {
            let lam = &lams[s];
            if lam.ncols() > 0 {
                sigma += lam * lam.transpose();
            }
        }
        debug_assert_eq!(sigma.nrows(), p);
        Ok(sigma)
    }

    /// Point estimates following each model's extraction recipe: aligned
    /// loading means, point-estimate shared covariance, and draw-averaged
    /// (pooled/per-study models) or component-sum (combined model)
    /// marginal covariances.
    pub fn point_estimates(&self) -> Result<FitResult> {
        let t_count = self.n_draws();
        if t_count == 0 {
            return Err(Error::Dimension("fit holds no draws".into()));
        }
        let s_count = self.n_studies;
        let provenance = Provenance {
            draws_used: t_count,
            seed: self.seed,
            alignment: "procrustes".into(),
        };
        let fit = match self.method {
            Method::StackFa => {
                let aligned = op_align(&self.phi_draws)?;
                let phi_hat = aligned.mean;
                let sigma_phi = &phi_hat * phi_hat.transpose();
                let p = phi_hat.nrows();
                // Marginal covariance: average of per-draw Sigma.
                let mut sigma_marg = DMatrix::zeros(p, p);
                let mut psi_hat = DVector::zeros(p);
                for t in 0..t_count {
                    sigma_marg += self.sigma_marginal_draw(t, 0)?;
                    psi_hat += &self.psi_draws[t][0];
                }
                sigma_marg /= t_count as f64;
                psi_hat /= t_count as f64;
                FitResult {
                    method: self.method,
                    k_hat: phi_hat.ncols(),
                    phi: Some(phi_hat),
                    lambda: vec![],
                    psi: vec![psi_hat; s_count],
                    sigma_phi: Some(sigma_phi),
                    sigma_lambda: vec![],
                    sigma_marginal: vec![sigma_marg; s_count],
                    j_hat: vec![],
                    provenance,
                }
            }
            Method::IndFa => {
                let p = self.psi_draws[0][0].len();
                let mut lambda = Vec::with_capacity(s_count);
                let mut sigma_lambda = Vec::with_capacity(s_count);
                let mut sigma_marginal = Vec::with_capacity(s_count);
                let mut psi = Vec::with_capacity(s_count);
                for s in 0..s_count {
                    let draws: Vec<DMatrix<f64>> =
                        (0..t_count).map(|t| self.lambda_draws[t][s].clone()).collect();
                    let aligned = op_align(&draws)?;
                    let lam_hat = aligned.mean;
                    sigma_lambda.push(&lam_hat * lam_hat.transpose());
                    lambda.push(lam_hat);
                    let mut marg = DMatrix::zeros(p, p);
                    let mut psi_hat = DVector::zeros(p);
                    for t in 0..t_count {
                        marg += self.sigma_marginal_draw(t, s)?;
                        psi_hat += &self.psi_draws[t][s];
                    }
                    sigma_marginal.push(marg / t_count as f64);
                    psi.push(psi_hat / t_count as f64);
                }
                FitResult {
                    method: self.method,
                    phi: None,
                    lambda,
                    psi,
                    sigma_phi: None,
                    sigma_lambda,
                    sigma_marginal,
                    k_hat: 0,
                    j_hat: self.j.clone(),
                    provenance,
                }
            }
            Method::Bmsfa => {
                let aligned = op_align(&self.phi_draws)?;
                let phi_hat = aligned.mean;
                let sigma_phi = &phi_hat * phi_hat.transpose();
                let p = phi_hat.nrows();
                let mut lambda = Vec::with_capacity(s_count);
                let mut sigma_lambda = Vec::with_capacity(s_count);
                let mut sigma_marginal = Vec::with_capacity(s_count);
                let mut psi = Vec::with_capacity(s_count);
                for s in 0..s_count {
                    let draws: Vec<DMatrix<f64>> =
                        (0..t_count).map(|t| self.lambda_draws[t][s].clone()).collect();
                    let aligned = op_align(&draws)?;
                    let lam_hat = aligned.mean;
                    let sig_lam = &lam_hat * lam_hat.transpose();
                    let mut psi_hat = DVector::zeros(p);
                    for t in 0..t_count {
                        psi_hat += &self.psi_draws[t][s];
                    }
                    psi_hat /= t_count as f64;
                    let marg = &sigma_phi + &sig_lam + DMatrix::from_diagonal(&psi_hat);
                    lambda.push(lam_hat);
                    sigma_lambda.push(sig_lam);
                    sigma_marginal.push(marg);
                    psi.push(psi_hat);
                }
                FitResult {
                    method: self.method,
                    k_hat: phi_hat.ncols(),
                    phi: Some(phi_hat),
                    lambda,
                    psi,
                    sigma_phi: Some(sigma_phi),
                    sigma_lambda,
                    sigma_marginal,
                    j_hat: self.j.clone(),
                    provenance,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "point_estimates on an MGPS fit tagged {other}"
                )))
            }
        };
        fit.validate()?;
        Ok(fit)
    }
}

/// Pooled factor analysis: all studies stacked into one matrix, one shared
/// loading matrix and one shared residual diagonal.
pub fn fit_stack_fa(ds: &MultiStudyDataset, k: usize, ctrl: &McmcControl) -> Result<MgpsFit> {
    fit_stack_fa_opts(ds, k, ctrl, &MgpsOptions::default())
}

pub fn fit_stack_fa_opts(
    ds: &MultiStudyDataset,
    k: usize,
    ctrl: &McmcControl,
    opts: &MgpsOptions,
) -> Result<MgpsFit> {
    ctrl.validate()?;
    let p = ds.p();
    check_k(k, p)?;
    let pooled = vec![ds.pooled()];
    let warnings = centering_warnings(&pooled);
    let mut rng = stream_rng(ctrl.seed, 0);
    let chain = run_chain(&pooled, k, &[0], opts, ctrl, &mut rng)?;
    Ok(MgpsFit {
        method: Method::StackFa,
        n_studies: ds.n_studies(),
        k,
        j: vec![],
        phi_draws: chain.phi_draws,
        lambda_draws: vec![],
        psi_draws: chain.psi_draws,
        seed: ctrl.seed,
        warnings,
    })
}

/// Independent factor analyses: one chain per study, no pooling. Every
/// chain uses the same seed, so a one-study dataset reproduces the pooled
/// fit draw for draw and permuting studies permutes outputs.
pub fn fit_ind_fa(ds: &MultiStudyDataset, j: &[usize], ctrl: &McmcControl) -> Result<MgpsFit> {
    fit_ind_fa_opts(ds, j, ctrl, &MgpsOptions::default())
}

pub fn fit_ind_fa_opts(
    ds: &MultiStudyDataset,
    j: &[usize],
    ctrl: &McmcControl,
    opts: &MgpsOptions,
) -> Result<MgpsFit> {
    ctrl.validate()?;
    let s_count = ds.n_studies();
    let p = ds.p();
    if j.len() != s_count {
        return Err(Error::Dimension(format!(
            "{} factor counts for {} studies",
            j.len(),
            s_count
        )));
    }
    for (s, &js) in j.iter().enumerate() {
        if js == 0 {
            return Err(Error::Dimension(format!(
                "study {s} needs at least one factor"
            )));
        }
        check_k(js, p)?;
    }
    let warnings = centering_warnings(&ds.studies);
    // Chains are independent and each builds its own seeded stream, so
    // running them in parallel changes nothing but the wall clock.
    let mut per_study: Vec<RawChain> = ds
        .studies
        .par_iter()
        .enumerate()
        .map(|(s, y)| {
            let mut rng = stream_rng(ctrl.seed, 0);
            run_chain(std::slice::from_ref(y), j[s], &[0], opts, ctrl, &mut rng)
        })
        .collect::<Result<Vec<RawChain>>>()?;
    // Re-shuffle study-major chains into draw-major storage.
    let t_count = per_study[0].psi_draws.len();
    let mut lambda_draws = Vec::with_capacity(t_count);
    let mut psi_draws = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let mut lams = Vec::with_capacity(s_count);
        let mut psis = Vec::with_capacity(s_count);
        for chain in &mut per_study {
            lams.push(std::mem::take(&mut chain.phi_draws[t]));
            psis.push(std::mem::take(&mut chain.psi_draws[t][0]));
        }
        lambda_draws.push(lams);
        psi_draws.push(psis);
    }
    Ok(MgpsFit {
        method: Method::IndFa,
        n_studies: s_count,
        k: 0,
        j: j.to_vec(),
        phi_draws: vec![],
        lambda_draws,
        psi_draws,
        seed: ctrl.seed,
        warnings,
    })
}

/// Combined model: shared loadings plus per-study loading blocks, each
/// with its own shrinkage state, and per-study residual diagonals.
pub fn fit_bmsfa(
    ds: &MultiStudyDataset,
    k: usize,
    j: &[usize],
    ctrl: &McmcControl,
) -> Result<MgpsFit> {
    fit_bmsfa_opts(ds, k, j, ctrl, &MgpsOptions::default())
}

pub fn fit_bmsfa_opts(
    ds: &MultiStudyDataset,
    k: usize,
    j: &[usize],
    ctrl: &McmcControl,
    opts: &MgpsOptions,
) -> Result<MgpsFit> {
    ctrl.validate()?;
    let s_count = ds.n_studies();
    let p = ds.p();
    check_k(k, p)?;
    if j.len() != s_count {
        return Err(Error::Dimension(format!(
            "{} study factor counts for {} studies",
            j.len(),
            s_count
        )));
    }
    for &js in j {
        if js > p {
            return Err(Error::Dimension(format!(
                "study factor count {js} exceeds {p} variables"
            )));
        }
    }
    let warnings = centering_warnings(&ds.studies);
    let mut rng = stream_rng(ctrl.seed, 0);
    let chain = run_chain(&ds.studies, k, j, opts, ctrl, &mut rng)?;
    Ok(MgpsFit {
        method: Method::Bmsfa,
        n_studies: s_count,
        k,
        j: j.to_vec(),
        phi_draws: chain.phi_draws,
        lambda_draws: chain.lambda_draws,
        psi_draws: chain.psi_draws,
        seed: ctrl.seed,
        warnings,
    })
}

fn check_k(k: usize, p: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Dimension("at least one factor is required".into()));
    }
    if k > p {
        return Err(Error::Dimension(format!(
            "{k} factors exceed {p} variables"
        )));
    }
    Ok(())
}

/// Heuristic centering check: flag a study whose column means are large
/// relative to the column spread. The samplers assume centered data but
/// run regardless.
fn centering_warnings(studies: &[DMatrix<f64>]) -> Vec<String> {
    let mut warnings = Vec::new();
    for (s, y) in studies.iter().enumerate() {
        let n = y.nrows() as f64;
        if n < 2.0 {
            continue;
        }
        let mut worst: f64 = 0.0;
        for j in 0..y.ncols() {
            let col = y.column(j);
            let mean = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
            let excess = mean.abs() / sd.max(1e-12);
            worst = worst.max(excess);
        }
        if worst > 0.25 {
            warnings.push(format!(
                "study {s} does not look centered (|column mean| up to {worst:.2} column SDs); \
                 the model assumes zero-mean data"
            ));
        }
    }
    warnings
}

struct RawChain {
    phi_draws: Vec<DMatrix<f64>>,
    lambda_draws: Vec<Vec<DMatrix<f64>>>,
    psi_draws: Vec<Vec<DVector<f64>>>,
}

/// One Gibbs chain over (shared loadings, study loadings, factors,
/// residual variances, shrinkage states). `k` may be 0 (no shared block);
/// `j[s]` may be 0 (no study block). Update order per iteration: factors,
/// shared loadings + its shrinkage state, study loadings + their states,
/// residual variances.
fn run_chain(
    studies: &[DMatrix<f64>],
    k: usize,
    j: &[usize],
    opts: &MgpsOptions,
    ctrl: &McmcControl,
    rng: &mut ChaCha8Rng,
) -> Result<RawChain> {
    let s_count = studies.len();
    let p = studies[0].ncols();
    let store_lambda = j.iter().any(|&js| js > 0);

    // State: loadings start at small noise, shrinkage states neutral,
    // residual variances at one.
    let mut phi = init_loadings(rng, p, k);
    let mut phi_state = if k > 0 {
        Some(MgpsState::new(p, k, opts.hyper)?)
    } else {
        None
    };
    let mut lambdas: Vec<DMatrix<f64>> = j.iter().map(|&js| init_loadings(rng, p, js)).collect();
    let mut lambda_states: Vec<Option<MgpsState>> = j
        .iter()
        .map(|&js| {
            if js > 0 {
                MgpsState::new(p, js, opts.hyper).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let mut psis: Vec<DVector<f64>> = (0..s_count).map(|_| DVector::from_element(p, 1.0)).collect();

    let n_draws = ctrl.n_draws();
    let mut out = RawChain {
        phi_draws: Vec::with_capacity(if k > 0 { n_draws } else { 0 }),
        lambda_draws: Vec::with_capacity(if store_lambda { n_draws } else { 0 }),
        psi_draws: Vec::with_capacity(n_draws),
    };

    let mut factors: Vec<DMatrix<f64>> = Vec::with_capacity(s_count); // N_s x k
    let mut study_scores: Vec<DMatrix<f64>> = Vec::with_capacity(s_count); // N_s x j_s
    for s in 0..s_count {
        factors.push(DMatrix::zeros(studies[s].nrows(), k));
        study_scores.push(DMatrix::zeros(studies[s].nrows(), j[s]));
    }

    for iter in 0..ctrl.nrun {
        // Joint factor-score draw per study under [phi | lambda_s].
        for s in 0..s_count {
            let js = j[s];
            let combined = if js == 0 {
                phi.clone()
            } else if k == 0 {
                lambdas[s].clone()
            } else {
                let mut w = DMatrix::zeros(p, k + js);
                w.view_mut((0, 0), (p, k)).copy_from(&phi);
                w.view_mut((0, k), (p, js)).copy_from(&lambdas[s]);
                w
            };
            let scores = draw_factor_scores(rng, &studies[s], &combined, &psis[s])?;
            factors[s] = scores.columns(0, k).into_owned();
            study_scores[s] = scores.columns(k, js).into_owned();
        }

        // Shared loadings against residuals with the study blocks removed.
        if let Some(state) = phi_state.as_mut() {
            let mut grams = Vec::with_capacity(s_count);
            for s in 0..s_count {
                let residual = if j[s] == 0 {
                    studies[s].clone()
                } else {
                    &studies[s] - &study_scores[s] * lambdas[s].transpose()
                };
                grams.push(LoadingUpdateGroup {
                    gram: factors[s].transpose() * &factors[s],
                    proj: factors[s].transpose() * residual,
                    psi: &psis[s],
                });
            }
            phi = draw_loading_matrix(rng, &grams, &state.precision_matrix())?;
            state.gibbs_update(&phi, rng)?;
        }

        // Study loadings against residuals with the shared block removed.
        for s in 0..s_count {
            let Some(state) = lambda_states[s].as_mut() else {
                continue;
            };
            let residual = if k == 0 {
                studies[s].clone()
            } else {
                &studies[s] - &factors[s] * phi.transpose()
            };
            let group = LoadingUpdateGroup {
                gram: study_scores[s].transpose() * &study_scores[s],
                proj: study_scores[s].transpose() * residual,
                psi: &psis[s],
            };
            lambdas[s] = draw_loading_matrix(rng, &[group], &state.precision_matrix())?;
            state.gibbs_update(&lambdas[s], rng)?;
        }

        // Residual variances from the full-model residuals.
        for s in 0..s_count {
            let mut residual = studies[s].clone();
            if k > 0 {
                residual -= &factors[s] * phi.transpose();
            }
            if j[s] > 0 {
                residual -= &study_scores[s] * lambdas[s].transpose();
            }
            let sse = DVector::from_iterator(
                p,
                residual.column_iter().map(|c| c.norm_squared()),
            );
            psis[s] = draw_residual_variances(
                rng,
                opts.psi_shape,
                opts.psi_rate,
                studies[s].nrows(),
                &sse,
            )?;
        }

        if ctrl.keeps(iter) {
            if k > 0 {
                out.phi_draws.push(phi.clone());
            }
            if store_lambda {
                out.lambda_draws.push(lambdas.clone());
            }
            out.psi_draws.push(psis.clone());
        }
    }
    Ok(out)
}

fn init_loadings(rng: &mut ChaCha8Rng, p: usize, k: usize) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    use rand::Rng;
    DMatrix::from_fn(p, k, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        0.3 * z
    })
}
