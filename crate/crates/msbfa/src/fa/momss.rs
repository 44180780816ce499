//! Spike-and-slab factor regression fit by EM: study intercepts, optional
//! observed covariates with shared coefficients, and loadings under a
//! two-component prior mixing a narrow Gaussian spike with a non-local
//! moment slab,
//!
//! ```text
//! y_is = alpha_s + B x_is + Phi f_is + e_is,   e_is ~ N(0, Psi_s),
//! phi_pk | gamma_pk = 0 ~ N(0, tau0),
//! phi_pk | gamma_pk = 1 ~ (phi^2 / tau1) N(0, tau1),
//! ```
//!
//! Factors and inclusion indicators are the latent variables; both E-steps
//! are exact (Gaussian conditionals and mixture responsibilities), so the
//! observed-data log posterior is non-decreasing. The M-step is closed
//! form for the intercepts, coefficients, residual variances, and column
//! inclusion rates, and coordinate descent for the loadings: the surrogate
//! posterior density in one loading is `|phi|^(2 gamma) exp(quadratic)`,
//! whose stationarity condition is the cubic
//! `phi ((a + w) phi^2 - c phi - 2 gamma) = 0`; the two non-zero roots are
//! solved in closed form and the one with the higher objective wins.

use nalgebra::{DMatrix, DVector};

use crate::data::MultiStudyDataset;
use crate::error::{Error, Result};
use crate::fa::gibbs_core::woodbury_mvn_loglik;
use crate::linalg::{chol_with_jitter, symmetrize};
use crate::postprocess::{spectral_loadings, varimax, FitResult, Method, Provenance};
use crate::rng::seeded_rng;

/// Spike/slab scales and cross-validation settings.
#[derive(Debug, Clone)]
pub struct NlpSpikeSlabConfig {
    /// Spike variance.
    pub tau0: f64,
    /// Slab scale of the moment prior.
    pub tau1: f64,
    /// Seed for the fold partition used by initialization selection.
    pub cv_seed: u64,
    pub cv_folds: usize,
}

impl Default for NlpSpikeSlabConfig {
    fn default() -> Self {
        NlpSpikeSlabConfig {
            tau0: 0.026,
            tau1: 0.28,
            cv_seed: 0,
            cv_folds: 10,
        }
    }
}

/// Converged EM state.
#[derive(Debug, Clone)]
pub struct MomssFit {
    /// P x K posterior-mode loadings.
    pub phi: DMatrix<f64>,
    /// P x K inclusion responsibilities.
    pub gamma_prob: DMatrix<f64>,
    /// P x S study intercepts.
    pub alpha: DMatrix<f64>,
    /// P x Q covariate coefficients (absent when the data carry none).
    pub beta: Option<DMatrix<f64>>,
    /// Per-study residual variance diagonals.
    pub psi: Vec<DVector<f64>>,
    /// Column inclusion rates.
    pub zeta: DVector<f64>,
    /// Log-posterior value after every iteration.
    pub trace: Vec<f64>,
    /// Which initialization won cross-validation.
    pub init_choice: String,
    pub converged: bool,
}

impl MomssFit {
    /// Columns reordered by how many loadings each includes at
    /// `threshold`, most first; ties keep the original order.
    pub fn reordered_by_inclusion(&self, threshold: f64) -> MomssFit {
        let k = self.phi.ncols();
        let mut order: Vec<usize> = (0..k).collect();
        let counts: Vec<usize> = (0..k)
            .map(|c| {
                self.gamma_prob
                    .column(c)
                    .iter()
                    .filter(|&&g| g >= threshold)
                    .count()
            })
            .collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut out = self.clone();
        for (new_c, &old_c) in order.iter().enumerate() {
            out.phi.set_column(new_c, &self.phi.column(old_c));
            out.gamma_prob
                .set_column(new_c, &self.gamma_prob.column(old_c));
            out.zeta[new_c] = self.zeta[old_c];
        }
        out
    }

    /// Point extraction to the common fit format: the mode loadings give
    /// the shared covariance, and each study's marginal adds its residual
    /// diagonal.
    pub fn point_estimates(&self) -> Result<FitResult> {
        let sigma_phi = &self.phi * self.phi.transpose();
        let sigma_marginal: Vec<DMatrix<f64>> = self
            .psi
            .iter()
            .map(|psi| &sigma_phi + DMatrix::from_diagonal(psi))
            .collect();
        let result = FitResult {
            method: Method::Momss,
            k_hat: self.phi.ncols(),
            phi: Some(self.phi.clone()),
            lambda: vec![],
            psi: self.psi.clone(),
            sigma_phi: Some(sigma_phi),
            sigma_lambda: vec![],
            sigma_marginal,
            j_hat: vec![],
            provenance: Provenance {
                draws_used: 1,
                seed: 0,
                alignment: format!("EM mode ({})", self.init_choice),
            },
        };
        result.validate()?;
        Ok(result)
    }
}

/// Both candidate initializations and their cross-validation scores.
#[derive(Debug, Clone)]
pub struct MomssInit {
    pub plain: DMatrix<f64>,
    pub rotated: DMatrix<f64>,
    pub score_plain: f64,
    pub score_rotated: f64,
    /// "plain" or "varimax".
    pub chosen: String,
}

impl MomssInit {
    pub fn winner(&self) -> &DMatrix<f64> {
        if self.chosen == "varimax" {
            &self.rotated
        } else {
            &self.plain
        }
    }
}

pub fn fit_momss(
    ds: &MultiStudyDataset,
    k: usize,
    nlp: &NlpSpikeSlabConfig,
) -> Result<MomssFit> {
    fit_momss_full(ds, k, nlp, 500, 1e-6)
}

pub fn fit_momss_full(
    ds: &MultiStudyDataset,
    k: usize,
    nlp: &NlpSpikeSlabConfig,
    max_iter: usize,
    tol: f64,
) -> Result<MomssFit> {
    check_dims(ds, k)?;
    let (phi0, init_choice) = if ds.n_total() >= 10 {
        let init = momss_select_init(ds, k, nlp)?;
        (init.winner().clone(), init.chosen)
    } else {
        (
            initial_loadings(ds, k)?.1,
            "varimax (default, no CV)".to_string(),
        )
    };
    run_em(ds, phi0, init_choice, nlp, max_iter, tol)
}

/// Number of columns whose largest inclusion responsibility reaches
/// `threshold`.
pub fn momss_effective_k(fit: &MomssFit, threshold: f64) -> usize {
    (0..fit.gamma_prob.ncols())
        .filter(|&c| {
            fit.gamma_prob
                .column(c)
                .iter()
                .any(|&g| g >= threshold)
        })
        .count()
}

/// Build the two candidate initializations (spectral, and its varimax
/// rotation) and score each by `cv_folds`-fold held-out log-likelihood.
/// Ties prefer the rotation.
pub fn momss_select_init(
    ds: &MultiStudyDataset,
    k: usize,
    nlp: &NlpSpikeSlabConfig,
) -> Result<MomssInit> {
    check_dims(ds, k)?;
    if ds.n_total() < 10 {
        return Err(Error::Dimension(format!(
            "initialization selection needs at least 10 rows, got {}",
            ds.n_total()
        )));
    }
    let (plain, rotated) = initial_loadings(ds, k)?;
    let folds = fold_partition(ds, nlp.cv_folds, nlp.cv_seed);
    let mut score_plain = 0.0;
    let mut score_rotated = 0.0;
    for fold in &folds {
        let (train, test) = split_dataset(ds, fold)?;
        let Some(test) = test else { continue };
        for (candidate, score) in [
            (&plain, &mut score_plain),
            (&rotated, &mut score_rotated),
        ] {
            let fit = run_em(&train, candidate.clone(), String::new(), nlp, 25, 1e-5)?;
            *score += held_out_loglik(&fit, &test)?;
        }
    }
    let chosen = if score_rotated >= score_plain {
        "varimax"
    } else {
        "plain"
    };
    Ok(MomssInit {
        plain,
        rotated,
        score_plain,
        score_rotated,
        chosen: chosen.to_string(),
    })
}

fn check_dims(ds: &MultiStudyDataset, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Dimension("at least one factor is required".into()));
    }
    let cap = (ds.n_total() - 1).min(ds.p());
    if k > cap {
        return Err(Error::Dimension(format!(
            "{k} factors exceed min(N-1, P) = {cap}"
        )));
    }
    Ok(())
}

/// Spectral initialization: study means (and covariates, when present)
/// removed by least squares, loadings from the EVD of the pooled residual
/// covariance, plus the varimax rotation of the same.
fn initial_loadings(ds: &MultiStudyDataset, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = ds.p();
    let mut cov = DMatrix::zeros(p, p);
    let mut rows = 0usize;
    for (s, y) in ds.studies.iter().enumerate() {
        let resid = ls_residuals(y, ds.covariates.as_ref().map(|c| &c[s]));
        cov += resid.transpose() * &resid;
        rows += y.nrows();
    }
    cov /= rows.max(1) as f64;
    let plain = spectral_loadings(&symmetrize(&cov), k)?;
    let (rotated, _) = varimax(&plain);
    Ok((plain, rotated))
}

/// Remove the intercept (column means) and, when given, least-squares
/// covariate effects from a study block.
fn ls_residuals(y: &DMatrix<f64>, x: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    let n = y.nrows();
    let mut resid = y.clone();
    let means = DVector::from_iterator(y.ncols(), y.column_iter().map(|c| c.sum() / n as f64));
    for mut row in resid.row_iter_mut() {
        row -= means.transpose();
    }
    if let Some(x) = x {
        if x.ncols() > 0 {
            let xc = {
                let mut xc = x.clone();
                let xm = DVector::from_iterator(
                    x.ncols(),
                    x.column_iter().map(|c| c.sum() / n as f64),
                );
                for mut row in xc.row_iter_mut() {
                    row -= xm.transpose();
                }
                xc
            };
            let gram = symmetrize(&(xc.transpose() * &xc))
                + DMatrix::identity(x.ncols(), x.ncols()) * 1e-8;
            if let Ok(chol) = chol_with_jitter(&gram) {
                let coef = chol.solve(&(xc.transpose() * &resid));
                resid -= xc * coef;
            }
        }
    }
    resid
}

/// Study-stratified fold assignment: each study's rows are shuffled by the
/// seed and dealt into folds round-robin, so every row lands in exactly
/// one fold.
fn fold_partition(ds: &MultiStudyDataset, n_folds: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    let mut rng = seeded_rng(seed);
    let n_folds = n_folds.max(2);
    let mut folds = vec![vec![Vec::new(); ds.n_studies()]; n_folds];
    for (s, y) in ds.studies.iter().enumerate() {
        let mut idx: Vec<usize> = (0..y.nrows()).collect();
        idx.shuffle(&mut rng);
        for (pos, row) in idx.into_iter().enumerate() {
            folds[pos % n_folds][s].push(row);
        }
    }
    folds
}

/// Split into train (rows outside the fold) and test (rows inside). Test
/// is `None` when the fold is empty; studies too small to leave two
/// training rows keep all rows in train.
fn split_dataset(
    ds: &MultiStudyDataset,
    fold: &[Vec<usize>],
) -> Result<(MultiStudyDataset, Option<HeldOut>)> {
    let mut train_studies = Vec::with_capacity(ds.n_studies());
    let mut train_covs = ds.covariates.as_ref().map(|_| Vec::with_capacity(ds.n_studies()));
    let mut test = HeldOut {
        studies: Vec::new(),
        covariates: Vec::new(),
        study_index: Vec::new(),
    };
    for (s, y) in ds.studies.iter().enumerate() {
        let held: Vec<usize> = fold[s].clone();
        let keep: Vec<usize> = (0..y.nrows()).filter(|r| !held.contains(r)).collect();
        let (keep, held) = if keep.len() < 2 {
            ((0..y.nrows()).collect(), Vec::new())
        } else {
            (keep, held)
        };
        train_studies.push(select_rows(y, &keep));
        if let (Some(covs), Some(c)) = (train_covs.as_mut(), ds.covariates.as_ref()) {
            covs.push(select_rows(&c[s], &keep));
        }
        if !held.is_empty() {
            test.studies.push(select_rows(y, &held));
            if let Some(c) = ds.covariates.as_ref() {
                test.covariates.push(Some(select_rows(&c[s], &held)));
            } else {
                test.covariates.push(None);
            }
            test.study_index.push(s);
        }
    }
    let train = MultiStudyDataset::new(
        train_studies,
        ds.variable_names.clone(),
        ds.study_names.clone(),
        train_covs,
    )?;
    let test = if test.studies.is_empty() { None } else { Some(test) };
    Ok((train, test))
}

struct HeldOut {
    studies: Vec<DMatrix<f64>>,
    covariates: Vec<Option<DMatrix<f64>>>,
    study_index: Vec<usize>,
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&m.row(r));
    }
    out
}

/// Held-out Gaussian log-likelihood of a fitted model on unseen rows.
fn held_out_loglik(fit: &MomssFit, test: &HeldOut) -> Result<f64> {
    let mut total = 0.0;
    for (block, (x, &s)) in test
        .studies
        .iter()
        .zip(test.covariates.iter().zip(test.study_index.iter()))
    {
        let mut centered = block.clone();
        let alpha = fit.alpha.column(s);
        for mut row in centered.row_iter_mut() {
            row -= alpha.transpose();
        }
        if let (Some(beta), Some(x)) = (fit.beta.as_ref(), x.as_ref()) {
            centered -= x * beta.transpose();
        }
        total += woodbury_mvn_loglik(&centered, &fit.phi, &fit.psi[s])?;
    }
    Ok(total)
}

/// The EM loop. `init_choice` is carried through to the result untouched.
fn run_em(
    ds: &MultiStudyDataset,
    phi0: DMatrix<f64>,
    init_choice: String,
    nlp: &NlpSpikeSlabConfig,
    max_iter: usize,
    tol: f64,
) -> Result<MomssFit> {
    let p = ds.p();
    let k = phi0.ncols();
    let s_count = ds.n_studies();
    let q = ds.n_covariates();

    let mut phi = phi0;
    let mut alpha = DMatrix::zeros(p, s_count);
    for (s, y) in ds.studies.iter().enumerate() {
        let n = y.nrows() as f64;
        for c in 0..p {
            alpha[(c, s)] = y.column(c).sum() / n;
        }
    }
    let mut beta = if q > 0 { Some(DMatrix::zeros(p, q)) } else { None };
    let mut psi: Vec<DVector<f64>> = ds
        .studies
        .iter()
        .map(|y| {
            let n = y.nrows() as f64;
            DVector::from_iterator(
                p,
                y.column_iter().map(|c| {
                    let m = c.sum() / n;
                    (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).max(1e-4)
                }),
            )
        })
        .collect();
    let mut zeta = DVector::from_element(k, 0.5);
    let mut gamma = DMatrix::zeros(p, k);
    let mut trace: Vec<f64> = Vec::with_capacity(max_iter);
    let mut drops = 0u32;
    let mut converged = false;

    for _iter in 0..max_iter {
        // --- E-step ---------------------------------------------------
        // Factor moments per study via the K x K solve, and inclusion
        // responsibilities at the current loadings.
        let mut m_scores: Vec<DMatrix<f64>> = Vec::with_capacity(s_count);
        let mut v_mats: Vec<DMatrix<f64>> = Vec::with_capacity(s_count);
        let mut resids: Vec<DMatrix<f64>> = Vec::with_capacity(s_count);
        for (s, y) in ds.studies.iter().enumerate() {
            let resid = centered_block(y, &alpha, beta.as_ref(), ds, s);
            let inv_psi = psi[s].map(|v| 1.0 / v);
            let w = scale_rows(&phi, &inv_psi); // Psi^-1 Phi
            let prec = DMatrix::identity(k, k) + phi.transpose() * &w;
            let chol = chol_with_jitter(&symmetrize(&prec))?;
            let v = chol.inverse();
            let m = (&resid * &w) * &v; // N x K expected scores
            m_scores.push(m);
            v_mats.push(v);
            resids.push(resid);
        }
        for pp in 0..p {
            for c in 0..k {
                gamma[(pp, c)] = responsibility(phi[(pp, c)], zeta[c], nlp);
            }
        }

        // --- M-step ---------------------------------------------------
        // Intercepts: ridge-shrunk means of the factor-adjusted residual.
        for (s, y) in ds.studies.iter().enumerate() {
            let n = y.nrows() as f64;
            let fitted = &m_scores[s] * phi.transpose();
            for c in 0..p {
                let mut num = 0.0;
                for r in 0..y.nrows() {
                    num += resids[s][(r, c)] + alpha[(c, s)] - fitted[(r, c)];
                }
                alpha[(c, s)] = num / (n + psi[s][c]);
            }
        }
        // Coefficients: per-variable ridge regression pooling studies.
        if let Some(beta_mat) = beta.as_mut() {
            let covs = ds.covariates.as_ref().unwrap();
            for c in 0..p {
                let mut gram = DMatrix::identity(q, q);
                let mut rhs = DVector::zeros(q);
                for (s, y) in ds.studies.iter().enumerate() {
                    let w = 1.0 / psi[s][c];
                    let x = &covs[s];
                    gram += w * (x.transpose() * x);
                    let fitted = &m_scores[s] * phi.row(c).transpose();
                    for r in 0..y.nrows() {
                        let target = y[(r, c)] - alpha[(c, s)] - fitted[r];
                        for qq in 0..q {
                            rhs[qq] += w * x[(r, qq)] * target;
                        }
                    }
                }
                let chol = chol_with_jitter(&symmetrize(&gram))?;
                let coef = chol.solve(&rhs);
                for qq in 0..q {
                    beta_mat[(c, qq)] = coef[qq];
                }
            }
            // Residuals change with beta; recompute for the later steps.
            for (s, y) in ds.studies.iter().enumerate() {
                resids[s] = centered_block(y, &alpha, beta.as_ref(), ds, s);
            }
        } else {
            for (s, y) in ds.studies.iter().enumerate() {
                resids[s] = centered_block(y, &alpha, beta.as_ref(), ds, s);
            }
        }

        // Loadings: one coordinate-descent sweep per row.
        let mut gmats: Vec<DMatrix<f64>> = Vec::with_capacity(s_count); // E[F'F] per study
        let mut tmats: Vec<DMatrix<f64>> = Vec::with_capacity(s_count); // R' E[F]
        for s in 0..s_count {
            let n = ds.studies[s].nrows() as f64;
            gmats.push(n * &v_mats[s] + m_scores[s].transpose() * &m_scores[s]);
            tmats.push(resids[s].transpose() * &m_scores[s]);
        }
        for pp in 0..p {
            let mut g_row: DMatrix<f64> = DMatrix::zeros(k, k);
            let mut d_row: DVector<f64> = DVector::zeros(k);
            for s in 0..s_count {
                let w = 1.0 / psi[s][pp];
                g_row += w * &gmats[s];
                for c in 0..k {
                    d_row[c] += w * tmats[s][(pp, c)];
                }
            }
            for c in 0..k {
                let mut cross = 0.0;
                for c2 in 0..k {
                    if c2 != c {
                        cross += phi[(pp, c2)] * g_row[(c2, c)];
                    }
                }
                let a = g_row[(c, c)];
                let lin = d_row[c] - cross;
                phi[(pp, c)] = cd_update(a, lin, gamma[(pp, c)], nlp);
            }
        }

        // Residual variances: expected squared residuals under IG(1/2, 1/2).
        for (s, y) in ds.studies.iter().enumerate() {
            let n = y.nrows() as f64;
            let fitted = &m_scores[s] * phi.transpose();
            let nv = n * &v_mats[s];
            for c in 0..p {
                let mut sse = 0.0;
                for r in 0..y.nrows() {
                    let e = resids[s][(r, c)] - fitted[(r, c)];
                    sse += e * e;
                }
                // phi_p' (n V) phi_p accounts for score uncertainty.
                let quad = (phi.row(c) * &nv * phi.row(c).transpose())[(0, 0)];
                psi[s][c] = ((sse + quad + 1.0) / (n + 3.0)).max(1e-10);
            }
        }

        // Column inclusion rates under Beta(2, 2).
        for c in 0..k {
            let included: f64 = gamma.column(c).sum();
            zeta[c] = (included + 1.0) / (p as f64 + 2.0);
        }

        // --- bookkeeping ------------------------------------------------
        let obj = log_posterior(ds, &phi, &alpha, beta.as_ref(), &psi, &zeta, nlp)?;
        if let Some(&prev) = trace.last() {
            if obj < prev - 1e-6 {
                drops += 1;
                if drops >= 3 {
                    trace.push(obj);
                    return Err(Error::Numeric(format!(
                        "log posterior fell for {drops} consecutive iterations; trace tail: {:?}",
                        &trace[trace.len().saturating_sub(6)..]
                    )));
                }
            } else {
                drops = 0;
            }
            if (obj - prev).abs() / (1.0 + obj.abs()) < tol {
                trace.push(obj);
                converged = true;
                break;
            }
        }
        trace.push(obj);
    }

    // Final responsibilities at the converged loadings.
    for pp in 0..p {
        for c in 0..k {
            gamma[(pp, c)] = responsibility(phi[(pp, c)], zeta[c], nlp);
        }
    }
    Ok(MomssFit {
        phi,
        gamma_prob: gamma,
        alpha,
        beta,
        psi,
        zeta,
        trace,
        init_choice,
        converged,
    })
}

/// `y` minus its study intercept and covariate effects.
fn centered_block(
    y: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: Option<&DMatrix<f64>>,
    ds: &MultiStudyDataset,
    s: usize,
) -> DMatrix<f64> {
    let mut resid = y.clone();
    let a = alpha.column(s);
    for mut row in resid.row_iter_mut() {
        row -= a.transpose();
    }
    if let (Some(beta), Some(covs)) = (beta, ds.covariates.as_ref()) {
        resid -= &covs[s] * beta.transpose();
    }
    resid
}

fn scale_rows(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

/// Inclusion responsibility of one loading under the mixture prior.
fn responsibility(phi: f64, zeta: f64, nlp: &NlpSpikeSlabConfig) -> f64 {
    if phi == 0.0 {
        return 0.0;
    }
    let log_slab = zeta.ln() + (phi * phi / nlp.tau1).ln()
        - 0.5 * (phi * phi / nlp.tau1 + nlp.tau1.ln());
    let log_spike = (1.0 - zeta).ln() - 0.5 * (phi * phi / nlp.tau0 + nlp.tau0.ln());
    let m = log_slab.max(log_spike);
    let slab = (log_slab - m).exp();
    let spike = (log_spike - m).exp();
    slab / (slab + spike)
}

/// Closed-form coordinate update: maximize
/// `lin*phi - a/2 phi^2 + gamma*(2 ln|phi| - phi^2/(2 tau1)) - (1-gamma) phi^2/(2 tau0)`.
/// The stationarity cubic factors as `phi ((a+w) phi^2 - lin phi - 2 gamma) = 0`;
/// when `gamma > 0` the objective diverges to -inf at 0, so the best of
/// the two real quadratic roots wins; at `gamma = 0` it is plain ridge.
fn cd_update(a: f64, lin: f64, gamma: f64, nlp: &NlpSpikeSlabConfig) -> f64 {
    let w = gamma / nlp.tau1 + (1.0 - gamma) / nlp.tau0;
    let total = a + w;
    if total <= 0.0 {
        return 0.0;
    }
    if gamma < 1e-12 {
        return lin / total;
    }
    let disc = (lin * lin + 8.0 * gamma * total).sqrt();
    let r1 = (lin + disc) / (2.0 * total);
    let r2 = (lin - disc) / (2.0 * total);
    let obj = |phi: f64| -> f64 {
        lin * phi - 0.5 * total * phi * phi + 2.0 * gamma * phi.abs().max(1e-300).ln()
    };
    if obj(r1) >= obj(r2) {
        r1
    } else {
        r2
    }
}

/// Observed-data log posterior: factor-marginalized Gaussian likelihood
/// plus every prior term (mixture on loadings, unit-variance Gaussians on
/// intercepts and coefficients, IG(1/2, 1/2) on residual variances,
/// Beta(2, 2) on inclusion rates).
fn log_posterior(
    ds: &MultiStudyDataset,
    phi: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    beta: Option<&DMatrix<f64>>,
    psi: &[DVector<f64>],
    zeta: &DVector<f64>,
    nlp: &NlpSpikeSlabConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (s, y) in ds.studies.iter().enumerate() {
        let resid = centered_block(y, alpha, beta, ds, s);
        total += woodbury_mvn_loglik(&resid, phi, &psi[s])?;
    }
    for c in 0..phi.ncols() {
        let z = zeta[c].clamp(1e-12, 1.0 - 1e-12);
        for pp in 0..phi.nrows() {
            let v = phi[(pp, c)];
            let log_slab = z.ln() + (v * v / nlp.tau1).max(1e-300).ln()
                - 0.5 * (v * v / nlp.tau1 + nlp.tau1.ln());
            let log_spike = (1.0 - z).ln() - 0.5 * (v * v / nlp.tau0 + nlp.tau0.ln());
            let m = log_slab.max(log_spike);
            total += m + ((log_slab - m).exp() + (log_spike - m).exp()).ln();
        }
        total += z.ln() + (1.0 - z).ln(); // Beta(2,2)
    }
    total -= 0.5 * alpha.norm_squared();
    if let Some(b) = beta {
        total -= 0.5 * b.norm_squared();
    }
    for psi_s in psi {
        for &v in psi_s.iter() {
            total += -1.5 * v.ln() - 0.5 / v;
        }
    }
    Ok(total)
}
