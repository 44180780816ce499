//! Perturbed factor analysis: every study's data are mapped by a learned
//! perturbation matrix `Q_s` onto a shared factor structure,
//!
//! ```text
//! Q_s y_si = Phi f_si + e_si,   f_si ~ N(0, V),   e_si ~ N(0, Psi),
//! ```
//!
//! with `Q_1` pinned to the identity (the first study is the reference),
//! heteroscedastic factor variances `V = diag(nu)`, a shared residual
//! diagonal, a multiplicative-gamma prior on the loadings, and adaptive
//! truncation of loading columns whose magnitude collapses. Study
//! covariances follow as `Sigma_s = Q_s^-1 (Phi V Phi' + Psi) Q_s^-T`.
//!
//! The row conditional of `Q_s` is a multivariate-normal regression: with
//! `e_p` the p-th unit vector and independent `N(0, alpha_Q^2)` entry
//! priors centred at the identity,
//!
//! ```text
//! q_p | rest ~ N(prec^-1 b_p, prec^-1),
//! prec = Y_s' Y_s / psi_p + I / alpha_Q^2,
//! b_p  = Y_s' m_p / psi_p + e_p / alpha_Q^2,
//! ```
//!
//! where `m_p` is column `p` of the fitted means `F_s Phi'`. Because the
//! data Gram `Y_s' Y_s` is constant over the chain, one eigendecomposition
//! per study turns every row update into diagonal scalings in the
//! eigenbasis plus one matrix product per study and iteration.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::data::MultiStudyDataset;
use crate::error::{Error, Result};
use crate::fa::control::McmcControl;
use crate::fa::gibbs_core::{
    draw_factor_scores, draw_loading_matrix, draw_residual_variances, LoadingUpdateGroup,
};
use crate::linalg::{condition_number, std_normal_matrix, sym_eigen_desc, symmetrize};
use crate::postprocess::{op_align, FitResult, Method, Provenance};
use crate::priors::mgps::{MgpsHyper, MgpsState};
use crate::rng::stream_rng;
use crate::stats::inverse_gamma_draw;

/// Largest variable count accepted without the explicit override; the
/// per-study dense linear algebra is cubic in P and becomes the cost
/// driver well before four-digit dimensions.
pub const PFA_MAX_P: usize = 512;
/// Condition-number bound past which a perturbation draw counts as
/// singular and is redrawn.
pub const Q_CONDITION_LIMIT: f64 = 1e12;
const Q_REDRAW_LIMIT: usize = 50;

/// Prior and guard settings for [`fit_pfa_cfg`].
#[derive(Debug, Clone)]
pub struct PfaConfig {
    /// Drop a loading column when its mean absolute entry falls below this.
    pub cutoff: f64,
    /// Fix the perturbation scale instead of sampling it.
    pub fixed_alpha_q: Option<f64>,
    /// Accept P beyond [`PFA_MAX_P`].
    pub allow_large_p: bool,
    /// Fraction of the run before truncation checks begin.
    pub truncate_after: f64,
    pub hyper: MgpsHyper,
    /// Residual variance prior IG(shape, rate).
    pub psi_shape: f64,
    pub psi_rate: f64,
    /// Factor variance prior IG(shape, rate).
    pub nu_shape: f64,
    pub nu_rate: f64,
    /// Perturbation variance prior IG(shape, rate).
    pub alpha_q_shape: f64,
    pub alpha_q_rate: f64,
}

impl Default for PfaConfig {
    fn default() -> Self {
        PfaConfig {
            cutoff: 1e-3,
            fixed_alpha_q: None,
            allow_large_p: false,
            truncate_after: 0.2,
            hyper: MgpsHyper::default(),
            psi_shape: 1.0,
            psi_rate: 0.3,
            nu_shape: 10.0,
            nu_rate: 0.1,
            alpha_q_shape: 0.1,
            alpha_q_rate: 0.1,
        }
    }
}

/// Posterior draws from the perturbed-factor sampler. Column counts may
/// shrink over the run, so each draw records its own loading width.
/// Perturbations are stored for studies after the first only; the
/// reference study's matrix is the identity by construction.
#[derive(Debug, Clone)]
pub struct PfaFit {
    pub p: usize,
    pub n_studies: usize,
    /// P x K_t loading draws.
    pub phi_draws: Vec<DMatrix<f64>>,
    /// Factor variance diagonals, length K_t.
    pub v_draws: Vec<DVector<f64>>,
    /// Shared residual diagonals.
    pub psi_draws: Vec<DVector<f64>>,
    /// Perturbation draws for studies `2..=S`: `q_draws[t][s-1]`.
    pub q_draws: Vec<Vec<DMatrix<f64>>>,
    pub alpha_q_draws: Vec<f64>,
    /// Loading column count at every iteration (not just stored draws).
    pub k_trace: Vec<usize>,
    /// Perturbation draws rejected for ill-conditioning.
    pub singular_q_rejections: usize,
    pub seed: u64,
}

impl PfaFit {
    pub fn n_draws(&self) -> usize {
        self.psi_draws.len()
    }

    /// Perturbation matrix of draw `t` for study `s` (0-based); the
    /// reference study returns the identity.
    pub fn q_matrix(&self, t: usize, s: usize) -> DMatrix<f64> {
        if s == 0 {
            DMatrix::identity(self.p, self.p)
        } else {
            self.q_draws[t][s - 1].clone()
        }
    }

    /// Shared covariance of draw `t`: `Phi V Phi' + Psi`.
    pub fn sigma_phi_draw(&self, t: usize) -> DMatrix<f64> {
        let phi = &self.phi_draws[t];
        let scaled = phi * DMatrix::from_diagonal(&self.v_draws[t]);
        let mut sigma = scaled * phi.transpose();
        sigma += DMatrix::from_diagonal(&self.psi_draws[t]);
        sigma
    }
}

/// Point summaries of a perturbed-factor fit: the shared covariance, the
/// per-study covariances obtained through the inverse perturbations, and
/// their differences.
#[derive(Debug, Clone)]
pub struct PfaCovariances {
    pub sigma_phi: DMatrix<f64>,
    pub sigma_study: Vec<DMatrix<f64>>,
    pub sigma_lambda: Vec<DMatrix<f64>>,
    /// Modal loading column count; only draws at this width are averaged.
    pub k_hat: usize,
    pub draws_used: usize,
}

pub fn fit_pfa(ds: &MultiStudyDataset, k: usize, ctrl: &McmcControl) -> Result<PfaFit> {
    fit_pfa_cfg(ds, k, ctrl, &PfaConfig::default())
}

pub fn fit_pfa_cfg(
    ds: &MultiStudyDataset,
    k: usize,
    ctrl: &McmcControl,
    cfg: &PfaConfig,
) -> Result<PfaFit> {
    ctrl.validate()?;
    let p = ds.p();
    let s_count = ds.n_studies();
    if k == 0 {
        return Err(Error::Dimension("at least one factor is required".into()));
    }
    if k > p {
        return Err(Error::Dimension(format!(
            "{k} factors exceed {p} variables"
        )));
    }
    if p > PFA_MAX_P && !cfg.allow_large_p {
        return Err(Error::Guard(format!(
            "P = {p} exceeds the perturbed-factor limit of {PFA_MAX_P}; the per-study dense \
             solves are cubic in P — pass the large-P override to proceed anyway"
        )));
    }
    if let Some(a) = cfg.fixed_alpha_q {
        if a <= 0.0 {
            return Err(Error::Config(format!(
                "fixed perturbation scale must be positive, got {a}"
            )));
        }
    }
    if !(0.0..1.0).contains(&cfg.truncate_after) {
        return Err(Error::Config(format!(
            "truncation start fraction {} outside [0, 1)",
            cfg.truncate_after
        )));
    }

    let mut rng = stream_rng(ctrl.seed, 0);
    // One-time spectral setup per perturbed study: the data Gram never
    // changes, so its eigenbasis diagonalises every row precision.
    let mut grams: Vec<Option<(DVector<f64>, DMatrix<f64>)>> = vec![None; s_count];
    for s in 1..s_count {
        let y = &ds.studies[s];
        let gram = symmetrize(&(y.transpose() * y));
        let (vals, vecs) = sym_eigen_desc(&gram);
        grams[s] = Some((vals, vecs));
    }

    // State.
    let mut k_cur = k;
    let mut phi = 0.3 * std_normal_matrix(&mut rng, p, k_cur);
    let mut mgps = MgpsState::new(p, k_cur, cfg.hyper)?;
    let mut nu = DVector::from_element(k_cur, 1.0);
    let mut psi = DVector::from_element(p, 1.0);
    let mut qs: Vec<DMatrix<f64>> = (0..s_count.saturating_sub(1))
        .map(|_| DMatrix::identity(p, p))
        .collect();
    let mut alpha_q2 = cfg.fixed_alpha_q.map(|a| a * a).unwrap_or(1.0);

    let truncate_from = ((ctrl.nrun as f64) * cfg.truncate_after).ceil() as usize;
    let mut out = PfaFit {
        p,
        n_studies: s_count,
        phi_draws: Vec::with_capacity(ctrl.n_draws()),
        v_draws: Vec::with_capacity(ctrl.n_draws()),
        psi_draws: Vec::with_capacity(ctrl.n_draws()),
        q_draws: Vec::with_capacity(if s_count > 1 { ctrl.n_draws() } else { 0 }),
        alpha_q_draws: Vec::with_capacity(ctrl.n_draws()),
        k_trace: Vec::with_capacity(ctrl.nrun),
        singular_q_rejections: 0,
        seed: ctrl.seed,
    };

    let n_total: usize = ds.studies.iter().map(|y| y.nrows()).sum();
    let mut factors: Vec<DMatrix<f64>> = ds
        .studies
        .iter()
        .map(|y| DMatrix::zeros(y.nrows(), k_cur))
        .collect();

    for iter in 0..ctrl.nrun {
        // Transformed data under the current perturbations.
        let transformed: Vec<DMatrix<f64>> = ds
            .studies
            .iter()
            .enumerate()
            .map(|(s, y)| if s == 0 { y.clone() } else { y * qs[s - 1].transpose() })
            .collect();

        // (i) factor scores: scale the loadings by sqrt(V) so the unit
        // prior kernel applies, then scale the scores back.
        let sqrt_v = nu.map(f64::sqrt);
        let scaled_phi = {
            let mut m = phi.clone();
            for c in 0..k_cur {
                m.column_mut(c).scale_mut(sqrt_v[c]);
            }
            m
        };
        for s in 0..s_count {
            let g = draw_factor_scores(&mut rng, &transformed[s], &scaled_phi, &psi)?;
            let mut f = g;
            for c in 0..k_cur {
                f.column_mut(c).scale_mut(sqrt_v[c]);
            }
            factors[s] = f;
        }

        // (i) loadings: one pooled regression since Psi is shared.
        let groups: Vec<LoadingUpdateGroup> = (0..s_count)
            .map(|s| LoadingUpdateGroup {
                gram: factors[s].transpose() * &factors[s],
                proj: factors[s].transpose() * &transformed[s],
                psi: &psi,
            })
            .collect();
        phi = draw_loading_matrix(&mut rng, &groups, &mgps.precision_matrix())?;
        mgps.gibbs_update(&phi, &mut rng)?;

        // (ii) factor variances.
        for c in 0..k_cur {
            let ss: f64 = factors
                .iter()
                .map(|f| f.column(c).norm_squared())
                .sum();
            nu[c] = inverse_gamma_draw(
                &mut rng,
                cfg.nu_shape + 0.5 * n_total as f64,
                cfg.nu_rate + 0.5 * ss,
            )?;
        }

        // (i) shared residual diagonal from all transformed residuals.
        let mut sse = DVector::zeros(p);
        for s in 0..s_count {
            let resid = &transformed[s] - &factors[s] * phi.transpose();
            for (c, col) in resid.column_iter().enumerate() {
                sse[c] += col.norm_squared();
            }
        }
        psi = draw_residual_variances(&mut rng, cfg.psi_shape, cfg.psi_rate, n_total, &sse)?;

        // (iii) perturbations, row-wise in each study's fixed eigenbasis.
        for s in 1..s_count {
            let (vals, vecs) = grams[s].as_ref().unwrap();
            let y = &ds.studies[s];
            let means = &factors[s] * phi.transpose();
            let cross = y.transpose() * means; // C[:,p] = Y' m_p
            let cross_eig = vecs.transpose() * cross;
            let mut attempts = 0;
            loop {
                let q = draw_perturbation(
                    &mut rng, vals, vecs, &cross_eig, &psi, alpha_q2,
                );
                if condition_number(&q) <= Q_CONDITION_LIMIT {
                    qs[s - 1] = q;
                    break;
                }
                out.singular_q_rejections += 1;
                attempts += 1;
                if attempts >= Q_REDRAW_LIMIT {
                    return Err(Error::Numeric(format!(
                        "study {s} perturbation stayed ill-conditioned after \
                         {Q_REDRAW_LIMIT} redraws at iteration {iter}"
                    )));
                }
            }
        }

        // (iv) perturbation scale.
        if cfg.fixed_alpha_q.is_none() && s_count > 1 {
            let mut ss = 0.0;
            for q in &qs {
                let mut dev = q.clone();
                for d in 0..p {
                    dev[(d, d)] -= 1.0;
                }
                ss += dev.norm_squared();
            }
            let count = (s_count - 1) * p * p;
            alpha_q2 = inverse_gamma_draw(
                &mut rng,
                cfg.alpha_q_shape + 0.5 * count as f64,
                cfg.alpha_q_rate + 0.5 * ss,
            )?;
        }

        // (v) adaptive truncation: drop collapsed loading columns once the
        // transient has passed; the count can only decrease.
        if iter >= truncate_from && k_cur > 0 {
            let mut drop: Vec<usize> = (0..k_cur)
                .filter(|&c| {
                    let mean_abs = phi.column(c).iter().map(|v| v.abs()).sum::<f64>() / p as f64;
                    mean_abs < cfg.cutoff
                })
                .collect();
            if !drop.is_empty() {
                drop.sort_unstable_by(|a, b| b.cmp(a));
                for c in drop {
                    phi = phi.remove_column(c);
                    nu = nu.remove_row(c);
                    mgps.drop_column(c);
                    k_cur -= 1;
                }
                if k_cur == 0 {
                    return Err(Error::Truncation(format!(
                        "every loading column fell below cutoff {} by iteration {iter}",
                        cfg.cutoff
                    )));
                }
                for f in &mut factors {
                    *f = DMatrix::zeros(f.nrows(), k_cur);
                }
            }
        }
        out.k_trace.push(k_cur);

        if ctrl.keeps(iter) {
            out.phi_draws.push(phi.clone());
            out.v_draws.push(nu.clone());
            out.psi_draws.push(psi.clone());
            if s_count > 1 {
                out.q_draws.push(qs.clone());
            }
            out.alpha_q_draws.push(alpha_q2.sqrt());
        }
    }
    Ok(out)
}

/// Draw a full perturbation matrix. All rows share the data-Gram
/// eigenbasis `vecs`/`vals`; row `p` differs only through the scalars
/// `1/psi_p` and `1/alpha_q2`, so each row is two diagonal scalings in
/// the eigenbasis. `cross_eig` holds `U' Y' (F Phi')`.
fn draw_perturbation(
    rng: &mut ChaCha8Rng,
    vals: &DVector<f64>,
    vecs: &DMatrix<f64>,
    cross_eig: &DMatrix<f64>,
    psi: &DVector<f64>,
    alpha_q2: f64,
) -> DMatrix<f64> {
    let p = vals.len();
    let inv_a2 = 1.0 / alpha_q2;
    // Columns of `coords` are the eigenbasis coordinates of the rows of Q.
    let noise = std_normal_matrix(rng, p, p);
    let mut coords = DMatrix::zeros(p, p);
    for row in 0..p {
        let inv_psi = 1.0 / psi[row];
        for d in 0..p {
            let prec = vals[d].max(0.0) * inv_psi + inv_a2;
            // b_p in eigen coordinates: data part + identity-prior part.
            let b = cross_eig[(d, row)] * inv_psi + vecs[(row, d)] * inv_a2;
            coords[(d, row)] = b / prec + noise[(d, row)] / prec.sqrt();
        }
    }
    // Rows of Q are U * coords columns, i.e. Q = (U coords)'.
    (vecs * coords).transpose()
}

/// Average the stored draws into the shared and per-study covariances.
/// Draws are first filtered to the modal loading width; each kept draw's
/// perturbations are inverted densely with an explicit residual check.
pub fn pfa_study_covariances(fit: &PfaFit) -> Result<PfaCovariances> {
    if fit.n_draws() == 0 {
        return Err(Error::Dimension("fit holds no draws".into()));
    }
    let keep = modal_k_indices(fit);
    let k_hat = fit.phi_draws[keep[0]].ncols();
    let p = fit.p;
    let s_count = fit.n_studies;
    let mut sigma_phi = DMatrix::zeros(p, p);
    let mut sigma_study = vec![DMatrix::zeros(p, p); s_count];
    for &t in &keep {
        let sp = fit.sigma_phi_draw(t);
        sigma_phi += &sp;
        sigma_study[0] += &sp;
        for s in 1..s_count {
            let q = &fit.q_draws[t][s - 1];
            let inv = q.clone().try_inverse().ok_or_else(|| {
                Error::Numeric(format!("stored perturbation of draw {t}, study {s} is singular"))
            })?;
            let residual = (q * &inv - DMatrix::identity(p, p)).norm();
            if residual >= 1e-8 {
                return Err(Error::Numeric(format!(
                    "perturbation inverse of draw {t}, study {s} fails the residual check \
                     ({residual:.2e})"
                )));
            }
            sigma_study[s] += symmetrize(&(&inv * sp.clone() * inv.transpose()));
        }
    }
    let n = keep.len() as f64;
    sigma_phi /= n;
    for s in &mut sigma_study {
        *s /= n;
    }
    // The reference study was accumulated from the shared draws directly.
    if s_count > 0 {
        sigma_study[0] = sigma_phi.clone();
    }
    let sigma_lambda = sigma_study.iter().map(|s| s - &sigma_phi).collect();
    Ok(PfaCovariances {
        sigma_phi,
        sigma_study,
        sigma_lambda,
        k_hat,
        draws_used: keep.len(),
    })
}

/// Indices of draws whose loading width equals the modal width (ties
/// break toward the smaller width).
fn modal_k_indices(fit: &PfaFit) -> Vec<usize> {
    use std::collections::BTreeMap;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for phi in &fit.phi_draws {
        *counts.entry(phi.ncols()).or_insert(0) += 1;
    }
    let modal = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&k, _)| k)
        .unwrap_or(0);
    (0..fit.n_draws())
        .filter(|&t| fit.phi_draws[t].ncols() == modal)
        .collect()
}

/// Full extraction to the common fit format: covariances from
/// [`pfa_study_covariances`], loadings as the aligned mean of the
/// variance-scaled draws at the modal width.
pub fn pfa_point_estimates(fit: &PfaFit) -> Result<FitResult> {
    let cov = pfa_study_covariances(fit)?;
    let keep = modal_k_indices(fit);
    let scaled: Vec<DMatrix<f64>> = keep
        .iter()
        .map(|&t| {
            let mut m = fit.phi_draws[t].clone();
            for c in 0..m.ncols() {
                m.column_mut(c).scale_mut(fit.v_draws[t][c].sqrt());
            }
            m
        })
        .collect();
    let aligned = op_align(&scaled)?;
    let mut psi_hat = DVector::zeros(fit.p);
    for &t in &keep {
        psi_hat += &fit.psi_draws[t];
    }
    psi_hat /= keep.len() as f64;
    let result = FitResult {
        method: Method::Pfa,
        k_hat: cov.k_hat,
        phi: Some(aligned.mean),
        lambda: vec![],
        psi: vec![psi_hat; fit.n_studies],
        sigma_phi: Some(cov.sigma_phi),
        sigma_lambda: cov.sigma_lambda,
        sigma_marginal: cov.sigma_study,
        j_hat: vec![],
        provenance: Provenance {
            draws_used: cov.draws_used,
            seed: fit.seed,
            alignment: "procrustes".into(),
        },
    };
    result.validate()?;
    Ok(result)
}

/// Study-specific loadings implied by the perturbations,
/// `(Q_s^-1 - I) Phi sqrt(V)`, averaged over modal-width draws. The
/// construction is known to be unstable for cross-model comparison; it is
/// provided for inspection only and excluded from standard reports.
pub fn pfa_study_loadings_experimental(fit: &PfaFit) -> Result<Vec<DMatrix<f64>>> {
    let keep = modal_k_indices(fit);
    if keep.is_empty() {
        return Err(Error::Dimension("fit holds no draws".into()));
    }
    let p = fit.p;
    let k = fit.phi_draws[keep[0]].ncols();
    let mut out = vec![DMatrix::zeros(p, k); fit.n_studies];
    for &t in &keep {
        let mut scaled = fit.phi_draws[t].clone();
        for c in 0..k {
            scaled.column_mut(c).scale_mut(fit.v_draws[t][c].sqrt());
        }
        for s in 1..fit.n_studies {
            let q = &fit.q_draws[t][s - 1];
            let inv = q.clone().try_inverse().ok_or_else(|| {
                Error::Numeric(format!("stored perturbation of draw {t}, study {s} is singular"))
            })?;
            out[s] += (inv - DMatrix::identity(p, p)) * &scaled;
        }
    }
    for m in &mut out {
        *m /= keep.len() as f64;
    }
    Ok(out)
}
