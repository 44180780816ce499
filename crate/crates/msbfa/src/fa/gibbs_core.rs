//! Shared conditional-update kernel for the Gibbs samplers: latent factor
//! scores, loading rows under Gaussian priors, conjugate residual
//! variances, and the factor-marginalized Gaussian log-likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{chol_with_jitter, mvn_draw_from_precision_chol, std_normal_matrix};
use crate::stats::inverse_gamma_draw;

/// Draw latent factor scores for every row of `y` given loadings and the
/// residual diagonal: rows are independent MVN with precision
/// `I + L' Psi^-1 L` and mean `prec^-1 L' Psi^-1 y`.
pub fn draw_factor_scores(
    rng: &mut ChaCha8Rng,
    y: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    psi: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (n, p) = y.shape();
    let k = loadings.ncols();
    if loadings.nrows() != p || psi.len() != p {
        return Err(Error::Dimension(format!(
            "factor-score update: data has {p} variables, loadings {} rows, psi {} entries",
            loadings.nrows(),
            psi.len()
        )));
    }
    if k == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    // W = Psi^-1 L; precision V = I + L'W.
    let mut w = loadings.clone();
    for i in 0..p {
        let inv = 1.0 / psi[i];
        for j in 0..k {
            w[(i, j)] *= inv;
        }
    }
    let mut prec = loadings.transpose() * &w;
    for j in 0..k {
        prec[(j, j)] += 1.0;
    }
    let chol = chol_with_jitter(&prec)?;
    // Means for all rows at once: solve V M' = W' Y'.
    let proj = w.transpose() * y.transpose();
    let means_t = chol.solve(&proj);
    // Noise: columns u with V^-1 covariance via L^-T z.
    let z = std_normal_matrix(rng, k, n);
    let noise_t = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Numeric("triangular solve failed in factor-score draw".into()))?;
    Ok((means_t + noise_t).transpose())
}

/// One likelihood block entering a loading-row update: the Gram matrix of
/// its factor scores, the score-by-residual projection, and the residual
/// variances weighting this block's rows.
pub struct LoadingUpdateGroup<'a> {
    /// `F' F`, K x K.
    pub gram: DMatrix<f64>,
    /// `F' R`, K x P, where R is the residual matrix this block explains.
    pub proj: DMatrix<f64>,
    /// Per-variable residual variances, length P.
    pub psi: &'a DVector<f64>,
}

/// Draw a full P x K loading matrix row by row. Row p has prior precision
/// `diag(prior_prec row p)` and likelihood contributions summed over
/// groups, each weighted by that group's `1/psi[p]`.
pub fn draw_loading_matrix(
    rng: &mut ChaCha8Rng,
    groups: &[LoadingUpdateGroup<'_>],
    prior_prec: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, k) = prior_prec.shape();
    for g in groups {
        if g.gram.nrows() != k || g.proj.nrows() != k || g.proj.ncols() != p || g.psi.len() != p {
            return Err(Error::Dimension(
                "loading update: group dimensions disagree with the prior grid".into(),
            ));
        }
    }
    let mut out = DMatrix::zeros(p, k);
    let mut prec = DMatrix::zeros(k, k);
    let mut proj = DVector::zeros(k);
    for row in 0..p {
        prec.fill(0.0);
        proj.fill(0.0);
        for g in groups {
            let w = 1.0 / g.psi[row];
            prec += &g.gram * w;
            proj.axpy(w, &g.proj.column(row), 1.0);
        }
        for j in 0..k {
            prec[(j, j)] += prior_prec[(row, j)];
        }
        let chol = chol_with_jitter(&prec)?;
        let mean = chol.solve(&proj);
        let draw = mvn_draw_from_precision_chol(rng, &mean, &chol);
        out.row_mut(row).copy_from(&draw.transpose());
    }
    Ok(out)
}

/// Conjugate residual-variance update: `psi_p ~ IG(a0 + n/2, b0 + sse_p/2)`
/// for each variable's sum of squared residuals.
pub fn draw_residual_variances(
    rng: &mut ChaCha8Rng,
    a0: f64,
    b0: f64,
    n_rows: usize,
    sse: &DVector<f64>,
) -> Result<DVector<f64>> {
    let shape = a0 + n_rows as f64 / 2.0;
    let mut out = DVector::zeros(sse.len());
    for (i, &s) in sse.iter().enumerate() {
        out[i] = inverse_gamma_draw(rng, shape, b0 + s / 2.0)?;
    }
    Ok(out)
}

/// Log-likelihood of zero-mean Gaussian rows with covariance
/// `L L' + diag(psi)`, computed through the Woodbury identity and the
/// matrix determinant lemma so only a K x K factorization is needed.
pub fn woodbury_mvn_loglik(
    y: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    psi: &DVector<f64>,
) -> Result<f64> {
    let (n, p) = y.shape();
    let k = loadings.ncols();
    if loadings.nrows() != p || psi.len() != p {
        return Err(Error::Dimension(
            "log-likelihood: loadings/psi do not match the data width".into(),
        ));
    }
    if psi.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numeric("residual variances must be positive".into()));
    }
    let ln_det_psi: f64 = psi.iter().map(|v| v.ln()).sum();
    // Scale data columns by 1/psi once.
    let mut yw = y.clone();
    for j in 0..p {
        let inv = 1.0 / psi[j];
        for i in 0..n {
            yw[(i, j)] *= inv;
        }
    }
    let q_diag: f64 = yw.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
    if k == 0 {
        return Ok(-0.5 * (n as f64 * (p as f64 * LN_2PI + ln_det_psi) + q_diag));
    }
    let mut w = loadings.clone();
    for i in 0..p {
        let inv = 1.0 / psi[i];
        for j in 0..k {
            w[(i, j)] *= inv;
        }
    }
    let mut cap = loadings.transpose() * &w;
    for j in 0..k {
        cap[(j, j)] += 1.0;
    }
    let chol = chol_with_jitter(&cap)?;
    let ln_det_cap = chol_ln_det(&chol);
    // Quadratic correction: sum_n m_n' C^-1 m_n with m_n = L' Psi^-1 y_n.
    let m = y * &w; // n x k, rows are m_n'
    let sol = chol.solve(&m.transpose()); // k x n
    let q_corr: f64 = m
        .transpose()
        .iter()
        .zip(sol.iter())
        .map(|(a, b)| a * b)
        .sum();
    let ln_det_sigma = ln_det_cap + ln_det_psi;
    Ok(-0.5 * (n as f64 * (p as f64 * LN_2PI + ln_det_sigma) + q_diag - q_corr))
}

/// Log-likelihood of zero-mean Gaussian rows against an explicit dense
/// covariance; the slow reference path for cross-checks.
pub fn dense_mvn_loglik(y: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let (n, p) = y.shape();
    if sigma.nrows() != p || sigma.ncols() != p {
        return Err(Error::Dimension(
            "log-likelihood: covariance does not match the data width".into(),
        ));
    }
    let chol = chol_with_jitter(sigma)?;
    let ln_det = chol_ln_det(&chol);
    let sol = chol.solve(&y.transpose()); // p x n
    let quad: f64 = y.transpose().iter().zip(sol.iter()).map(|(a, b)| a * b).sum();
    Ok(-0.5 * (n as f64 * (p as f64 * LN_2PI + ln_det) + quad))
}

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

fn chol_ln_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}
