//! Evaluation metrics: RV coefficient, Frobenius distance, held-out
//! prediction error via Bartlett scores, and factor-count summaries.

use nalgebra::DMatrix;

use crate::data::MultiStudyDataset;
use crate::error::{Error, Result};
use crate::linalg::chol_with_jitter;
use crate::postprocess::FitResult;

/// RV coefficient between two matrices with equal row counts:
/// `trace(XX'YY') / sqrt(trace((XX')^2) trace((YY')^2))`, a [0, 1]
/// similarity of the row configurations.
///
/// Computed as `|X'Y|_F^2 / (|X'X|_F |Y'Y|_F)`, which avoids forming the
/// P x P cross-products. A zero matrix has no defined RV (domain error);
/// report such cells as missing.
pub fn rv_coefficient(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(Error::Dimension(format!(
            "RV needs equal row counts, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let num = (x.transpose() * y).norm_squared();
    let dx = (x.transpose() * x).norm();
    let dy = (y.transpose() * y).norm();
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::Numeric(
            "RV coefficient is undefined for a zero matrix".into(),
        ));
    }
    Ok(num / (dx * dy))
}

/// Frobenius distance `|X - Y|_F`.
pub fn frobenius_distance(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "Frobenius distance needs equal shapes, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok((x - y).norm())
}

/// Held-out reconstruction error of a fit.
#[derive(Debug, Clone, Copy)]
pub struct PredictionMse {
    /// Mean squared prediction error over all held-out cells.
    pub mse: f64,
    /// True when a singular Bartlett Gram needed the ridge fallback.
    pub ridged: bool,
}

/// Relative ridge added to a singular Bartlett Gram matrix.
const BARTLETT_RIDGE: f64 = 1e-8;

/// Out-of-sample prediction error via Bartlett factor scores.
///
/// Per study the loadings are the concatenation of the shared and
/// study-specific blocks the fit provides; scores are the GLS estimator
/// `f = (L' Psi^-1 L)^-1 L' Psi^-1 y` and predictions `y_hat = L f`. The
/// MSE averages squared error over every held-out cell (all studies
/// pooled). Test data must already be centered.
pub fn prediction_mse(fit: &FitResult, test: &MultiStudyDataset) -> Result<PredictionMse> {
    let s_count = test.n_studies();
    let p = test.p();
    let mut ridged = false;
    let mut sse = 0.0;
    let mut cells = 0usize;
    for s in 0..s_count {
        let mut blocks: Vec<&DMatrix<f64>> = Vec::new();
        if let Some(phi) = &fit.phi {
            if phi.ncols() > 0 {
                blocks.push(phi);
            }
        }
        if let Some(lam) = fit.lambda.get(s) {
            if lam.ncols() > 0 {
                blocks.push(lam);
            }
        }
        if blocks.is_empty() {
            return Err(Error::Dimension(format!(
                "fit provides no loadings for study {s}; cannot predict"
            )));
        }
        let k: usize = blocks.iter().map(|b| b.ncols()).sum();
        let mut loadings = DMatrix::zeros(p, k);
        let mut col = 0;
        for b in blocks {
            if b.nrows() != p {
                return Err(Error::Dimension(format!(
                    "loadings have {} rows but test data has {p} variables",
                    b.nrows()
                )));
            }
            loadings.view_mut((0, col), (p, b.ncols())).copy_from(b);
            col += b.ncols();
        }
        let psi = fit
            .psi
            .get(s)
            .or_else(|| fit.psi.first())
            .ok_or_else(|| Error::Dimension("fit has no residual variances".into()))?;
        if psi.len() != p {
            return Err(Error::Dimension(format!(
                "residual diagonal has {} entries but test data has {p} variables",
                psi.len()
            )));
        }
        // W = Psi^-1 L, Gram = L' Psi^-1 L.
        let mut w = loadings.clone();
        for i in 0..p {
            let inv = 1.0 / psi[i];
            for j in 0..k {
                w[(i, j)] *= inv;
            }
        }
        let mut gram = loadings.transpose() * &w;
        let chol = match nalgebra::Cholesky::new(gram.clone()) {
            Some(c) => c,
            None => {
                ridged = true;
                let ridge = BARTLETT_RIDGE * gram.trace() / k as f64;
                for j in 0..k {
                    gram[(j, j)] += ridge;
                }
                chol_with_jitter(&gram)?
            }
        };
        let y = &test.studies[s];
        // Scores for all rows at once: solve Gram F' = W' Y'.
        let proj = w.transpose() * y.transpose();
        let scores_t = chol.solve(&proj);
        let pred = (loadings * scores_t).transpose();
        sse += (y - pred).norm_squared();
        cells += y.nrows() * p;
    }
    if cells == 0 {
        return Err(Error::Dimension("test data has no rows".into()));
    }
    Ok(PredictionMse {
        mse: sse / cells as f64,
        ridged,
    })
}

/// Mean and sample standard deviation formatted as `mean(sd)`, two
/// decimals each — the layout of the factor-count tables.
pub fn format_mean_sd(values: &[f64]) -> String {
    if values.is_empty() {
        return "NA".into();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (ss / (n - 1.0)).sqrt()
    };
    format!("{mean:.2}({sd:.2})")
}

/// One row of a factor-count table: a method's shared-factor counts and
/// per-study specific-factor counts across replicates, formatted.
#[derive(Debug, Clone)]
pub struct FactorCountRow {
    pub method: String,
    pub k_summary: String,
    pub j_summaries: Vec<String>,
}

/// Summarize estimated factor counts over replicates for one method.
/// `k_counts` holds one K-hat per replicate; `j_counts[s]` one J-hat per
/// replicate for study `s`.
pub fn factor_count_report(
    method: &str,
    k_counts: &[usize],
    j_counts: &[Vec<usize>],
) -> FactorCountRow {
    let to_f = |xs: &[usize]| xs.iter().map(|&v| v as f64).collect::<Vec<_>>();
    FactorCountRow {
        method: method.to_string(),
        k_summary: format_mean_sd(&to_f(k_counts)),
        j_summaries: j_counts.iter().map(|js| format_mean_sd(&to_f(js))).collect(),
    }
}

/// Plain mean over studies of a per-study metric, skipping undefined
/// (missing) cells; `None` when every cell is missing.
pub fn mean_over_studies(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}
