//! Small dense linear-algebra helpers shared by the samplers.
//!
//! Everything is built on nalgebra's dynamically sized types. The helpers
//! centralize the two patterns the samplers repeat constantly: symmetric
//! eigendecompositions sorted by eigenvalue, and Cholesky factorizations with
//! an escalating diagonal jitter retry for matrices that are PSD only up to
//! rounding.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative jitter added to the diagonal when a Cholesky factorization fails.
pub const CHOL_JITTER: f64 = 1e-8;

/// Symmetric eigendecomposition with eigenvalues sorted descending.
///
/// Returns `(eigenvalues, eigenvectors)` where column `i` of the eigenvector
/// matrix pairs with `eigenvalues[i]`.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_fn(n, |i, _| eig.eigenvalues[order[i]]);
    let vectors = DMatrix::from_fn(m.nrows(), n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Cholesky factorization with up to three rounds of escalating diagonal
/// jitter (`CHOL_JITTER` scaled by the mean diagonal, then x100, x10^4).
pub fn chol_with_jitter(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let scale = m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / m.nrows().max(1) as f64;
    let base = CHOL_JITTER * scale.max(1.0);
    for boost in [1.0, 1e2, 1e4] {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += base * boost;
        }
        if let Some(ch) = Cholesky::new(jittered) {
            return Ok(ch);
        }
    }
    Err(Error::Numeric(format!(
        "Cholesky factorization failed for a {}x{} matrix even with diagonal jitter",
        m.nrows(),
        m.ncols()
    )))
}

/// Log-determinant of a factored SPD matrix.
pub fn chol_ln_det(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Force exact symmetry: `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Matrix of iid standard normal draws.
pub fn std_normal_matrix<R: Rng>(rng: &mut R, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nrows, ncols, |_, _| rng.sample(StandardNormal))
}

/// Vector of iid standard normal draws.
pub fn std_normal_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draw from `N(mean, Prec^{-1})` given the Cholesky factor of the precision.
///
/// If `Prec = L L^T`, the draw is `mean + L^{-T} z` with `z` standard normal.
pub fn mvn_draw_from_precision_chol<R: Rng>(
    rng: &mut R,
    mean: &DVector<f64>,
    prec_chol: &Cholesky<f64, Dyn>,
    ) -> DVector<f64> {
    let z = std_normal_vector(rng, mean.len());
    let mut x = z;
    prec_chol
        .l_dirty()
        .transpose()
        .solve_upper_triangular_mut(&mut x);
    mean + x
}

/// Condition number estimate from the SVD (largest / smallest singular value).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.min()
}
