//! Turning raw posterior draws into aligned, interpretable point estimates.
//!
//! Factor models are invariant to rotation and sign flips of the loading
//! columns, so draws cannot be averaged naively. This module provides the
//! alignment tools (orthogonal Procrustes to a running mean, varimax), the
//! eigenvalue rule for choosing the number of factors, spectral loading
//! extraction from covariance estimates, and the [`FitResult`] container
//! every estimator's point estimates are reported in.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, sym_eigen_desc};

/// Default eigenvalue-share threshold for choosing the number of factors.
pub const DEFAULT_EVD_THRESHOLD: f64 = 0.05;

/// Convergence tolerance for the iterative Procrustes alignment.
pub const OP_ALIGN_TOL: f64 = 1e-8;

/// Maximum alignment sweeps before accepting the current fixed point.
pub const OP_ALIGN_MAX_SWEEPS: usize = 10;

/// Symmetry slack accepted when validating covariance inputs.
const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalue floor: retained eigenvalues below this are a domain error,
/// anything in `[-PSD_TOL, 0)` is clamped to zero.
const PSD_TOL: f64 = 1e-8;

/// The seven estimators, as they appear in configuration and output paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    StackFa,
    IndFa,
    Pfa,
    Momss,
    Sufa,
    Bmsfa,
    Tetris,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::StackFa,
        Method::IndFa,
        Method::Pfa,
        Method::Momss,
        Method::Sufa,
        Method::Bmsfa,
        Method::Tetris,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::StackFa => "stackfa",
            Method::IndFa => "indfa",
            Method::Pfa => "pfa",
            Method::Momss => "momss",
            Method::Sufa => "sufa",
            Method::Bmsfa => "bmsfa",
            Method::Tetris => "tetris",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stackfa" => Ok(Method::StackFa),
            "indfa" => Ok(Method::IndFa),
            "pfa" => Ok(Method::Pfa),
            "momss" => Ok(Method::Momss),
            "sufa" => Ok(Method::Sufa),
            "bmsfa" => Ok(Method::Bmsfa),
            "tetris" => Ok(Method::Tetris),
            other => Err(Error::Config(format!(
                "unknown method '{other}'; expected one of stackfa, indfa, pfa, momss, sufa, bmsfa, tetris"
            ))),
        }
    }
}

/// How a [`FitResult`] was produced: enough to trace it back to a run.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    /// Posterior draws (or EM iterations) behind the point estimates.
    pub draws_used: usize,
    pub seed: u64,
    /// Alignment applied to loading draws ("procrustes", "varimax", "none").
    pub alignment: String,
}

/// Point estimates of one fit in a method-independent layout.
///
/// Study-level fields are indexed like the dataset's studies. Methods that
/// do not produce a given quantity leave it `None`/empty: a per-study
/// baseline has no shared loadings, a pooled baseline no study-specific
/// ones.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: Method,
    /// Shared loadings, `P x k_hat`.
    pub phi: Option<DMatrix<f64>>,
    /// Study-specific loadings, `P x j_hat[s]` each.
    pub lambda: Vec<DMatrix<f64>>,
    /// Residual variance diagonals per study (pooled fits replicate theirs).
    pub psi: Vec<DVector<f64>>,
    /// Shared covariance estimate.
    pub sigma_phi: Option<DMatrix<f64>>,
    /// Study-specific covariance estimates.
    pub sigma_lambda: Vec<DMatrix<f64>>,
    /// Marginal covariance estimates per study.
    pub sigma_marginal: Vec<DMatrix<f64>>,
    /// Number of shared factors.
    pub k_hat: usize,
    /// Study-specific factor counts.
    pub j_hat: Vec<usize>,
    pub provenance: Provenance,
}

impl FitResult {
    /// Check the structural invariants: covariance fields symmetric,
    /// marginal covariances PSD up to rounding, `k_hat` consistent with the
    /// shared loadings.
    pub fn validate(&self) -> Result<()> {
        if let Some(phi) = &self.phi {
            if phi.ncols() != self.k_hat {
                return Err(Error::Dimension(format!(
                    "k_hat {} does not match shared loading columns {}",
                    self.k_hat,
                    phi.ncols()
                )));
            }
        }
        for (s, lam) in self.lambda.iter().enumerate() {
            if self.j_hat.get(s).copied().unwrap_or(0) != lam.ncols() {
                return Err(Error::Dimension(format!(
                    "j_hat[{s}] does not match study loading columns {}",
                    lam.ncols()
                )));
            }
        }
        let check_sym = |m: &DMatrix<f64>, what: &str| -> Result<()> {
            let scale = m.amax().max(1.0);
            if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
                return Err(Error::Numeric(format!("{what} is not symmetric")));
            }
            Ok(())
        };
        if let Some(sp) = &self.sigma_phi {
            check_sym(sp, "shared covariance")?;
        }
        for sl in &self.sigma_lambda {
            check_sym(sl, "study covariance")?;
        }
        for (s, sm) in self.sigma_marginal.iter().enumerate() {
            check_sym(sm, "marginal covariance")?;
            let scale = sm.amax().max(1.0);
            let min_eig = min_eigenvalue(sm);
            if min_eig < -PSD_TOL * scale {
                return Err(Error::Numeric(format!(
                    "marginal covariance of study {s} has eigenvalue {min_eig}"
                )));
            }
        }
        Ok(())
    }
}

/// Output of [`op_align`].
#[derive(Debug, Clone)]
pub struct OpAligned {
    /// Each input draw rotated into the common frame.
    pub aligned: Vec<DMatrix<f64>>,
    /// Element-wise mean of the aligned draws.
    pub mean: DMatrix<f64>,
    /// True when the input was empty and the identity transform was used.
    pub degenerate: bool,
}

/// Iterative orthogonal Procrustes alignment of loading draws.
///
/// Each draw is rotated by the polar factor of `draw^T reference`, the
/// reference being the running mean of the aligned draws; the sweep repeats
/// until the reference moves less than [`OP_ALIGN_TOL`] in Frobenius norm or
/// [`OP_ALIGN_MAX_SWEEPS`] sweeps have run.
pub fn op_align(draws: &[DMatrix<f64>]) -> Result<OpAligned> {
    if draws.is_empty() {
        return Ok(OpAligned {
            aligned: Vec::new(),
            mean: DMatrix::zeros(0, 0),
            degenerate: true,
        });
    }
    let (p, k) = (draws[0].nrows(), draws[0].ncols());
    for (i, d) in draws.iter().enumerate() {
        if d.nrows() != p || d.ncols() != k {
            return Err(Error::Dimension(format!(
                "draw {i} is {} x {}, expected {p} x {k}",
                d.nrows(),
                d.ncols()
            )));
        }
    }
    if k == 0 {
        return Ok(OpAligned {
            aligned: draws.to_vec(),
            mean: draws[0].clone(),
            degenerate: false,
        });
    }
    if draws.iter().all(|d| d.norm() == 0.0) {
        // No rotation is defined for zero matrices; leave them untouched.
        return Ok(OpAligned {
            aligned: draws.to_vec(),
            mean: DMatrix::zeros(p, k),
            degenerate: true,
        });
    }
    // Start from the stack mean: at a fixed point the cross-product of an
    // aligned draw with the mean is symmetric PSD, whose polar factor is
    // the identity, so re-aligning an aligned stack is a no-op. The loop
    // polishes well past the guaranteed tolerance while sweeps remain; the
    // convergence is fast enough that this costs one or two extra sweeps.
    let mut reference = DMatrix::zeros(p, k);
    for d in draws {
        reference += d;
    }
    reference /= draws.len() as f64;
    // Sign-flipped or antipodal draws can cancel in the mean, leaving no
    // signal to align those columns against; fall back to the first draw.
    let svals = reference.clone().svd(false, false).singular_values;
    let smax = svals.iter().fold(0.0f64, |a, &b| a.max(b));
    let smin = svals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if smax <= 0.0 || smin < 1e-6 * smax {
        reference = draws[0].clone();
    }
    let mut aligned: Vec<DMatrix<f64>> = draws.to_vec();
    for _ in 0..OP_ALIGN_MAX_SWEEPS {
        for (out, draw) in aligned.iter_mut().zip(draws) {
            let r = procrustes_rotation(draw, &reference)?;
            *out = draw * r;
        }
        let mut mean = DMatrix::zeros(p, k);
        for a in &aligned {
            mean += a;
        }
        mean /= draws.len() as f64;
        let shift = (&mean - &reference).norm();
        reference = mean;
        if shift < 1e-13 * (1.0 + reference.norm()) {
            break;
        }
    }
    Ok(OpAligned {
        aligned,
        mean: reference,
        degenerate: false,
    })
}

/// Orthogonal matrix `R` minimizing `|| draw R - reference ||_F`: the polar
/// factor `U V^T` of `draw^T reference`.
fn procrustes_rotation(draw: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = draw.transpose() * reference;
    let svd = m.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numeric("SVD failed to produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD failed to produce V^T".into()))?;
    Ok(u * v_t)
}

/// Varimax criterion: summed column variances of squared loadings.
pub fn varimax_criterion(loadings: &DMatrix<f64>) -> f64 {
    let p = loadings.nrows() as f64;
    (0..loadings.ncols())
        .map(|k| {
            let col = loadings.column(k);
            let m2: f64 = col.iter().map(|v| v * v).sum::<f64>() / p;
            let m4: f64 = col.iter().map(|v| v.powi(4)).sum::<f64>() / p;
            m4 - m2 * m2
        })
        .sum()
}

/// Varimax rotation. Returns the rotated loadings and the orthogonal
/// rotation applied, so co-varying quantities can be carried along.
///
/// The criterion never decreases: if the iteration's final rotation were to
/// lower it (possible only through rounding), the identity is returned
/// instead. A single column has no rotational freedom; its sign is fixed so
/// the column sum is nonnegative.
pub fn varimax(loadings: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (p, k) = (loadings.nrows(), loadings.ncols());
    if k == 0 {
        return (loadings.clone(), DMatrix::identity(0, 0));
    }
    if k == 1 {
        let mut rot = DMatrix::identity(1, 1);
        if loadings.column(0).sum() < 0.0 {
            rot[(0, 0)] = -1.0;
        }
        return (loadings * &rot, rot);
    }
    // Kaiser's pairwise scheme: each column pair is rotated by the angle
    // that exactly maximizes its contribution to the criterion, sweeping
    // until all angles vanish. Unlike gradient/SVD iterations this escapes
    // the saddle at a perfectly mixed pair.
    let pf = p as f64;
    let mut rotated = loadings.clone();
    let mut rotation = DMatrix::<f64>::identity(k, k);
    for _ in 0..100 {
        let mut max_angle = 0.0f64;
        for j in 0..k {
            for l in (j + 1)..k {
                let (mut a, mut b, mut c, mut d) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..p {
                    let x = rotated[(i, j)];
                    let y = rotated[(i, l)];
                    let u = x * x - y * y;
                    let v = 2.0 * x * y;
                    a += u;
                    b += v;
                    c += u * u - v * v;
                    d += 2.0 * u * v;
                }
                let num = d - 2.0 * a * b / pf;
                let den = c - (a * a - b * b) / pf;
                let theta = 0.25 * num.atan2(den);
                if theta.abs() < 1e-12 {
                    continue;
                }
                max_angle = max_angle.max(theta.abs());
                let (sin, cos) = theta.sin_cos();
                for i in 0..p {
                    let x = rotated[(i, j)];
                    let y = rotated[(i, l)];
                    rotated[(i, j)] = cos * x + sin * y;
                    rotated[(i, l)] = cos * y - sin * x;
                }
                for i in 0..k {
                    let x = rotation[(i, j)];
                    let y = rotation[(i, l)];
                    rotation[(i, j)] = cos * x + sin * y;
                    rotation[(i, l)] = cos * y - sin * x;
                }
            }
        }
        if max_angle < 1e-10 {
            break;
        }
    }
    if varimax_criterion(&rotated) + 1e-15 < varimax_criterion(loadings) {
        return (loadings.clone(), DMatrix::identity(k, k));
    }
    (rotated, rotation)
}

/// Result of the eigenvalue rule for the number of factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorCount {
    pub k: usize,
    /// Set when no eigenvalue clears the threshold; the count is zero and
    /// callers should treat the covariance as structureless.
    pub degenerate: bool,
}

/// Number of factors: eigenvalues of a covariance whose share of the total
/// is strictly greater than `threshold`.
pub fn evd_num_factors(sigma: &DMatrix<f64>, threshold: f64) -> Result<FactorCount> {
    check_square_symmetric(sigma)?;
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "eigenvalue-share threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let (vals, _) = sym_eigen_desc(sigma);
    let total: f64 = vals.iter().sum();
    if total <= 0.0 {
        return Ok(FactorCount {
            k: 0,
            degenerate: true,
        });
    }
    let k = vals.iter().filter(|&&v| v / total > threshold).count();
    Ok(FactorCount {
        k,
        degenerate: k == 0,
    })
}

/// Rank-`k` spectral loadings `U_k diag(sqrt(eigenvalue))` of a PSD matrix.
///
/// Column signs are fixed so each column's largest-magnitude entry is
/// positive. Retained eigenvalues below `-1e-8` (relative) are a domain
/// error; small negative ones are clamped to zero.
pub fn spectral_loadings(sigma: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    check_square_symmetric(sigma)?;
    if k > sigma.nrows() {
        return Err(Error::Dimension(format!(
            "cannot extract {k} factors from a {} x {} covariance",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let (vals, vecs) = sym_eigen_desc(sigma);
    let scale = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1.0);
    let mut out = DMatrix::zeros(sigma.nrows(), k);
    for j in 0..k {
        let lam = vals[j];
        if lam < -PSD_TOL * scale {
            return Err(Error::Numeric(format!(
                "eigenvalue {lam} of a covariance is negative beyond tolerance"
            )));
        }
        let lam = lam.max(0.0);
        let sqrt_lam = lam.sqrt();
        let col = vecs.column(j);
        // Sign convention: the entry with the largest magnitude is positive.
        let mut max_idx = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[max_idx].abs() {
                max_idx = i;
            }
        }
        let sign = if col[max_idx] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..col.len() {
            out[(i, j)] = sign * col[i] * sqrt_lam;
        }
    }
    Ok(out)
}

/// Order loading columns by descending explained variance (column sum of
/// squares), returning the permuted matrix.
pub fn order_columns_by_variance(loadings: &DMatrix<f64>) -> DMatrix<f64> {
    let k = loadings.ncols();
    let mut idx: Vec<usize> = (0..k).collect();
    let ss: Vec<f64> = (0..k)
        .map(|j| loadings.column(j).iter().map(|v| v * v).sum())
        .collect();
    idx.sort_by(|&a, &b| ss[b].partial_cmp(&ss[a]).expect("finite column norms"));
    let mut out = DMatrix::zeros(loadings.nrows(), k);
    for (pos, &j) in idx.iter().enumerate() {
        out.set_column(pos, &loadings.column(j));
    }
    out
}

fn check_square_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {} x {}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.is_empty() {
        return Err(Error::Dimension("matrix is empty".into()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > SYMMETRY_TOL * scale {
        return Err(Error::Dimension("matrix is not symmetric".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{std_normal_matrix, symmetrize};
    use crate::rng::seeded_rng;
    use rand::Rng;

    /// Random orthogonal matrix via QR of a Gaussian matrix.
    fn random_orthogonal(rng: &mut rand_chacha::ChaCha8Rng, k: usize) -> DMatrix<f64> {
        let a = std_normal_matrix(rng, k, k);
        let qr = a.qr();
        qr.q()
    }

    #[test]
    fn op_align_recovers_rotation_scrambled_draws() {
        let mut rng = seeded_rng(41);
        let base = std_normal_matrix(&mut rng, 12, 3);
        let draws: Vec<DMatrix<f64>> = (0..20)
            .map(|_| &base * random_orthogonal(&mut rng, 3))
            .collect();
        let out = op_align(&draws).unwrap();
        assert!(!out.degenerate);
        // All aligned draws agree with each other and span the same frame.
        for a in &out.aligned {
            assert!(
                (a - &out.mean).norm() < 1e-6,
                "aligned draw deviates by {}",
                (a - &out.mean).norm()
            );
        }
        // The mean reproduces the base up to one global rotation.
        let r = procrustes_rotation(&out.mean, &base).unwrap();
        assert!(((&out.mean * r) - &base).norm() < 1e-6);
    }

    #[test]
    fn op_align_identical_draws_is_a_fixed_point() {
        let mut rng = seeded_rng(42);
        let base = std_normal_matrix(&mut rng, 8, 2);
        let draws = vec![base.clone(); 5];
        let out = op_align(&draws).unwrap();
        assert!((&out.mean - &base).norm() < 1e-12);
    }

    #[test]
    fn op_align_empty_input_is_flagged() {
        let out = op_align(&[]).unwrap();
        assert!(out.degenerate);
        assert!(out.aligned.is_empty());
    }

    #[test]
    fn op_align_resolves_sign_flipped_columns() {
        // A stack of sign-flipped copies would cancel to zero if averaged
        // naively; alignment must restore a full-strength mean.
        let mut rng = seeded_rng(46);
        let base = std_normal_matrix(&mut rng, 10, 3);
        let mut draws = Vec::new();
        for flip_a in [1.0, -1.0] {
            for flip_b in [1.0, -1.0] {
                let mut d = base.clone();
                for i in 0..10 {
                    d[(i, 0)] *= flip_a;
                    d[(i, 2)] *= flip_b;
                }
                draws.push(d);
            }
        }
        let out = op_align(&draws).unwrap();
        assert!(out.mean.norm() >= 0.99 * base.norm());
    }

    #[test]
    fn op_align_is_idempotent_on_aligned_stacks() {
        let mut rng = seeded_rng(47);
        let base = std_normal_matrix(&mut rng, 9, 3);
        let draws: Vec<DMatrix<f64>> = (0..8)
            .map(|_| &base + 0.01 * std_normal_matrix(&mut rng, 9, 3))
            .collect();
        let once = op_align(&draws).unwrap();
        let twice = op_align(&once.aligned).unwrap();
        for (a, b) in once.aligned.iter().zip(&twice.aligned) {
            assert!((a - b).amax() < 1e-10);
        }
    }

    #[test]
    fn op_align_rejects_mismatched_draws() {
        let a = DMatrix::zeros(3, 2);
        let b = DMatrix::zeros(4, 2);
        assert!(op_align(&[a, b]).is_err());
    }

    #[test]
    fn varimax_never_decreases_criterion() {
        let mut rng = seeded_rng(43);
        for _ in 0..50 {
            let x = std_normal_matrix(&mut rng, 10, 4);
            let before = varimax_criterion(&x);
            let (rotated, rotation) = varimax(&x);
            let after = varimax_criterion(&rotated);
            assert!(
                after + 1e-12 >= before,
                "criterion decreased: {before} -> {after}"
            );
            // Rotation is orthogonal.
            let gram = rotation.transpose() * &rotation;
            assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-10);
        }
    }

    #[test]
    fn varimax_sharpens_a_rotated_simple_structure() {
        // Perfect simple structure, then rotated 45 degrees: varimax must
        // essentially undo the rotation.
        let mut x = DMatrix::zeros(8, 2);
        for i in 0..4 {
            x[(i, 0)] = 1.0;
            x[(i + 4, 1)] = 1.0;
        }
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let rot45 = DMatrix::from_row_slice(2, 2, &[c, -c, c, c]);
        let mixed = &x * rot45;
        let (rotated, _) = varimax(&mixed);
        assert!(
            varimax_criterion(&rotated) > varimax_criterion(&mixed) + 0.05,
            "varimax should recover the sharp structure"
        );
    }

    #[test]
    fn varimax_single_column_fixes_sign() {
        let x = DMatrix::from_column_slice(3, 1, &[-1.0, -2.0, 0.5]);
        let (rotated, _) = varimax(&x);
        assert!(rotated.column(0).sum() >= 0.0);
        assert_eq!(rotated[(0, 0)], 1.0);
    }

    #[test]
    fn evd_counts_dominant_eigenvalues() {
        // diag(10, 10, 1e-3, ...): two shares above 5%.
        let mut d = DMatrix::zeros(6, 6);
        d[(0, 0)] = 10.0;
        d[(1, 1)] = 10.0;
        for i in 2..6 {
            d[(i, i)] = 1e-3;
        }
        let fc = evd_num_factors(&d, DEFAULT_EVD_THRESHOLD).unwrap();
        assert_eq!(fc.k, 2);
        assert!(!fc.degenerate);
    }

    #[test]
    fn evd_identity_is_degenerate() {
        // Shares are all 1/40 = 0.025, none strictly above 0.05.
        let eye = DMatrix::<f64>::identity(40, 40);
        let fc = evd_num_factors(&eye, DEFAULT_EVD_THRESHOLD).unwrap();
        assert_eq!(fc.k, 0);
        assert!(fc.degenerate);
    }

    #[test]
    fn evd_threshold_is_strict() {
        // Four equal eigenvalues: shares are exactly 0.25; threshold 0.25
        // must yield zero (strict inequality), 0.2 must yield four.
        let eye = DMatrix::<f64>::identity(4, 4);
        assert_eq!(evd_num_factors(&eye, 0.25).unwrap().k, 0);
        assert_eq!(evd_num_factors(&eye, 0.2).unwrap().k, 4);
    }

    #[test]
    fn evd_is_scale_invariant() {
        let mut rng = seeded_rng(48);
        for _ in 0..20 {
            let a = std_normal_matrix(&mut rng, 6, 6);
            let sigma = symmetrize(&(&a * a.transpose()));
            let k1 = evd_num_factors(&sigma, 0.05).unwrap().k;
            let k2 = evd_num_factors(&(&sigma * 37.5), 0.05).unwrap().k;
            assert_eq!(k1, k2);
        }
    }

    #[test]
    fn varimax_preserves_the_implied_covariance() {
        let mut rng = seeded_rng(49);
        for _ in 0..20 {
            let x = std_normal_matrix(&mut rng, 8, 3);
            let (rotated, _) = varimax(&x);
            let before = &x * x.transpose();
            let after = &rotated * rotated.transpose();
            assert!((before - after).amax() < 1e-10);
        }
    }

    #[test]
    fn spectral_reconstruction_error_is_non_increasing_in_k() {
        let mut rng = seeded_rng(50);
        let a = std_normal_matrix(&mut rng, 6, 6);
        let sigma = symmetrize(&(&a * a.transpose()));
        let mut last = f64::INFINITY;
        for k in 1..=6 {
            let l = spectral_loadings(&sigma, k).unwrap();
            let err = (&sigma - &l * l.transpose()).norm();
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn evd_rejects_asymmetric_input() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(evd_num_factors(&m, 0.05).is_err());
        assert!(evd_num_factors(&DMatrix::zeros(2, 3), 0.05).is_err());
    }

    #[test]
    fn spectral_loadings_match_eigen_truncation() {
        let mut rng = seeded_rng(44);
        for _ in 0..50 {
            let a = std_normal_matrix(&mut rng, 7, 3);
            let sigma = symmetrize(&(&a * a.transpose()));
            let k = rng.gen_range(1..=3);
            let l = spectral_loadings(&sigma, k).unwrap();
            // Eckart-Young: L L^T equals the best rank-k approximation,
            // which is the eigen-truncation.
            let (vals, vecs) = sym_eigen_desc(&sigma);
            let mut best = DMatrix::zeros(7, 7);
            for j in 0..k {
                let v = vecs.column(j);
                best += v * v.transpose() * vals[j];
            }
            assert!(
                ((&l * l.transpose()) - &best).amax() < 1e-10,
                "rank-{k} reconstruction mismatch"
            );
        }
    }

    #[test]
    fn spectral_loadings_fix_column_signs() {
        let mut rng = seeded_rng(45);
        let a = std_normal_matrix(&mut rng, 5, 2);
        let sigma = symmetrize(&(&a * a.transpose()));
        let l = spectral_loadings(&sigma, 2).unwrap();
        for j in 0..2 {
            let col = l.column(j);
            let mut max_idx = 0;
            for i in 1..col.len() {
                if col[i].abs() > col[max_idx].abs() {
                    max_idx = i;
                }
            }
            assert!(col[max_idx] > 0.0);
        }
    }

    #[test]
    fn spectral_loadings_reject_indefinite_matrices() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(2, 2)] = -1.0;
        assert!(spectral_loadings(&m, 3).is_err());
        // But requesting only the positive part is fine.
        assert!(spectral_loadings(&m, 2).is_ok());
    }

    #[test]
    fn column_ordering_is_by_explained_variance() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 1.0, 3.0]);
        let ordered = order_columns_by_variance(&x);
        assert_eq!(ordered[(0, 0)], 3.0);
        assert_eq!(ordered[(0, 1)], 1.0);
    }

    #[test]
    fn fit_result_validation_catches_inconsistencies() {
        let ok = FitResult {
            method: Method::StackFa,
            phi: Some(DMatrix::identity(3, 2)),
            lambda: vec![],
            psi: vec![DVector::from_element(3, 1.0)],
            sigma_phi: Some(DMatrix::identity(3, 3)),
            sigma_lambda: vec![],
            sigma_marginal: vec![DMatrix::identity(3, 3)],
            k_hat: 2,
            j_hat: vec![],
            provenance: Provenance::default(),
        };
        assert!(ok.validate().is_ok());

        let mut bad_k = ok.clone();
        bad_k.k_hat = 3;
        assert!(bad_k.validate().is_err());

        let mut asym = ok.clone();
        let mut m = DMatrix::identity(3, 3);
        m[(0, 1)] = 0.7;
        asym.sigma_marginal = vec![m];
        assert!(asym.validate().is_err());

        let mut indefinite = ok;
        let mut m = DMatrix::identity(3, 3);
        m[(2, 2)] = -0.5;
        indefinite.sigma_marginal = vec![m];
        assert!(indefinite.validate().is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_str(m.as_str()).unwrap(), m);
        }
        assert!(Method::from_str("pca").is_err());
    }
}
