//! Combinatorial multi-study factor analysis over a binary sharing
//! pattern: a study-by-factor matrix `T` says which of the `K*` columns
//! of one loading matrix `Phi*` each study loads on,
//!
//! ```text
//! Sigma_s = Phi* T_s Phi*' + Psi_s,
//! ```
//!
//! with `T_s = diag(row s of T)`. Columns active everywhere are common
//! factors; columns active in a strict subset are partially shared. The
//! pattern carries a two-parameter Indian buffet process prior and is
//! sampled by Metropolis-within-Gibbs in three phases: (1) joint moves
//! over `(T, Phi*, factors, Psi)` — single-entry flips, study-wise
//! singleton-column rebirth (Poisson births, empty-column deaths) — with
//! the study's latent factors integrated out of the Metropolis ratio;
//! (2) mode selection over the stored pattern draws by local Hamming
//! density; (3) an ordinary Gibbs refit conditional on the chosen
//! pattern.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::MultiStudyDataset;
use crate::error::{Error, Result};
use crate::fa::control::McmcControl;
use crate::fa::gibbs_core::{
    draw_factor_scores, draw_loading_matrix, draw_residual_variances, woodbury_mvn_loglik,
    LoadingUpdateGroup,
};
use crate::linalg::std_normal_matrix;
use crate::postprocess::{FitResult, Method, Provenance};
use crate::priors::ibp::{ibp_sample_sharing, IbpConfig};
use crate::priors::mgps::{MgpsHyper, MgpsState};
use crate::rng::stream_rng;

/// Binary study-by-factor activity pattern with its derived selectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingMatrix {
    t: DMatrix<u8>,
}

impl SharingMatrix {
    /// Validate and wrap a binary matrix: entries in {0, 1} and no empty
    /// columns (a factor nobody loads on does not exist).
    pub fn new(t: DMatrix<u8>) -> Result<Self> {
        if t.nrows() == 0 {
            return Err(Error::Dimension("sharing matrix needs at least one study".into()));
        }
        if t.iter().any(|&v| v > 1) {
            return Err(Error::Config("sharing matrix entries must be 0 or 1".into()));
        }
        for k in 0..t.ncols() {
            if t.column(k).iter().all(|&v| v == 0) {
                return Err(Error::Config(format!("sharing matrix column {k} is empty")));
            }
        }
        Ok(SharingMatrix { t })
    }

    /// Pattern where every study loads on every column.
    pub fn all_ones(n_studies: usize, k: usize) -> Self {
        SharingMatrix {
            t: DMatrix::from_element(n_studies, k, 1),
        }
    }

    pub fn matrix(&self) -> &DMatrix<u8> {
        &self.t
    }

    pub fn n_studies(&self) -> usize {
        self.t.nrows()
    }

    pub fn k_star(&self) -> usize {
        self.t.ncols()
    }

    pub fn is_active(&self, s: usize, k: usize) -> bool {
        self.t[(s, k)] == 1
    }

    pub fn column_ones(&self, k: usize) -> usize {
        self.t.column(k).iter().map(|&v| usize::from(v)).sum()
    }

    pub fn row_ones(&self, s: usize) -> usize {
        self.t.row(s).iter().map(|&v| usize::from(v)).sum()
    }

    pub fn active_columns(&self, s: usize) -> Vec<usize> {
        (0..self.k_star()).filter(|&k| self.is_active(s, k)).collect()
    }

    /// Columns active in every study (the common factors).
    pub fn all_ones_columns(&self) -> Vec<usize> {
        (0..self.k_star())
            .filter(|&k| self.column_ones(k) == self.n_studies())
            .collect()
    }

    /// Diagonal selector `T_s` as a dense K* x K* matrix.
    pub fn study_selector(&self, s: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_fn(self.k_star(), |k, _| {
            f64::from(self.t[(s, k)])
        }))
    }

    /// Common projector `P`: ones exactly on the all-ones columns.
    pub fn common_projector(&self) -> DMatrix<f64> {
        let n = self.n_studies();
        DMatrix::from_diagonal(&DVector::from_fn(self.k_star(), |k, _| {
            f64::from(u8::from(self.column_ones(k) == n))
        }))
    }

    /// Residual selector `R_s = T_s - P` (partially shared or specific
    /// columns active in study `s`).
    pub fn residual_selector(&self, s: usize) -> DMatrix<f64> {
        self.study_selector(s) - self.common_projector()
    }

    /// Columns reordered canonically: descending lexicographic by row
    /// pattern, so all-ones columns sort first and the ordering is
    /// invariant to input column permutations.
    pub fn canonicalized(&self) -> SharingMatrix {
        let mut cols: Vec<Vec<u8>> = (0..self.k_star())
            .map(|k| self.t.column(k).iter().copied().collect())
            .collect();
        cols.sort_by(|a, b| b.cmp(a));
        let s = self.n_studies();
        let mut t = DMatrix::zeros(s, cols.len());
        for (k, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                t[(i, k)] = v;
            }
        }
        SharingMatrix { t }
    }

    /// Elementwise Hamming distance; the narrower matrix is padded with
    /// zero columns. Panics if study counts differ.
    pub fn hamming_distance(&self, other: &SharingMatrix) -> usize {
        assert_eq!(self.n_studies(), other.n_studies(), "study counts differ");
        let k = self.k_star().max(other.k_star());
        let mut d = 0;
        for c in 0..k {
            for s in 0..self.n_studies() {
                let a = if c < self.k_star() { self.t[(s, c)] } else { 0 };
                let b = if c < other.k_star() { other.t[(s, c)] } else { 0 };
                d += usize::from(a != b);
            }
        }
        d
    }
}

/// Posterior output: phase-1 pattern draws, the selected mode, and the
/// phase-3 draws conditional on it.
#[derive(Debug, Clone)]
pub struct TetrisFit {
    pub t_draws: Vec<SharingMatrix>,
    pub t_hat: SharingMatrix,
    /// P x K* loading draws conditional on `t_hat`.
    pub phi_star_draws: Vec<DMatrix<f64>>,
    /// Per-draw, per-study residual diagonals.
    pub psi_draws: Vec<Vec<DVector<f64>>>,
    pub seed: u64,
}

/// Knobs beyond the spec-level arguments.
#[derive(Debug, Clone)]
pub struct TetrisOptions {
    /// Hamming radius for mode selection; default rounds 5% of the mean
    /// pattern size `S * K*` over the draws.
    pub mode_radius: Option<usize>,
    /// Hard cap on `K*` growth: `cap_multiplier * S * initial K*`.
    pub cap_multiplier: usize,
    /// Wall-clock budget for phase 1; on exhaustion a checkpoint is
    /// written (if a path is configured) and the fit errors resumable.
    pub time_budget: Option<Duration>,
    pub checkpoint_path: Option<PathBuf>,
    /// Write a checkpoint every this many phase-1 iterations (0 = only
    /// on budget exhaustion).
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
    /// Phase-1 starting pattern; default is an IBP prior draw.
    pub init_t: Option<SharingMatrix>,
    pub mgps: MgpsHyper,
    pub psi_shape: f64,
    pub psi_rate: f64,
}

impl Default for TetrisOptions {
    fn default() -> Self {
        TetrisOptions {
            mode_radius: None,
            cap_multiplier: 5,
            time_budget: None,
            checkpoint_path: None,
            checkpoint_every: 0,
            resume_from: None,
            init_t: None,
            mgps: MgpsHyper::default(),
            psi_shape: 1.0,
            psi_rate: 0.3,
        }
    }
}

/// Versioned phase-1 snapshot: enough to restart the pattern search.
/// Shrinkage auxiliaries are re-equilibrated on resume rather than
/// stored.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    seed: u64,
    /// Next phase-1 iteration to run.
    iteration: usize,
    t: Vec<Vec<u8>>,
    phi_star: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    /// ChaCha word position as a decimal string (u128).
    rng_word_pos: String,
    t_draws: Vec<Vec<Vec<u8>>>,
}

const CHECKPOINT_VERSION: u32 = 1;

pub fn fit_tetris(
    ds: &MultiStudyDataset,
    ibp: &IbpConfig,
    ctrl: &McmcControl,
    fixed_t: Option<&SharingMatrix>,
) -> Result<TetrisFit> {
    fit_tetris_opts(ds, ibp, ctrl, fixed_t, &TetrisOptions::default())
}

pub fn fit_tetris_opts(
    ds: &MultiStudyDataset,
    ibp: &IbpConfig,
    ctrl: &McmcControl,
    fixed_t: Option<&SharingMatrix>,
    opts: &TetrisOptions,
) -> Result<TetrisFit> {
    ctrl.validate()?;
    ibp.validate()?;
    let s_count = ds.n_studies();
    let started = Instant::now();
    let mut rng = stream_rng(ctrl.seed, 0);

    // Center each study's columns; the model has no intercept.
    let studies: Vec<DMatrix<f64>> = ds
        .studies
        .iter()
        .map(|y| {
            let mut y = y.clone();
            let n = y.nrows() as f64;
            for c in 0..y.ncols() {
                let mean = y.column(c).sum() / n;
                y.column_mut(c).add_scalar_mut(-mean);
            }
            y
        })
        .collect();

    let mut t_draws: Vec<SharingMatrix> = Vec::new();

    let t_hat = if let Some(fixed) = fixed_t {
        if fixed.n_studies() != s_count {
            return Err(Error::Dimension(format!(
                "fixed pattern has {} studies, dataset has {s_count}",
                fixed.n_studies()
            )));
        }
        fixed.clone()
    } else {
        // ----- Phase 1: pattern search -----
        let mut sampler;
        let mut start_iter = 0usize;
        if let Some(path) = &opts.resume_from {
            let cp = read_checkpoint(path)?;
            if cp.seed != ctrl.seed {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was written under seed {}, control says {}",
                    cp.seed, ctrl.seed
                )));
            }
            let t = sharing_from_rows(&cp.t)?;
            if t.n_studies() != s_count {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} studies, dataset has {s_count}",
                    t.n_studies()
                )));
            }
            let phi = matrix_from_rows(&cp.phi_star)?;
            if phi.nrows() != ds.p() || phi.ncols() != t.k_star() {
                return Err(Error::Checkpoint(
                    "checkpoint loadings do not match the dataset/pattern dimensions".into(),
                ));
            }
            let psi: Vec<DVector<f64>> =
                cp.psi.iter().map(|v| DVector::from_vec(v.clone())).collect();
            if psi.len() != s_count || psi.iter().any(|v| v.len() != ds.p()) {
                return Err(Error::Checkpoint(
                    "checkpoint residual variances do not match the dataset".into(),
                ));
            }
            let word_pos: u128 = cp
                .rng_word_pos
                .parse()
                .map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
            rng.set_word_pos(word_pos);
            // Shrinkage auxiliaries are not part of the snapshot; one
            // refresh against the stored loadings re-equilibrates them.
            // A checkpoint taken before the first iteration needs no
            // refresh — the fresh state is exactly what the
            // uninterrupted run had. The refresh uses its own stream so
            // the main chain's randomness stays aligned with an
            // uninterrupted run.
            let mut mgps = MgpsState::new(ds.p(), t.k_star(), opts.mgps)?;
            if cp.iteration > 0 {
                let mut aux_rng = stream_rng(ctrl.seed, 1);
                mgps.gibbs_update(&phi, &mut aux_rng)?;
            }
            let cap = opts.cap_multiplier.max(1) * s_count * t.k_star().max(1);
            sampler = Sampler {
                studies: &studies,
                t,
                phi,
                psi,
                mgps,
                ibp: *ibp,
                cap,
                psi_shape: opts.psi_shape,
                psi_rate: opts.psi_rate,
                loglik: vec![0.0; s_count],
            };
            sampler.refresh_logliks()?;
            start_iter = cp.iteration;
            t_draws = cp
                .t_draws
                .iter()
                .map(|rows| sharing_from_rows(rows))
                .collect::<Result<_>>()?;
        } else {
            let init_t = match &opts.init_t {
                Some(t) => {
                    if t.n_studies() != s_count {
                        return Err(Error::Dimension(format!(
                            "initial pattern has {} studies, dataset has {s_count}",
                            t.n_studies()
                        )));
                    }
                    t.clone()
                }
                None => {
                    let drawn = ibp_sample_sharing(s_count, ibp, &mut rng)?;
                    if drawn.ncols() == 0 {
                        SharingMatrix::all_ones(s_count, 1)
                    } else {
                        SharingMatrix::new(drawn)?
                    }
                }
            };
            let k_bar = init_t.k_star().max(1);
            let cap = opts.cap_multiplier.max(1) * s_count * k_bar;
            let phi = 0.3 * std_normal_matrix(&mut rng, ds.p(), init_t.k_star());
            let psi: Vec<DVector<f64>> = studies
                .iter()
                .map(|y| {
                    DVector::from_fn(ds.p(), |p, _| {
                        (y.column(p).norm_squared() / y.nrows() as f64).max(1e-3)
                    })
                })
                .collect();
            sampler = Sampler {
                studies: &studies,
                t: init_t,
                phi,
                psi,
                mgps: MgpsState::new(ds.p(), k_bar, opts.mgps)?,
                ibp: *ibp,
                cap,
                psi_shape: opts.psi_shape,
                psi_rate: opts.psi_rate,
                loglik: vec![0.0; s_count],
            };
            sampler.refresh_logliks()?;
        }

        for iter in start_iter..ctrl.nrun {
            if let Some(budget) = opts.time_budget {
                if started.elapsed() > budget {
                    if let Some(path) = &opts.checkpoint_path {
                        write_checkpoint(path, &sampler, &rng, ctrl.seed, iter, &t_draws)?;
                        return Err(Error::Checkpoint(format!(
                            "wall-clock budget exhausted at phase-1 iteration {iter}; \
                             checkpoint written to {}",
                            path.display()
                        )));
                    }
                    return Err(Error::Checkpoint(format!(
                        "wall-clock budget exhausted at phase-1 iteration {iter}; \
                         no checkpoint path configured"
                    )));
                }
            }
            sampler.one_iteration(&mut rng)?;
            if ctrl.keeps(iter) {
                t_draws.push(SharingMatrix {
                    t: sampler.t.t.clone(),
                });
            }
            if opts.checkpoint_every > 0 && (iter + 1) % opts.checkpoint_every == 0 {
                if let Some(path) = &opts.checkpoint_path {
                    write_checkpoint(path, &sampler, &rng, ctrl.seed, iter + 1, &t_draws)?;
                }
            }
        }
        if t_draws.is_empty() {
            return Err(Error::Config(
                "phase 1 kept no pattern draws; lower the burn-in".into(),
            ));
        }

        // ----- Phase 2: mode selection -----
        let radius = opts.mode_radius.unwrap_or_else(|| {
            let mean_cells = t_draws
                .iter()
                .map(|t| t.n_studies() * t.k_star())
                .sum::<usize>() as f64
                / t_draws.len() as f64;
            (0.05 * mean_cells).round() as usize
        });
        choose_sharing_mode(&t_draws, radius)?
    };

    // ----- Phase 3: Gibbs refit with the pattern fixed -----
    let k_star = t_hat.k_star();
    let mut phi = 0.3 * std_normal_matrix(&mut rng, ds.p(), k_star);
    let mut psi: Vec<DVector<f64>> = studies
        .iter()
        .map(|y| {
            DVector::from_fn(ds.p(), |p, _| {
                (y.column(p).norm_squared() / y.nrows() as f64).max(1e-3)
            })
        })
        .collect();
    let mut mgps = MgpsState::new(ds.p(), k_star.max(1), opts.mgps)?;
    let mut phi_star_draws = Vec::with_capacity(ctrl.n_draws());
    let mut psi_draws = Vec::with_capacity(ctrl.n_draws());
    for iter in 0..ctrl.nrun {
        if k_star > 0 {
            let factors = gibbs_factors(&studies, &t_hat, &phi, &psi, &mut rng)?;
            phi = gibbs_loadings(&studies, &t_hat, &factors, &psi, &mgps, &mut rng)?;
            gibbs_psi(
                &studies,
                &t_hat,
                &factors,
                &phi,
                &mut psi,
                opts.psi_shape,
                opts.psi_rate,
                &mut rng,
            )?;
            mgps.gibbs_update(&phi, &mut rng)?;
        } else {
            for (s, y) in studies.iter().enumerate() {
                let sse = DVector::from_fn(ds.p(), |p, _| y.column(p).norm_squared());
                psi[s] =
                    draw_residual_variances(&mut rng, opts.psi_shape, opts.psi_rate, y.nrows(), &sse)?;
            }
        }
        if ctrl.keeps(iter) {
            phi_star_draws.push(phi.clone());
            psi_draws.push(psi.clone());
        }
    }

    Ok(TetrisFit {
        t_draws,
        t_hat,
        phi_star_draws,
        psi_draws,
        seed: ctrl.seed,
    })
}

/// The draw with the most neighbors within Hamming `radius` (patterns
/// compared after canonical column ordering); ties break to the earliest
/// draw.
pub fn choose_sharing_mode(t_draws: &[SharingMatrix], radius: usize) -> Result<SharingMatrix> {
    if t_draws.is_empty() {
        return Err(Error::Dimension("no pattern draws to choose from".into()));
    }
    let canon: Vec<SharingMatrix> = t_draws.iter().map(SharingMatrix::canonicalized).collect();
    let mut best = (0usize, 0usize);
    for i in 0..canon.len() {
        let count = canon
            .iter()
            .filter(|c| canon[i].hamming_distance(c) <= radius)
            .count();
        if count > best.1 {
            best = (i, count);
        }
    }
    Ok(t_draws[best.0].clone())
}

/// Point extraction from the phase-3 draws via a representative draw:
/// the one whose implied covariances sit closest (Frobenius) to the mean
/// marginal covariances.
pub fn tetris_decompose(fit: &TetrisFit) -> Result<FitResult> {
    let n_draws = fit.phi_star_draws.len();
    if n_draws == 0 {
        return Err(Error::Dimension("fit holds no phase-3 draws".into()));
    }
    let t = &fit.t_hat;
    let s_count = t.n_studies();
    let p = fit.phi_star_draws[0].nrows();

    let implied = |phi: &DMatrix<f64>, psi: &[DVector<f64>], s: usize| -> DMatrix<f64> {
        let mut m = phi * t.study_selector(s) * phi.transpose();
        m += DMatrix::from_diagonal(&psi[s]);
        m
    };
    let mut mean_marginal = vec![DMatrix::zeros(p, p); s_count];
    for (phi, psi) in fit.phi_star_draws.iter().zip(fit.psi_draws.iter()) {
        for s in 0..s_count {
            mean_marginal[s] += implied(phi, psi, s);
        }
    }
    for m in &mut mean_marginal {
        *m /= n_draws as f64;
    }
    let repr = (0..n_draws)
        .min_by(|&a, &b| {
            let loss = |i: usize| -> f64 {
                (0..s_count)
                    .map(|s| {
                        (implied(&fit.phi_star_draws[i], &fit.psi_draws[i], s)
                            - &mean_marginal[s])
                            .norm_squared()
                    })
                    .sum()
            };
            loss(a).total_cmp(&loss(b))
        })
        .expect("nonempty");

    let phi_star = &fit.phi_star_draws[repr];
    let psi = &fit.psi_draws[repr];
    let common_cols = t.all_ones_columns();
    let k_hat = common_cols.len();
    let phi_hat = if k_hat > 0 {
        Some(DMatrix::from_fn(p, k_hat, |i, j| phi_star[(i, common_cols[j])]))
    } else {
        None
    };
    let proj = t.common_projector();
    let sigma_phi = phi_star * &proj * phi_star.transpose();

    let mut lambda = Vec::with_capacity(s_count);
    let mut sigma_lambda = Vec::with_capacity(s_count);
    let mut sigma_marginal = Vec::with_capacity(s_count);
    let mut j_hat = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let specific: Vec<usize> = t
            .active_columns(s)
            .into_iter()
            .filter(|k| !common_cols.contains(k))
            .collect();
        j_hat.push(specific.len());
        lambda.push(DMatrix::from_fn(p, specific.len(), |i, j| {
            phi_star[(i, specific[j])]
        }));
        let r = t.residual_selector(s);
        sigma_lambda.push(phi_star * r * phi_star.transpose());
        sigma_marginal.push(implied(phi_star, psi, s));
    }

    let result = FitResult {
        method: Method::Tetris,
        phi: phi_hat,
        lambda,
        psi: psi.clone(),
        sigma_phi: Some(sigma_phi),
        sigma_lambda,
        sigma_marginal,
        k_hat,
        j_hat,
        provenance: Provenance {
            draws_used: n_draws,
            seed: fit.seed,
            alignment: "representative draw (min Frobenius to mean marginal)".into(),
        },
    };
    result.validate()?;
    Ok(result)
}

// ---------------------------------------------------------------------
// Phase-1 sampler internals
// ---------------------------------------------------------------------

struct Sampler<'a> {
    studies: &'a [DMatrix<f64>],
    t: SharingMatrix,
    phi: DMatrix<f64>,
    psi: Vec<DVector<f64>>,
    mgps: MgpsState,
    ibp: IbpConfig,
    cap: usize,
    psi_shape: f64,
    psi_rate: f64,
    /// Collapsed log-likelihood per study at the current state.
    loglik: Vec<f64>,
}

/// Log prior odds of `t[s,k] = 1` vs `0` given the rest of column `k`
/// under the two-parameter IBP: `m / (beta + S - 1 - m)` with `m` the
/// other studies' ones in the column.
fn flip_prior_log_ratio(m_minus: usize, n_studies: usize, beta: f64) -> f64 {
    let m = m_minus as f64;
    (m / (beta + n_studies as f64 - 1.0 - m)).ln()
}

impl Sampler<'_> {
    /// Loadings restricted to the columns study `s` is active in.
    fn active_loadings(&self, s: usize) -> DMatrix<f64> {
        let active = self.t.active_columns(s);
        DMatrix::from_fn(self.phi.nrows(), active.len(), |i, j| self.phi[(i, active[j])])
    }

    fn study_loglik(&self, s: usize) -> Result<f64> {
        woodbury_mvn_loglik(&self.studies[s], &self.active_loadings(s), &self.psi[s])
    }

    fn refresh_logliks(&mut self) -> Result<()> {
        for s in 0..self.studies.len() {
            self.loglik[s] = self.study_loglik(s)?;
        }
        Ok(())
    }

    /// Single-entry Metropolis flips. Entries whose flip would empty a
    /// column are skipped; the dimension move owns those deaths.
    fn flip_sweep(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let s_count = self.studies.len();
        for s in 0..s_count {
            for k in 0..self.t.k_star() {
                let current = self.t.t[(s, k)];
                let m_minus = self.t.column_ones(k) - usize::from(current);
                if current == 1 && m_minus == 0 {
                    continue;
                }
                let prior = if current == 0 {
                    flip_prior_log_ratio(m_minus, s_count, self.ibp.beta)
                } else {
                    -flip_prior_log_ratio(m_minus, s_count, self.ibp.beta)
                };
                self.t.t[(s, k)] = 1 - current;
                let proposed = self.study_loglik(s)?;
                let log_alpha = proposed - self.loglik[s] + prior;
                if log_alpha >= 0.0 || rng.gen::<f64>() < log_alpha.exp() {
                    self.loglik[s] = proposed;
                } else {
                    self.t.t[(s, k)] = current;
                }
            }
        }
        Ok(())
    }

    /// Study-wise singleton rebirth: replace study `s`'s singleton
    /// columns with `Poisson(alpha * beta / (beta + S - 1))` fresh ones
    /// whose loadings come from the shrinkage prior. Proposal and prior
    /// cancel, leaving a collapsed-likelihood ratio for study `s` alone.
    fn dimension_move(&mut self, s: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let s_count = self.studies.len();
        let singletons: Vec<usize> = self
            .t
            .active_columns(s)
            .into_iter()
            .filter(|&k| self.t.column_ones(k) == 1)
            .collect();
        let rate = self.ibp.new_column_rate(s_count, s_count);
        let k_new = Poisson::new(rate)
            .map_err(|e| Error::Numeric(format!("birth rate {rate}: {e}")))?
            .sample(rng) as usize;
        if k_new == 0 && singletons.is_empty() {
            return Ok(());
        }
        let k_keep = self.t.k_star() - singletons.len();
        if k_keep + k_new == 0 {
            // Emptying the whole pattern would strand the shrinkage
            // state; skip this rare proposal.
            return Ok(());
        }

        // Build the proposal: drop the singletons, append fresh columns.
        let mut prop_mgps = self.mgps.clone();
        let mut prop_phi = self.phi.clone();
        let mut prop_t = self.t.t.clone();
        for &k in singletons.iter().rev() {
            prop_mgps.drop_column(k);
            prop_phi = prop_phi.remove_column(k);
            prop_t = prop_t.remove_column(k);
        }
        for _ in 0..k_new {
            prop_mgps.push_column(rng)?;
            let prec = prop_mgps.precision_matrix();
            let kc = prec.ncols() - 1;
            let fresh = DVector::from_fn(self.phi.nrows(), |i, _| {
                use rand_distr::StandardNormal;
                let z: f64 = rng.sample(StandardNormal);
                z / prec[(i, kc)].sqrt()
            });
            let phi_cols = prop_phi.ncols();
            prop_phi = prop_phi.insert_column(phi_cols, 0.0);
            prop_phi.column_mut(kc).copy_from(&fresh);
            let t_cols = prop_t.ncols();
            prop_t = prop_t.insert_column(t_cols, 0);
            prop_t[(s, t_cols)] = 1;
        }

        let prop_sharing = SharingMatrix { t: prop_t };
        let active = prop_sharing.active_columns(s);
        let prop_loadings =
            DMatrix::from_fn(prop_phi.nrows(), active.len(), |i, j| prop_phi[(i, active[j])]);
        let proposed = woodbury_mvn_loglik(&self.studies[s], &prop_loadings, &self.psi[s])?;
        let log_alpha = proposed - self.loglik[s];
        if log_alpha >= 0.0 || rng.gen::<f64>() < log_alpha.exp() {
            self.t = prop_sharing;
            self.phi = prop_phi;
            self.mgps = prop_mgps;
            self.loglik[s] = proposed;
        }
        Ok(())
    }

    fn one_iteration(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        self.flip_sweep(rng)?;
        for s in 0..self.studies.len() {
            self.dimension_move(s, rng)?;
        }
        if self.t.k_star() > self.cap {
            return Err(Error::Guard(format!(
                "pattern grew to {} columns, past the cap of {}; the factor count is \
                 running away — use a smaller IBP alpha",
                self.t.k_star(),
                self.cap
            )));
        }
        let factors = gibbs_factors(self.studies, &self.t, &self.phi, &self.psi, rng)?;
        self.phi = gibbs_loadings(self.studies, &self.t, &factors, &self.psi, &self.mgps, rng)?;
        gibbs_psi(
            self.studies,
            &self.t,
            &factors,
            &self.phi,
            &mut self.psi,
            self.psi_shape,
            self.psi_rate,
            rng,
        )?;
        self.mgps.gibbs_update(&self.phi, rng)?;
        self.refresh_logliks()?;
        Ok(())
    }
}

/// Zero the factor columns a study is not active in (its design is
/// `F T_s`).
fn masked_factors(factors: &DMatrix<f64>, t: &SharingMatrix, s: usize) -> DMatrix<f64> {
    let mut g = factors.clone();
    for k in 0..t.k_star() {
        if !t.is_active(s, k) {
            g.column_mut(k).fill(0.0);
        }
    }
    g
}

fn gibbs_factors(
    studies: &[DMatrix<f64>],
    t: &SharingMatrix,
    phi: &DMatrix<f64>,
    psi: &[DVector<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DMatrix<f64>>> {
    studies
        .iter()
        .enumerate()
        .map(|(s, y)| {
            // Inactive columns decouple and fall back to prior draws.
            let mut loadings = phi.clone();
            for k in 0..t.k_star() {
                if !t.is_active(s, k) {
                    loadings.column_mut(k).fill(0.0);
                }
            }
            draw_factor_scores(rng, y, &loadings, &psi[s])
        })
        .collect()
}

fn gibbs_loadings(
    studies: &[DMatrix<f64>],
    t: &SharingMatrix,
    factors: &[DMatrix<f64>],
    psi: &[DVector<f64>],
    mgps: &MgpsState,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let groups: Vec<LoadingUpdateGroup> = studies
        .iter()
        .enumerate()
        .map(|(s, y)| {
            let g = masked_factors(&factors[s], t, s);
            LoadingUpdateGroup {
                gram: g.transpose() * &g,
                proj: g.transpose() * y,
                psi: &psi[s],
            }
        })
        .collect();
    draw_loading_matrix(rng, &groups, &mgps.precision_matrix())
}

#[allow(clippy::too_many_arguments)]
fn gibbs_psi(
    studies: &[DMatrix<f64>],
    t: &SharingMatrix,
    factors: &[DMatrix<f64>],
    phi: &DMatrix<f64>,
    psi: &mut [DVector<f64>],
    shape: f64,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (s, y) in studies.iter().enumerate() {
        let g = masked_factors(&factors[s], t, s);
        let residual = y - g * phi.transpose();
        let sse = DVector::from_fn(y.ncols(), |p, _| residual.column(p).norm_squared());
        psi[s] = draw_residual_variances(rng, shape, rate, y.nrows(), &sse)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------

fn sharing_from_rows(rows: &[Vec<u8>]) -> Result<SharingMatrix> {
    if rows.is_empty() {
        return Err(Error::Checkpoint("checkpoint pattern has no rows".into()));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Checkpoint("checkpoint pattern rows differ in length".into()));
    }
    let mut t = DMatrix::zeros(rows.len(), k);
    for (s, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[(s, c)] = v;
        }
    }
    SharingMatrix::new(t).map_err(|e| Error::Checkpoint(format!("invalid stored pattern: {e}")))
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::Checkpoint("checkpoint matrix has no rows".into()));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Checkpoint("checkpoint matrix rows differ in length".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]))
}

fn matrix_rows_u8(m: &DMatrix<u8>) -> Vec<Vec<u8>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn matrix_rows_f64(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn write_checkpoint(
    path: &Path,
    sampler: &Sampler<'_>,
    rng: &ChaCha8Rng,
    seed: u64,
    iteration: usize,
    t_draws: &[SharingMatrix],
) -> Result<()> {
    let cp = Checkpoint {
        version: CHECKPOINT_VERSION,
        seed,
        iteration,
        t: matrix_rows_u8(&sampler.t.t),
        phi_star: matrix_rows_f64(&sampler.phi),
        psi: sampler.psi.iter().map(|v| v.iter().copied().collect()).collect(),
        rng_word_pos: rng.get_word_pos().to_string(),
        t_draws: t_draws.iter().map(|t| matrix_rows_u8(&t.t)).collect(),
    };
    let json = serde_json::to_string(&cp)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json)
        .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let cp: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            cp.version
        )));
    }
    Ok(cp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use statrs::function::gamma::ln_gamma;

    fn strong_loadings(rng: &mut ChaCha8Rng, p: usize, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(p, k, |_, _| {
            let mag: f64 = 0.8 + 0.4 * rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
    }

    /// Data from the sharing-pattern generative model.
    fn pattern_data(
        rng: &mut ChaCha8Rng,
        n: usize,
        phi: &DMatrix<f64>,
        t: &SharingMatrix,
        s: usize,
        noise_sd: f64,
    ) -> DMatrix<f64> {
        let active = t.active_columns(s);
        let loadings =
            DMatrix::from_fn(phi.nrows(), active.len(), |i, j| phi[(i, active[j])]);
        let f = std_normal_matrix(rng, n, active.len());
        let mut y = f * loadings.transpose();
        y += noise_sd * std_normal_matrix(rng, n, phi.nrows());
        y
    }

    #[test]
    fn sharing_matrix_invariants_hold() {
        let t = SharingMatrix::new(DMatrix::from_row_slice(
            3,
            4,
            &[1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0],
        ))
        .unwrap();
        assert_eq!(t.k_star(), 4);
        assert_eq!(t.all_ones_columns(), vec![0]);
        let proj = t.common_projector();
        for s in 0..3 {
            let lhs = &proj + t.residual_selector(s);
            assert_eq!(lhs, t.study_selector(s));
        }
        for k in 0..4 {
            assert!(t.column_ones(k) >= 1);
        }
        // The projector diagonal flags exactly the all-ones columns.
        for k in 0..4 {
            let expected = if k == 0 { 1.0 } else { 0.0 };
            assert_eq!(proj[(k, k)], expected);
        }

        // Empty column and non-binary entries are rejected.
        assert!(SharingMatrix::new(DMatrix::from_row_slice(2, 2, &[1, 0, 1, 0])).is_err());
        assert!(SharingMatrix::new(DMatrix::from_row_slice(1, 1, &[2])).is_err());
    }

    #[test]
    fn canonical_ordering_is_permutation_invariant() {
        let mut rng = seeded_rng(5000);
        let base = SharingMatrix::new(DMatrix::from_row_slice(
            3,
            5,
            &[1, 1, 0, 1, 0, 1, 0, 1, 1, 0, 1, 1, 1, 0, 1],
        ))
        .unwrap();
        let canon = base.canonicalized();
        for _ in 0..20 {
            // Random column permutation.
            let mut perm: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let shuffled = DMatrix::from_fn(3, 5, |s, k| base.matrix()[(s, perm[k])]);
            let shuffled = SharingMatrix::new(shuffled).unwrap();
            assert_eq!(shuffled.canonicalized(), canon);
        }
    }

    #[test]
    fn flip_prior_ratio_matches_the_joint_pmf() {
        // Column factor of the two-parameter IBP joint pmf:
        // g(m) = Gamma(m) Gamma(S - m + beta). The conditional odds of
        // one more membership must equal g(m+1)/g(m).
        for s_count in [2usize, 3, 5] {
            for beta in [0.5, 1.0, 2.0] {
                for m in 1..s_count {
                    let g = |m: f64| ln_gamma(m) + ln_gamma(s_count as f64 - m + beta);
                    let pmf_ratio = g(m as f64 + 1.0) - g(m as f64);
                    let ours = flip_prior_log_ratio(m, s_count, beta);
                    assert!(
                        (pmf_ratio - ours).abs() < 1e-12,
                        "S={s_count} beta={beta} m={m}: pmf {pmf_ratio} vs {ours}"
                    );
                }
            }
        }
    }

    #[test]
    fn flip_kernel_matches_enumerated_posterior() {
        // S=2 studies, one fixed column, frozen continuous parameters:
        // the pattern states are {10, 01, 11} (00 would empty the
        // column). Empirical visit frequencies from the flip kernel must
        // match the analytic conditional posterior within 3 SE.
        let mut rng = seeded_rng(5010);
        let p = 2;
        let phi = DMatrix::from_column_slice(p, 1, &[1.2, -0.8]);
        let psi = vec![
            DVector::from_element(p, 0.5),
            DVector::from_element(p, 0.5),
        ];
        let y1 = pattern_data(
            &mut rng,
            40,
            &phi,
            &SharingMatrix::all_ones(1, 1),
            0,
            0.7,
        );
        let y2 = 0.7 * std_normal_matrix(&mut rng, 40, p);
        let studies = vec![y1, y2];
        let ibp = IbpConfig {
            alpha: 1.0,
            beta: 1.5,
        };

        // Analytic posterior over the three states.
        let noise_ll = |s: usize| {
            woodbury_mvn_loglik(&studies[s], &DMatrix::zeros(p, 0), &psi[s]).unwrap()
        };
        let sig_ll =
            |s: usize| woodbury_mvn_loglik(&studies[s], &phi, &psi[s]).unwrap();
        let g = |m: f64| ln_gamma(m) + ln_gamma(2.0 - m + ibp.beta);
        let log_w = [
            g(1.0) + sig_ll(0) + noise_ll(1), // state 10
            g(1.0) + noise_ll(0) + sig_ll(1), // state 01
            g(2.0) + sig_ll(0) + sig_ll(1),   // state 11
        ];
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let target: Vec<f64> = w.iter().map(|v| v / z).collect();

        let mut sampler = Sampler {
            studies: &studies,
            t: SharingMatrix::all_ones(2, 1),
            phi: phi.clone(),
            psi: psi.clone(),
            mgps: MgpsState::new(p, 1, MgpsHyper::default()).unwrap(),
            ibp,
            cap: 100,
            psi_shape: 1.0,
            psi_rate: 0.3,
            loglik: vec![0.0; 2],
        };
        sampler.refresh_logliks().unwrap();

        let sweeps = 100_000;
        let thin = 20;
        let mut counts = [0usize; 3];
        let mut kept = 0usize;
        for i in 0..sweeps {
            sampler.flip_sweep(&mut rng).unwrap();
            if i % thin == 0 {
                let state = (sampler.t.t[(0, 0)], sampler.t.t[(1, 0)]);
                let idx = match state {
                    (1, 0) => 0,
                    (0, 1) => 1,
                    (1, 1) => 2,
                    _ => panic!("empty column state reached"),
                };
                counts[idx] += 1;
                kept += 1;
            }
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / kept as f64;
            let se = (target[i] * (1.0 - target[i]) / kept as f64).sqrt();
            assert!(
                (freq - target[i]).abs() < 3.0 * se.max(1e-4),
                "state {i}: freq {freq:.4} vs target {:.4} (se {se:.5})",
                target[i]
            );
        }
    }

    #[test]
    fn mode_selection_trivial_and_majority() {
        let a = SharingMatrix::new(DMatrix::from_row_slice(2, 2, &[1, 1, 1, 0])).unwrap();
        let b = SharingMatrix::new(DMatrix::from_row_slice(2, 2, &[1, 0, 1, 1])).unwrap();

        let all_same = vec![a.clone(), a.clone(), a.clone()];
        assert_eq!(choose_sharing_mode(&all_same, 0).unwrap(), a);

        let mut majority = vec![a.clone(); 9];
        majority.push(b.clone());
        assert_eq!(choose_sharing_mode(&majority, 0).unwrap(), a);

        assert!(choose_sharing_mode(&[], 0).is_err());
    }

    #[test]
    fn mode_selection_recovers_planted_pattern() {
        // A chain that has found the mode keeps revisiting it: draws are
        // a mix of exact copies of a planted S=5, K*=8 pattern and
        // copies with 5% of entries flipped. Radius 0.1 * S * K* = 4
        // recovers the planted matrix.
        let mut rng = seeded_rng(5020);
        // Distinct, lexically spread columns (5-bit patterns, row 0 most
        // significant) so single flips rarely reorder the canonical form.
        let col_bits = [31u8, 28, 25, 22, 19, 13, 10, 7];
        let planted = SharingMatrix::new(DMatrix::from_fn(5, 8, |s, k| {
            (col_bits[k] >> (4 - s)) & 1
        }))
        .unwrap();
        let mut draws = vec![planted.clone(); 40];
        while draws.len() < 200 {
            // Flip 2-4 of the 40 cells (about 5% of entries).
            let n_flips = rng.gen_range(2..=4usize);
            let mut noisy = planted.matrix().clone();
            let mut flipped = 0;
            while flipped < n_flips {
                let s = rng.gen_range(0..5);
                let k = rng.gen_range(0..8);
                if noisy[(s, k)] == planted.matrix()[(s, k)] {
                    noisy[(s, k)] = 1 - noisy[(s, k)];
                    flipped += 1;
                }
            }
            if let Ok(m) = SharingMatrix::new(noisy) {
                draws.push(m);
            }
        }
        let radius = (0.1 * 5.0 * 8.0) as usize;
        let mode = choose_sharing_mode(&draws, radius).unwrap();
        assert_eq!(mode.canonicalized(), planted.canonicalized());
    }

    #[test]
    fn decompose_worked_example_and_trivial_patterns() {
        let mut rng = seeded_rng(5030);
        let p = 5;
        // Worked pattern: one common column, two extras each for the
        // first two studies, nothing extra for the third.
        let t = SharingMatrix::new(DMatrix::from_row_slice(
            3,
            4,
            &[1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 0, 0],
        ))
        .unwrap();
        let phi = strong_loadings(&mut rng, p, 4);
        let psi = vec![DVector::from_element(p, 0.3); 3];
        let fit = TetrisFit {
            t_draws: vec![],
            t_hat: t,
            phi_star_draws: vec![phi.clone()],
            psi_draws: vec![psi],
            seed: 0,
        };
        let est = tetris_decompose(&fit).unwrap();
        assert_eq!(est.k_hat, 1);
        assert_eq!(est.j_hat, vec![2, 2, 0]);
        assert_eq!(est.phi.as_ref().unwrap().ncols(), 1);
        assert_eq!(est.lambda[0].ncols(), 2);
        assert_eq!(est.lambda[2].ncols(), 0);

        // All-ones: everything common.
        let t = SharingMatrix::all_ones(3, 4);
        let fit = TetrisFit {
            t_draws: vec![],
            t_hat: t,
            phi_star_draws: vec![phi.clone()],
            psi_draws: vec![vec![DVector::from_element(p, 0.3); 3]],
            seed: 0,
        };
        let est = tetris_decompose(&fit).unwrap();
        assert_eq!(est.k_hat, 4);
        assert_eq!(est.j_hat, vec![0, 0, 0]);
        for sl in &est.sigma_lambda {
            assert_eq!(sl.amax(), 0.0);
        }

        // Identity-like: every column owned by one study.
        let t = SharingMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1, 0, 0, 0, 1, 0, 0, 0, 1],
        ))
        .unwrap();
        let fit = TetrisFit {
            t_draws: vec![],
            t_hat: t,
            phi_star_draws: vec![strong_loadings(&mut rng, p, 3)],
            psi_draws: vec![vec![DVector::from_element(p, 0.3); 3]],
            seed: 0,
        };
        let est = tetris_decompose(&fit).unwrap();
        assert_eq!(est.k_hat, 0);
        assert!(est.phi.is_none());
        assert_eq!(est.j_hat, vec![1, 1, 1]);
    }

    #[test]
    fn covariance_identity_holds_for_random_patterns() {
        let mut rng = seeded_rng(5040);
        for _ in 0..20 {
            let s_count = 2 + rng.gen_range(0..3usize);
            let k = 1 + rng.gen_range(0..4usize);
            let p = 4 + rng.gen_range(0..3usize);
            let t = loop {
                let cand = DMatrix::from_fn(s_count, k, |_, _| u8::from(rng.gen::<f64>() < 0.6));
                if let Ok(m) = SharingMatrix::new(cand) {
                    break m;
                }
            };
            let phi = std_normal_matrix(&mut rng, p, k);
            let psi: Vec<DVector<f64>> = (0..s_count)
                .map(|_| DVector::from_fn(p, |_, _| 0.1 + rng.gen::<f64>()))
                .collect();
            let fit = TetrisFit {
                t_draws: vec![],
                t_hat: t,
                phi_star_draws: vec![phi],
                psi_draws: vec![psi],
                seed: 0,
            };
            let est = tetris_decompose(&fit).unwrap();
            for s in 0..s_count {
                let lhs = est.sigma_phi.as_ref().unwrap()
                    + &est.sigma_lambda[s]
                    + DMatrix::from_diagonal(&est.psi[s]);
                assert!(
                    (lhs - &est.sigma_marginal[s]).amax() < 1e-10,
                    "identity failed for study {s}"
                );
            }
        }
    }

    #[test]
    fn decompose_is_invariant_to_column_permutations() {
        let mut rng = seeded_rng(5050);
        let t = SharingMatrix::new(DMatrix::from_row_slice(
            2,
            3,
            &[1, 1, 0, 1, 0, 1],
        ))
        .unwrap();
        let phi = std_normal_matrix(&mut rng, 4, 3);
        let psi = vec![DVector::from_element(4, 0.4); 2];
        let fit = TetrisFit {
            t_draws: vec![],
            t_hat: t.clone(),
            phi_star_draws: vec![phi.clone()],
            psi_draws: vec![psi.clone()],
            seed: 0,
        };
        let base = tetris_decompose(&fit).unwrap();

        let perm = [2usize, 0, 1];
        let t_perm = SharingMatrix::new(DMatrix::from_fn(2, 3, |s, k| t.matrix()[(s, perm[k])]))
            .unwrap();
        let phi_perm = DMatrix::from_fn(4, 3, |i, k| phi[(i, perm[k])]);
        let fit = TetrisFit {
            t_draws: vec![],
            t_hat: t_perm,
            phi_star_draws: vec![phi_perm],
            psi_draws: vec![psi],
            seed: 0,
        };
        let permuted = tetris_decompose(&fit).unwrap();
        assert_eq!(base.k_hat, permuted.k_hat);
        assert_eq!(base.j_hat, permuted.j_hat);
        assert!(
            (base.sigma_phi.as_ref().unwrap() - permuted.sigma_phi.as_ref().unwrap()).amax()
                < 1e-12
        );
        for s in 0..2 {
            assert!((base.sigma_marginal[s].clone() - &permuted.sigma_marginal[s]).amax() < 1e-12);
        }
    }

    #[test]
    fn fixed_all_ones_pattern_reduces_to_pooled_structure() {
        let mut rng = seeded_rng(5060);
        let p = 6;
        let phi = strong_loadings(&mut rng, p, 2);
        let t_true = SharingMatrix::all_ones(2, 2);
        let y1 = pattern_data(&mut rng, 80, &phi, &t_true, 0, 0.5);
        let y2 = pattern_data(&mut rng, 80, &phi, &t_true, 1, 0.5);
        let ds = MultiStudyDataset::from_matrices(vec![y1, y2]).unwrap();
        let ctrl = McmcControl::new(200, 100, 1, 11).unwrap();
        let ibp = IbpConfig {
            alpha: 2.5,
            beta: 1.0,
        };
        let fixed = SharingMatrix::all_ones(2, 2);
        let fit = fit_tetris(&ds, &ibp, &ctrl, Some(&fixed)).unwrap();
        assert!(fit.t_draws.is_empty(), "phases 1-2 must be skipped");
        assert_eq!(fit.t_hat, fixed);
        let est = tetris_decompose(&fit).unwrap();
        assert_eq!(est.k_hat, 2);
        assert_eq!(est.j_hat, vec![0, 0]);
        for sl in &est.sigma_lambda {
            assert_eq!(sl.amax(), 0.0, "no study-specific covariance possible");
        }
    }

    #[test]
    fn tiny_two_study_pattern_is_recovered_across_seeds() {
        // One common factor plus one specific to study 1, strong signal:
        // the selected mode must match the truth in at least 6 of 10
        // seeds.
        let truth = SharingMatrix::new(DMatrix::from_row_slice(2, 2, &[1, 1, 1, 0])).unwrap();
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = seeded_rng(6000 + seed);
            let phi = strong_loadings(&mut rng, 6, 2);
            let y1 = pattern_data(&mut rng, 120, &phi, &truth, 0, 0.3);
            let y2 = pattern_data(&mut rng, 120, &phi, &truth, 1, 0.3);
            let ds = MultiStudyDataset::from_matrices(vec![y1, y2]).unwrap();
            let ctrl = McmcControl::new(1200, 600, 1, seed).unwrap();
            let ibp = IbpConfig {
                alpha: 2.5,
                beta: 1.0,
            };
            // Neutral start: both factors common, nothing specific.
            let opts = TetrisOptions {
                init_t: Some(SharingMatrix::all_ones(2, 2)),
                ..TetrisOptions::default()
            };
            if let Ok(fit) = fit_tetris_opts(&ds, &ibp, &ctrl, None, &opts) {
                if fit.t_hat.canonicalized() == truth.canonicalized() {
                    hits += 1;
                }
            }
        }
        assert!(hits >= 6, "pattern recovered in only {hits}/10 seeds");
    }

    #[test]
    fn runaway_column_growth_is_reported() {
        // Data with four strong factors but a cap of S * K_bar = 2
        // columns: accepted births must blow past the cap quickly.
        let mut rng = seeded_rng(5080);
        let phi = strong_loadings(&mut rng, 8, 4);
        let t_true = SharingMatrix::all_ones(2, 4);
        let y1 = pattern_data(&mut rng, 100, &phi, &t_true, 0, 0.3);
        let y2 = pattern_data(&mut rng, 100, &phi, &t_true, 1, 0.3);
        let ds = MultiStudyDataset::from_matrices(vec![y1, y2]).unwrap();
        let ctrl = McmcControl::new(300, 150, 1, 3).unwrap();
        let ibp = IbpConfig {
            alpha: 6.0,
            beta: 1.0,
        };
        let opts = TetrisOptions {
            cap_multiplier: 1,
            init_t: Some(SharingMatrix::all_ones(2, 1)),
            ..TetrisOptions::default()
        };
        let err = fit_tetris_opts(&ds, &ibp, &ctrl, None, &opts).unwrap_err();
        assert!(matches!(err, Error::Guard(_)), "got {err:?}");
        assert!(err.to_string().contains("alpha"), "message should advise on alpha");
    }

    #[test]
    fn budget_checkpoint_resumes_to_the_same_fit() {
        let mut rng = seeded_rng(5090);
        let phi = strong_loadings(&mut rng, 5, 2);
        let truth = SharingMatrix::new(DMatrix::from_row_slice(2, 2, &[1, 1, 1, 0])).unwrap();
        let y1 = pattern_data(&mut rng, 60, &phi, &truth, 0, 0.4);
        let y2 = pattern_data(&mut rng, 60, &phi, &truth, 1, 0.4);
        let ds = MultiStudyDataset::from_matrices(vec![y1, y2]).unwrap();
        let ctrl = McmcControl::new(120, 60, 1, 17).unwrap();
        let ibp = IbpConfig {
            alpha: 2.5,
            beta: 1.0,
        };

        let reference = fit_tetris(&ds, &ibp, &ctrl, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let cp_path = dir.path().join("phase1.json");
        let opts = TetrisOptions {
            time_budget: Some(Duration::ZERO),
            checkpoint_path: Some(cp_path.clone()),
            ..TetrisOptions::default()
        };
        let err = fit_tetris_opts(&ds, &ibp, &ctrl, None, &opts).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
        assert!(cp_path.exists());

        let resume_opts = TetrisOptions {
            resume_from: Some(cp_path),
            ..TetrisOptions::default()
        };
        let resumed = fit_tetris_opts(&ds, &ibp, &ctrl, None, &resume_opts).unwrap();
        // The budget expired before iteration 0, so the resumed run
        // replays the whole chain bit for bit.
        assert_eq!(resumed.t_hat, reference.t_hat);
        assert_eq!(resumed.t_draws.len(), reference.t_draws.len());
        assert_eq!(resumed.phi_star_draws.last(), reference.phi_star_draws.last());
    }

    #[test]
    fn phase_three_draws_share_the_selected_dimensions() {
        let mut rng = seeded_rng(5100);
        let phi = strong_loadings(&mut rng, 5, 2);
        let truth = SharingMatrix::new(DMatrix::from_row_slice(2, 2, &[1, 1, 1, 0])).unwrap();
        let y1 = pattern_data(&mut rng, 80, &phi, &truth, 0, 0.4);
        let y2 = pattern_data(&mut rng, 80, &phi, &truth, 1, 0.4);
        let ds = MultiStudyDataset::from_matrices(vec![y1, y2]).unwrap();
        let ctrl = McmcControl::new(150, 100, 1, 23).unwrap();
        let ibp = IbpConfig {
            alpha: 2.5,
            beta: 1.0,
        };
        let fit = fit_tetris(&ds, &ibp, &ctrl, None).unwrap();
        assert!(!fit.phi_star_draws.is_empty());
        for draw in &fit.phi_star_draws {
            assert_eq!(draw.ncols(), fit.t_hat.k_star());
            assert_eq!(draw.nrows(), 5);
        }
        assert_eq!(fit.phi_star_draws.len(), fit.psi_draws.len());
        let est = tetris_decompose(&fit).unwrap();
        est.validate().unwrap();
    }
}
