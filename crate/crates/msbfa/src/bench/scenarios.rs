//! Simulation scenario generators. Each scenario plants a known
//! shared/specific covariance decomposition and returns the dataset
//! together with every ground-truth quantity the evaluation needs:
//!
//! 1. shared factors seen through small per-study linear perturbations;
//! 2. shared factors plus study intercepts, observed covariates, and
//!    study-specific noise;
//! 3. study factors living in the span of the shared loadings;
//! 4. a binary sharing pattern over many studies with covariates,
//!    shaped like a multi-cohort nutrition panel (large N, small P);
//! 5. a binary sharing pattern shaped like multi-study gene expression
//!    (small N, large P, very sparse loadings).

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::MultiStudyDataset;
use crate::error::{Error, Result};
use crate::fa::tetris::SharingMatrix;
use crate::linalg::{std_normal_matrix, symmetrize};
use crate::rng::seeded_rng;

/// Everything needed to generate one scenario replicate.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    /// Scenario id, 1-5.
    pub id: u8,
    pub n_s: Vec<usize>,
    pub p: usize,
    /// Number of common factors.
    pub k: usize,
    /// Study-specific factor counts (scenarios 3-5).
    pub j_s: Vec<usize>,
    /// Partially shared factor count (scenarios 4-5).
    pub n_partial: usize,
    /// Fraction of loading entries forced to zero.
    pub sparsity: f64,
    /// Nonzero loadings are drawn U(low, high) with a random sign.
    pub loading_range: (f64, f64),
    pub sign_flip_prob: f64,
    /// Perturbation level for scenario 1.
    pub alpha_q: f64,
    /// Observed covariate count (scenarios 2 and 4).
    pub n_covariates: usize,
    /// Standard deviation of the mixing entries in scenario 3.
    pub a_sd: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// The scenario at its published dimensions.
    pub fn published(id: u8, seed: u64) -> Result<Self> {
        let base = ScenarioSpec {
            id,
            n_s: vec![100; 4],
            p: 40,
            k: 4,
            j_s: vec![0; 4],
            n_partial: 0,
            sparsity: 0.4,
            loading_range: (0.6, 1.0),
            sign_flip_prob: 0.5,
            alpha_q: 0.0,
            n_covariates: 0,
            a_sd: 0.0,
            seed,
        };
        let spec = match id {
            1 => ScenarioSpec {
                alpha_q: 0.01,
                ..base
            },
            2 => ScenarioSpec {
                n_covariates: 2,
                ..base
            },
            3 => ScenarioSpec {
                j_s: vec![1; 4],
                a_sd: 0.4,
                ..base
            },
            4 => ScenarioSpec {
                n_s: vec![1362, 217, 417, 1012, 2241, 205, 2403, 3775, 1790, 761, 373, 465],
                p: 42,
                k: 4,
                j_s: vec![1; 12],
                n_partial: 7,
                n_covariates: 12,
                ..base
            },
            5 => ScenarioSpec {
                n_s: vec![157, 195, 285, 117],
                p: 1060,
                k: 15,
                j_s: vec![2; 4],
                n_partial: 3,
                sparsity: 0.8,
                ..base
            },
            _ => return Err(Error::Config(format!("unknown scenario id {id}"))),
        };
        Ok(spec)
    }

    /// Desk-scale variant: scenarios 1-3 keep their published dimensions,
    /// scenario 4 shrinks every study to a tenth, scenario 5 keeps its
    /// studies but drops to 200 variables.
    pub fn mini(id: u8, seed: u64) -> Result<Self> {
        let mut spec = Self::published(id, seed)?;
        match id {
            4 => {
                for n in &mut spec.n_s {
                    *n = (*n / 10).max(20);
                }
            }
            5 => spec.p = 200,
            _ => {}
        }
        Ok(spec)
    }

    pub fn n_studies(&self) -> usize {
        self.n_s.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.id) {
            return Err(Error::Config(format!("unknown scenario id {}", self.id)));
        }
        if self.n_s.is_empty() || self.n_s.iter().any(|&n| n == 0) || self.p == 0 || self.k == 0 {
            return Err(Error::Dimension("scenario dimensions must be positive".into()));
        }
        if self.j_s.len() != self.n_s.len() {
            return Err(Error::Dimension(format!(
                "{} specific counts for {} studies",
                self.j_s.len(),
                self.n_s.len()
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0,1)", self.sparsity)));
        }
        let (lo, hi) = self.loading_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config("loading range must be a finite interval".into()));
        }
        Ok(())
    }
}

/// Scenario-specific generative parameters beyond the common ones.
#[derive(Debug, Clone)]
pub enum ScenarioExtras {
    /// Per-study perturbation maps (study 1 is the identity).
    Perturbations { q: Vec<DMatrix<f64>> },
    /// Study intercepts and covariate coefficients.
    Covariates {
        intercepts: Vec<DVector<f64>>,
        /// Q x P coefficient matrix.
        coefficients: DMatrix<f64>,
    },
    /// Per-study mixing matrices (K x J_s).
    Mixers { a: Vec<DMatrix<f64>> },
    /// Binary sharing pattern, the full combinatorial loading matrix,
    /// and covariate coefficients when the scenario has covariates.
    Sharing {
        t: SharingMatrix,
        phi_star: DMatrix<f64>,
        coefficients: Option<DMatrix<f64>>,
    },
}

/// Planted quantities a fit is scored against.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Common loadings, P x K.
    pub phi: DMatrix<f64>,
    /// Study-specific loadings, when the generative model has them.
    pub lambda: Option<Vec<DMatrix<f64>>>,
    /// Common covariance (scenario-specific convention, see generators).
    pub sigma_phi: DMatrix<f64>,
    /// Study-specific covariance shares, when defined.
    pub sigma_lambda: Option<Vec<DMatrix<f64>>>,
    /// Marginal covariance per study.
    pub sigma_s: Vec<DMatrix<f64>>,
    /// True factor counts.
    pub k: usize,
    pub j_s: Vec<usize>,
    pub extras: ScenarioExtras,
}

/// Sparse signed loadings: each entry is zero with probability
/// `sparsity`, otherwise U(low, high) with a sign flip.
fn sparse_signed_loadings(
    rng: &mut ChaCha8Rng,
    p: usize,
    k: usize,
    sparsity: f64,
    range: (f64, f64),
    sign_flip_prob: f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(p, k, |_, _| {
        if rng.gen::<f64>() < sparsity {
            0.0
        } else {
            let mag = rng.gen_range(range.0..range.1);
            if rng.gen::<f64>() < sign_flip_prob {
                -mag
            } else {
                mag
            }
        }
    })
}

fn uniform_psi(rng: &mut ChaCha8Rng, p: usize) -> DVector<f64> {
    // Idiosyncratic variances U(0,1), bounded away from exact zero.
    DVector::from_fn(p, |_, _| rng.gen::<f64>().max(1e-6))
}

fn mvn_rows(rng: &mut ChaCha8Rng, n: usize, psi: &DVector<f64>) -> DMatrix<f64> {
    let mut e = std_normal_matrix(rng, n, psi.len());
    for (c, sd) in psi.iter().enumerate() {
        e.column_mut(c).scale_mut(sd.sqrt());
    }
    e
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(MultiStudyDataset, GroundTruth)> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed);
    match spec.id {
        1 => generate_perturbed(spec, &mut rng),
        2 => generate_covariate_adjusted(spec, &mut rng),
        3 => generate_span_mixing(spec, &mut rng),
        4 | 5 => generate_sharing_pattern(spec, &mut rng),
        _ => unreachable!("validated above"),
    }
}

/// Scenario 1: one shared factor structure observed through small
/// per-study perturbations. `Y_s = (F Phi' + E) Q_s'` with `Q_1 = I` and
/// `Q_s = I + alpha_q Z_s` otherwise.
fn generate_perturbed(
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(MultiStudyDataset, GroundTruth)> {
    let p = spec.p;
    let phi = sparse_signed_loadings(rng, p, spec.k, spec.sparsity, spec.loading_range, spec.sign_flip_prob);
    let psi = uniform_psi(rng, p);
    let sigma_phi = symmetrize(&(&phi * phi.transpose() + DMatrix::from_diagonal(&psi)));

    let mut studies = Vec::with_capacity(spec.n_studies());
    let mut q_all = Vec::with_capacity(spec.n_studies());
    let mut sigma_s = Vec::with_capacity(spec.n_studies());
    let mut sigma_lambda = Vec::with_capacity(spec.n_studies());
    for s in 0..spec.n_studies() {
        let q = if s == 0 {
            DMatrix::identity(p, p)
        } else {
            DMatrix::identity(p, p) + spec.alpha_q * std_normal_matrix(rng, p, p)
        };
        let f = std_normal_matrix(rng, spec.n_s[s], spec.k);
        let e = mvn_rows(rng, spec.n_s[s], &psi);
        // Rows are samples; the perturbation acts on the variable axis.
        let y = (f * phi.transpose() + e) * q.transpose();
        let sig = symmetrize(&(&q * &sigma_phi * q.transpose()));
        sigma_lambda.push(&sig - &sigma_phi);
        sigma_s.push(sig);
        studies.push(y);
        q_all.push(q);
    }

    let ds = MultiStudyDataset::from_matrices(studies)?;
    let truth = GroundTruth {
        phi,
        lambda: None,
        sigma_phi,
        sigma_lambda: Some(sigma_lambda),
        sigma_s,
        k: spec.k,
        j_s: vec![0; spec.n_studies()],
        extras: ScenarioExtras::Perturbations { q: q_all },
    };
    Ok((ds, truth))
}

/// One covariate row per study, replicated: within-study-constant
/// effects are absorbed exactly by per-study centering, so methods that
/// do not model covariates still face the planted covariance.
fn study_level_covariates(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DMatrix<f64> {
    let z = std_normal_matrix(rng, 1, q);
    DMatrix::from_fn(n, q, |_, j| z[(0, j)])
}

/// Scenario 2: shared factors plus study intercepts, observed
/// covariates, and study-specific idiosyncratic noise.
/// `Y_s = 1 alpha_s' + X_s B + F Phi' + E_s`.
fn generate_covariate_adjusted(
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(MultiStudyDataset, GroundTruth)> {
    let p = spec.p;
    let phi = sparse_signed_loadings(rng, p, spec.k, spec.sparsity, spec.loading_range, spec.sign_flip_prob);
    let coefficients = std_normal_matrix(rng, spec.n_covariates, p);
    let sigma_phi = symmetrize(&(&phi * phi.transpose()));

    let mut studies = Vec::with_capacity(spec.n_studies());
    let mut covariates = Vec::with_capacity(spec.n_studies());
    let mut intercepts = Vec::with_capacity(spec.n_studies());
    let mut sigma_s = Vec::with_capacity(spec.n_studies());
    for s in 0..spec.n_studies() {
        let n = spec.n_s[s];
        let psi_s = uniform_psi(rng, p);
        let alpha = DVector::from_fn(p, |_, _| {
            use rand_distr::StandardNormal;
            rng.sample::<f64, _>(StandardNormal)
        });
        let x = study_level_covariates(rng, n, spec.n_covariates);
        let f = std_normal_matrix(rng, n, spec.k);
        let e = mvn_rows(rng, n, &psi_s);
        let mut y = f * phi.transpose() + e + &x * &coefficients;
        for mut row in y.row_iter_mut() {
            row += alpha.transpose();
        }
        sigma_s.push(symmetrize(&(&sigma_phi + DMatrix::from_diagonal(&psi_s))));
        studies.push(y);
        covariates.push(x);
        intercepts.push(alpha);
    }

    let p_names = (1..=p).map(|i| format!("v{i}")).collect();
    let s_names = (1..=spec.n_studies()).map(|i| format!("study{i}")).collect();
    let ds = MultiStudyDataset::new(studies, p_names, s_names, Some(covariates))?;
    let truth = GroundTruth {
        phi,
        lambda: None,
        sigma_phi,
        sigma_lambda: None,
        sigma_s,
        k: spec.k,
        j_s: vec![0; spec.n_studies()],
        extras: ScenarioExtras::Covariates {
            intercepts,
            coefficients,
        },
    };
    Ok((ds, truth))
}

/// Scenario 3: study-specific factors confined to the span of the
/// shared loadings. `y = Phi (f + A_s l) + e`, shared `Psi`.
fn generate_span_mixing(
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(MultiStudyDataset, GroundTruth)> {
    let p = spec.p;
    let phi = sparse_signed_loadings(rng, p, spec.k, spec.sparsity, spec.loading_range, spec.sign_flip_prob);
    let psi = uniform_psi(rng, p);
    let sigma_phi = symmetrize(&(&phi * phi.transpose() + DMatrix::from_diagonal(&psi)));

    let mut studies = Vec::with_capacity(spec.n_studies());
    let mut mixers = Vec::with_capacity(spec.n_studies());
    let mut lambda = Vec::with_capacity(spec.n_studies());
    let mut sigma_lambda = Vec::with_capacity(spec.n_studies());
    let mut sigma_s = Vec::with_capacity(spec.n_studies());
    for s in 0..spec.n_studies() {
        let n = spec.n_s[s];
        let a = spec.a_sd * std_normal_matrix(rng, spec.k, spec.j_s[s]);
        let f = std_normal_matrix(rng, n, spec.k);
        let l = std_normal_matrix(rng, n, spec.j_s[s]);
        let e = mvn_rows(rng, n, &psi);
        let y = (f + l * a.transpose()) * phi.transpose() + e;
        let lam = &phi * &a;
        let sl = symmetrize(&(&lam * lam.transpose()));
        sigma_s.push(symmetrize(&(&sigma_phi + &sl)));
        sigma_lambda.push(sl);
        lambda.push(lam);
        mixers.push(a);
        studies.push(y);
    }

    let ds = MultiStudyDataset::from_matrices(studies)?;
    let truth = GroundTruth {
        phi,
        lambda: Some(lambda),
        sigma_phi,
        sigma_lambda: Some(sigma_lambda),
        sigma_s,
        k: spec.k,
        j_s: spec.j_s.clone(),
        extras: ScenarioExtras::Mixers { a: mixers },
    };
    Ok((ds, truth))
}

/// Scenarios 4-5: a binary sharing pattern. Columns: `K` common, one
/// block of study-specific columns, and `n_partial` columns active in a
/// random strict subset of studies. Scenario 4 adds observed covariates.
fn generate_sharing_pattern(
    spec: &ScenarioSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(MultiStudyDataset, GroundTruth)> {
    let p = spec.p;
    let s_count = spec.n_studies();
    let total_specific: usize = spec.j_s.iter().sum();
    let k_star = spec.k + total_specific + spec.n_partial;

    // Build the planted pattern: common | specific blocks | partial.
    let mut t = DMatrix::zeros(s_count, k_star);
    for k in 0..spec.k {
        for s in 0..s_count {
            t[(s, k)] = 1u8;
        }
    }
    let mut col = spec.k;
    for s in 0..s_count {
        for _ in 0..spec.j_s[s] {
            t[(s, col)] = 1;
            col += 1;
        }
    }
    for _ in 0..spec.n_partial {
        // A strict subset: at least 2 studies, at most S-1.
        let size = rng.gen_range(2..s_count.max(3));
        let mut idx: Vec<usize> = (0..s_count).collect();
        idx.shuffle(rng);
        for &s in idx.iter().take(size) {
            t[(s, col)] = 1;
        }
        col += 1;
    }
    let t = SharingMatrix::new(t)?;

    let phi_star = sparse_signed_loadings(rng, p, k_star, spec.sparsity, spec.loading_range, spec.sign_flip_prob);
    let coefficients = if spec.n_covariates > 0 {
        Some(std_normal_matrix(rng, spec.n_covariates, p))
    } else {
        None
    };

    let common_cols: Vec<usize> = (0..spec.k).collect();
    let phi = DMatrix::from_fn(p, spec.k, |i, j| phi_star[(i, common_cols[j])]);
    let sigma_phi = symmetrize(&(&phi * phi.transpose()));

    let mut studies = Vec::with_capacity(s_count);
    let mut covariates = Vec::with_capacity(s_count);
    let mut lambda = Vec::with_capacity(s_count);
    let mut sigma_lambda = Vec::with_capacity(s_count);
    let mut sigma_s = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let n = spec.n_s[s];
        let psi_s = uniform_psi(rng, p);
        let active = t.active_columns(s);
        let loadings = DMatrix::from_fn(p, active.len(), |i, j| phi_star[(i, active[j])]);
        let f = std_normal_matrix(rng, n, active.len());
        let e = mvn_rows(rng, n, &psi_s);
        let mut y = f * loadings.transpose() + e;
        if let Some(b) = &coefficients {
            let x = study_level_covariates(rng, n, spec.n_covariates);
            y += &x * b;
            covariates.push(x);
        }

        let specific: Vec<usize> = active.iter().copied().filter(|&k| k >= spec.k).collect();
        let lam = DMatrix::from_fn(p, specific.len(), |i, j| phi_star[(i, specific[j])]);
        sigma_lambda.push(symmetrize(&(&lam * lam.transpose())));
        lambda.push(lam);
        let t_sel = t.study_selector(s);
        sigma_s.push(symmetrize(
            &(&phi_star * t_sel * phi_star.transpose() + DMatrix::from_diagonal(&psi_s)),
        ));
        studies.push(y);
    }

    let p_names = (1..=p).map(|i| format!("v{i}")).collect();
    let s_names = (1..=s_count).map(|i| format!("study{i}")).collect();
    let cov = if coefficients.is_some() { Some(covariates) } else { None };
    let ds = MultiStudyDataset::new(studies, p_names, s_names, cov)?;
    // j_s reports the designed singleton counts; partially shared columns
    // enter lambda / sigma_lambda but are tabulated separately, matching
    // how the designs are described.
    let truth = GroundTruth {
        phi,
        lambda: Some(lambda),
        sigma_phi,
        sigma_lambda: Some(sigma_lambda),
        sigma_s,
        k: spec.k,
        j_s: spec.j_s.clone(),
        extras: ScenarioExtras::Sharing {
            t,
            phi_star,
            coefficients,
        },
    };
    Ok((ds, truth))
}

/// Per-study uniform train/test split without replacement, seeded.
/// Covariate rows follow their study rows.
pub fn split_train_test(
    ds: &MultiStudyDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(MultiStudyDataset, MultiStudyDataset)> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} outside (0,1)"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_cov = Vec::new();
    let mut test_cov = Vec::new();
    for (s, y) in ds.studies.iter().enumerate() {
        let n = y.nrows();
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_train = n_train.clamp(1, n - 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let take = |rows: &[usize], m: &DMatrix<f64>| {
            DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
        };
        let (tr_rows, te_rows) = idx.split_at(n_train);
        let mut tr_rows = tr_rows.to_vec();
        let mut te_rows = te_rows.to_vec();
        tr_rows.sort_unstable();
        te_rows.sort_unstable();
        train.push(take(&tr_rows, y));
        test.push(take(&te_rows, y));
        if let Some(cov) = &ds.covariates {
            train_cov.push(take(&tr_rows, &cov[s]));
            test_cov.push(take(&te_rows, &cov[s]));
        }
    }
    let cov_pair = if ds.covariates.is_some() {
        (Some(train_cov), Some(test_cov))
    } else {
        (None, None)
    };
    let train = MultiStudyDataset::new(
        train,
        ds.variable_names.clone(),
        ds.study_names.clone(),
        cov_pair.0,
    )?;
    let test = MultiStudyDataset::new(
        test,
        ds.variable_names.clone(),
        ds.study_names.clone(),
        cov_pair.1,
    )?;
    Ok((train, test))
}
