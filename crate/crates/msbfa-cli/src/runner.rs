//! One place that knows how to run every method: dispatch, the two-pass
//! factor-count refit for the fixed-K MGPS models, and the per-method
//! factor-count conventions the reports use.

use serde::Serialize;

use msbfa::bench::scenarios::GroundTruth;
use msbfa::data::MultiStudyDataset;
use msbfa::fa::mgps_models::{fit_bmsfa_opts, fit_ind_fa_opts, fit_stack_fa_opts};
use msbfa::fa::momss::{fit_momss_full, MomssFit};
use msbfa::fa::pfa::{fit_pfa_cfg, pfa_point_estimates};
use msbfa::fa::sufa::{fit_sufa, sufa_point_estimates};
use msbfa::fa::tetris::{fit_tetris_opts, tetris_decompose, SharingMatrix, TetrisOptions};
use msbfa::fa::McmcControl;
use msbfa::postprocess::{evd_num_factors, FitResult, Method};
use msbfa::priors::ibp::IbpConfig;
use msbfa::{Error, Result};

use crate::config::Settings;

/// Factor counts to fit at, resolved per run (from flags/config for user
/// data, from the generative truth for benchmark cells).
#[derive(Debug, Clone)]
pub struct FactorPlan {
    pub k: usize,
    /// Per-study specific counts; ignored by methods without them.
    pub j: Vec<usize>,
    /// Run the factor-count selection + refit pass (pooled, per-study,
    /// and combined MGPS models only).
    pub refit: bool,
    /// Fix the sharing pattern instead of sampling it.
    pub fixed_t: Option<SharingMatrix>,
}

/// What the selection pass saw and did.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionInfo {
    pub first_k: usize,
    pub first_j: Vec<usize>,
    pub selected_k: usize,
    pub selected_j: Vec<usize>,
    pub refit: bool,
}

/// A finished method run plus the numbers the reports want.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub fit: FitResult,
    pub selection: Option<SelectionInfo>,
    /// Factor count the method itself reports (selection result for the
    /// EVD pipeline, modal width for the perturbed sampler, active
    /// columns for the EM mode, common columns for the sharing sampler).
    pub k_report: usize,
    pub j_report: Vec<usize>,
    pub warnings: Vec<String>,
}

fn ctrl(st: &Settings, seed: u64) -> Result<McmcControl> {
    McmcControl::new(st.nrun, st.burn, st.thin, seed)
}

/// Columns whose largest absolute loading clears the cutoff. The EM mode
/// never zeroes a column exactly, so "active" means "not numerically
/// dead", which is exactly how an over-specified fit over-reports.
fn active_columns(fit: &MomssFit, cutoff: f64) -> usize {
    (0..fit.phi.ncols())
        .filter(|&c| fit.phi.column(c).amax() > cutoff)
        .count()
}

pub fn run_method(
    method: Method,
    ds: &MultiStudyDataset,
    plan: &FactorPlan,
    st: &Settings,
    seed: u64,
) -> Result<MethodRun> {
    let s_count = ds.n_studies();
    match method {
        Method::StackFa => {
            let ctrl = ctrl(st, seed)?;
            let opts = st.mgps_options();
            let raw = fit_stack_fa_opts(ds, plan.k, &ctrl, &opts)?;
            let mut warnings = raw.warnings.clone();
            let first = raw.point_estimates()?;
            let (fit, selection) = if plan.refit {
                let sigma = first.sigma_phi.as_ref().expect("pooled fit has sigma_phi");
                let k_sel = evd_num_factors(sigma, st.evd_threshold)?.k.max(1);
                let refit = k_sel != plan.k;
                let info = SelectionInfo {
                    first_k: plan.k,
                    first_j: vec![],
                    selected_k: k_sel,
                    selected_j: vec![],
                    refit,
                };
                let fit = if refit {
                    let second = fit_stack_fa_opts(ds, k_sel, &ctrl, &opts)?;
                    warnings.extend(second.warnings.clone());
                    second.point_estimates()?
                } else {
                    first
                };
                (fit, Some(info))
            } else {
                (first, None)
            };
            let k_report = selection.as_ref().map_or(fit.k_hat, |s| s.selected_k);
            Ok(MethodRun {
                fit,
                selection,
                k_report,
                j_report: vec![],
                warnings,
            })
        }
        Method::IndFa => {
            let ctrl = ctrl(st, seed)?;
            let opts = st.mgps_options();
            let j = expect_len(&plan.j, s_count, "per-study factor counts")?;
            let raw = fit_ind_fa_opts(ds, &j, &ctrl, &opts)?;
            let mut warnings = raw.warnings.clone();
            let first = raw.point_estimates()?;
            let (fit, selection) = if plan.refit {
                let mut j_sel = Vec::with_capacity(s_count);
                for s in 0..s_count {
                    j_sel.push(evd_num_factors(&first.sigma_lambda[s], st.evd_threshold)?.k.max(1));
                }
                let refit = j_sel != j;
                let info = SelectionInfo {
                    first_k: 0,
                    first_j: j.clone(),
                    selected_k: 0,
                    selected_j: j_sel.clone(),
                    refit,
                };
                let fit = if refit {
                    let second = fit_ind_fa_opts(ds, &j_sel, &ctrl, &opts)?;
                    warnings.extend(second.warnings.clone());
                    second.point_estimates()?
                } else {
                    first
                };
                (fit, Some(info))
            } else {
                (first, None)
            };
            let j_report = selection
                .as_ref()
                .map_or_else(|| fit.j_hat.clone(), |s| s.selected_j.clone());
            Ok(MethodRun {
                fit,
                selection,
                k_report: 0,
                j_report,
                warnings,
            })
        }
        Method::Bmsfa => {
            let ctrl = ctrl(st, seed)?;
            let opts = st.mgps_options();
            let j = expect_len(&plan.j, s_count, "per-study factor counts")?;
            let raw = fit_bmsfa_opts(ds, plan.k, &j, &ctrl, &opts)?;
            let mut warnings = raw.warnings.clone();
            let first = raw.point_estimates()?;
            let (fit, selection) = if plan.refit {
                let sigma = first.sigma_phi.as_ref().expect("combined fit has sigma_phi");
                let k_sel = evd_num_factors(sigma, st.evd_threshold)?.k.max(1);
                let mut j_sel = Vec::with_capacity(s_count);
                for s in 0..s_count {
                    j_sel.push(evd_num_factors(&first.sigma_lambda[s], st.evd_threshold)?.k.max(1));
                }
                let refit = k_sel != plan.k || j_sel != j;
                let info = SelectionInfo {
                    first_k: plan.k,
                    first_j: j.clone(),
                    selected_k: k_sel,
                    selected_j: j_sel.clone(),
                    refit,
                };
                let fit = if refit {
                    let second = fit_bmsfa_opts(ds, k_sel, &j_sel, &ctrl, &opts)?;
                    warnings.extend(second.warnings.clone());
                    second.point_estimates()?
                } else {
                    first
                };
                (fit, Some(info))
            } else {
                (first, None)
            };
            let k_report = selection.as_ref().map_or(fit.k_hat, |s| s.selected_k);
            let j_report = selection
                .as_ref()
                .map_or_else(|| fit.j_hat.clone(), |s| s.selected_j.clone());
            Ok(MethodRun {
                fit,
                selection,
                k_report,
                j_report,
                warnings,
            })
        }
        Method::Pfa => {
            let ctrl = ctrl(st, seed)?;
            let raw = fit_pfa_cfg(ds, plan.k, &ctrl, &st.pfa_config())?;
            let mut warnings = Vec::new();
            if raw.singular_q_rejections > 0 {
                warnings.push(format!(
                    "{} ill-conditioned perturbation draws were rejected",
                    raw.singular_q_rejections
                ));
            }
            let fit = pfa_point_estimates(&raw)?;
            let k_report = fit.k_hat;
            Ok(MethodRun {
                fit,
                selection: None,
                k_report,
                j_report: vec![],
                warnings,
            })
        }
        Method::Momss => {
            let nlp = st.momss_config(seed);
            let raw = fit_momss_full(ds, plan.k, &nlp, st.momss_max_iter, st.momss_tol)?;
            let mut warnings = Vec::new();
            if !raw.converged {
                warnings.push(format!(
                    "EM stopped at the iteration cap ({}) before reaching tolerance {}",
                    st.momss_max_iter, st.momss_tol
                ));
            }
            let k_report = active_columns(&raw, st.momss_cutoff);
            let fit = raw.point_estimates()?;
            Ok(MethodRun {
                fit,
                selection: None,
                k_report,
                j_report: vec![],
                warnings,
            })
        }
        Method::Sufa => {
            let ctrl = ctrl(st, seed)?;
            let j = if plan.j.is_empty() {
                None
            } else {
                Some(expect_len(&plan.j, s_count, "per-study factor counts")?)
            };
            let raw = fit_sufa(ds, plan.k, j.as_deref(), &ctrl, &st.hmc_config())?;
            let j_report = raw.j_alloc.clone();
            let fit = sufa_point_estimates(&raw)?;
            Ok(MethodRun {
                fit,
                selection: None,
                k_report: plan.k,
                j_report,
                warnings: vec![],
            })
        }
        Method::Tetris => {
            let ctrl = ctrl(st, seed)?;
            let alpha = st.tetris_alpha.unwrap_or(1.25 * s_count as f64);
            let ibp = IbpConfig {
                alpha,
                beta: st.tetris_beta,
            };
            let opts = TetrisOptions {
                mode_radius: st.tetris_mode_radius,
                cap_multiplier: st.tetris_cap_multiplier,
                time_budget: st.tetris_time_budget(),
                checkpoint_every: st.tetris_checkpoint_every,
                init_t: st
                    .tetris_init_columns
                    .map(|c| SharingMatrix::all_ones(s_count, c.max(1))),
                mgps: st.mgps_hyper(),
                psi_shape: st.psi_shape,
                psi_rate: st.psi_rate,
                ..TetrisOptions::default()
            };
            let raw = fit_tetris_opts(ds, &ibp, &ctrl, plan.fixed_t.as_ref(), &opts)?;
            let fit = tetris_decompose(&raw)?;
            let k_report = fit.k_hat;
            let j_report = fit.j_hat.clone();
            Ok(MethodRun {
                fit,
                selection: None,
                k_report,
                j_report,
                warnings: vec![],
            })
        }
    }
}

fn expect_len(j: &[usize], s_count: usize, what: &str) -> Result<Vec<usize>> {
    if j.len() != s_count {
        return Err(Error::Config(format!(
            "{what}: {} values for {s_count} studies",
            j.len()
        )));
    }
    Ok(j.to_vec())
}

/// Factor counts for a benchmark cell, mirroring the simulation study's
/// fitting conventions. Correctly-specified fits use the generative
/// counts; the per-study model absorbs common + specific dimensions
/// (K + max J_s). Over-specified fits use the study's inflated settings:
/// K=6 / specific 2 / per-study 6 for the four small designs, K=20 /
/// specific 4 / per-study 20 for the sparse high-dimensional one.
pub fn plan_for_truth(
    method: Method,
    scenario: u8,
    truth: &GroundTruth,
    overspecified: bool,
) -> FactorPlan {
    let s_count = truth.sigma_s.len();
    let j_true_max = truth.j_s.iter().copied().max().unwrap_or(0);
    let (k, j_specific, j_ind) = if overspecified {
        if scenario == 5 {
            (20, 4, 20)
        } else {
            (6, 2, 6)
        }
    } else {
        (truth.k, j_true_max.max(1), truth.k + j_true_max)
    };
    let plan_j = match method {
        Method::IndFa => vec![j_ind.max(1); s_count],
        Method::Bmsfa | Method::Sufa => {
            if overspecified {
                vec![j_specific; s_count]
            } else {
                (0..s_count)
                    .map(|s| truth.j_s.get(s).copied().unwrap_or(0).max(1))
                    .collect()
            }
        }
        _ => vec![],
    };
    FactorPlan {
        k,
        j: plan_j,
        refit: matches!(method, Method::StackFa | Method::IndFa | Method::Bmsfa),
        fixed_t: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use msbfa::bench::scenarios::{generate_scenario, ScenarioSpec};

    fn truth_for(id: u8) -> GroundTruth {
        let (_, truth) = generate_scenario(&ScenarioSpec::mini(id, 3).unwrap()).unwrap();
        truth
    }

    #[test]
    fn fitting_plans_follow_the_study_conventions() {
        // Perturbation design: no specific factors in the truth.
        let t1 = truth_for(1);
        assert_eq!(plan_for_truth(Method::StackFa, 1, &t1, false).k, 4);
        assert_eq!(plan_for_truth(Method::IndFa, 1, &t1, false).j, vec![4; 4]);
        assert_eq!(plan_for_truth(Method::Bmsfa, 1, &t1, false).j, vec![1; 4]);

        // Span-mixing design: one specific factor per study.
        let t3 = truth_for(3);
        assert_eq!(plan_for_truth(Method::IndFa, 3, &t3, false).j, vec![5; 4]);
        assert_eq!(plan_for_truth(Method::Sufa, 3, &t3, false).j, vec![1; 4]);

        // Sparse sharing design: K=15, two specific each.
        let t5 = truth_for(5);
        assert_eq!(plan_for_truth(Method::StackFa, 5, &t5, false).k, 15);
        assert_eq!(plan_for_truth(Method::IndFa, 5, &t5, false).j, vec![17; 4]);
        assert_eq!(plan_for_truth(Method::Bmsfa, 5, &t5, false).j, vec![2; 4]);

        // Over-specification uses the study's inflated settings.
        let t2 = truth_for(2);
        let over = plan_for_truth(Method::StackFa, 2, &t2, true);
        assert_eq!(over.k, 6);
        assert_eq!(plan_for_truth(Method::Bmsfa, 2, &t2, true).j, vec![2; 4]);
        assert_eq!(plan_for_truth(Method::IndFa, 2, &t2, true).j, vec![6; 4]);
        assert_eq!(plan_for_truth(Method::StackFa, 5, &t5, true).k, 20);
        assert_eq!(plan_for_truth(Method::Bmsfa, 5, &t5, true).j, vec![4; 4]);
        assert_eq!(plan_for_truth(Method::IndFa, 5, &t5, true).j, vec![20; 4]);

        assert!(plan_for_truth(Method::StackFa, 1, &t1, false).refit);
        assert!(!plan_for_truth(Method::Pfa, 1, &t1, false).refit);
    }
}
