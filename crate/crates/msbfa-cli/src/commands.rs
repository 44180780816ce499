//! The `fit` and `simulate` commands.

use std::path::{Path, PathBuf};

use serde::Serialize;

use msbfa::bench::profile::profile;
use msbfa::bench::scenarios::{generate_scenario, ScenarioExtras, ScenarioSpec};
use msbfa::data::{
    load_dataset, log_offset_transform, preprocess, save_dataset, write_matrix_csv,
    PreprocessSpec,
};
use msbfa::fa::tetris::SharingMatrix;
use msbfa::postprocess::Method;
use msbfa::{Error, Result};

use crate::config::{broadcast_counts, Settings};
use crate::output::{write_fit_matrices, write_json, write_meta, PreprocessMeta};
use crate::runner::{run_method, FactorPlan};

/// Inputs to `fit` beyond the shared settings.
#[derive(Debug, Clone)]
pub struct FitRequest {
    pub method: Method,
    pub data: Vec<PathBuf>,
    pub covariates: Vec<PathBuf>,
    /// K override; falls back to the method's config section.
    pub k: Option<usize>,
    pub j: Option<Vec<usize>>,
    pub no_refit: bool,
    /// CSV of a binary sharing pattern to fix (sharing sampler only).
    pub fixed_t: Option<PathBuf>,
    /// Directory label; the run lands in out_dir/{method}/{label}/{seed}.
    pub label: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    method: &'a str,
    data: &'a [PathBuf],
    covariates: &'a [PathBuf],
    label: &'a str,
    settings: &'a Settings,
}

/// Resolve K/J for the requested method from flags, then config sections.
fn resolve_plan(req: &FitRequest, st: &Settings, s_count: usize) -> Result<FactorPlan> {
    let need_k = |flag: Option<usize>, section: Option<usize>, name: &str| -> Result<usize> {
        flag.or(section).ok_or_else(|| {
            Error::Config(format!(
                "{name} needs a factor count: pass --k or set it in the config"
            ))
        })
    };
    let need_j = |flag: &Option<Vec<usize>>, section: &Option<Vec<usize>>, name: &str| -> Result<Vec<usize>> {
        let j = flag
            .clone()
            .or_else(|| section.clone())
            .ok_or_else(|| {
                Error::Config(format!(
                    "{name} needs per-study factor counts: pass --j or set them in the config"
                ))
            })?;
        broadcast_counts(&j, s_count, name)
    };
    let mut plan = FactorPlan {
        k: 0,
        j: vec![],
        refit: !req.no_refit,
        fixed_t: None,
    };
    match req.method {
        Method::StackFa => plan.k = need_k(req.k, st.stack_k, "the pooled model")?,
        Method::IndFa => plan.j = need_j(&req.j, &st.ind_j, "the per-study model")?,
        Method::Bmsfa => {
            plan.k = need_k(req.k, st.bmsfa_k, "the combined model")?;
            plan.j = need_j(&req.j, &st.bmsfa_j, "the combined model")?;
        }
        Method::Pfa => plan.k = need_k(req.k, st.pfa_k, "the perturbed model")?,
        Method::Momss => plan.k = need_k(req.k, st.momss_k, "the spike-and-slab model")?,
        Method::Sufa => {
            plan.k = need_k(req.k, st.sufa_k, "the subspace model")?;
            if let Some(j) = req.j.clone().or_else(|| st.sufa_j.clone()) {
                plan.j = broadcast_counts(&j, s_count, "the subspace model")?;
            }
        }
        Method::Tetris => {
            if let Some(path) = &req.fixed_t {
                plan.fixed_t = Some(read_sharing_matrix(path, s_count)?);
            }
        }
    }
    Ok(plan)
}

/// Read a binary S x K CSV (with header) as a sharing pattern.
fn read_sharing_matrix(path: &Path, s_count: usize) -> Result<SharingMatrix> {
    let ds = load_dataset(std::slice::from_ref(&path.to_path_buf()), None)?;
    let m = &ds.studies[0];
    if m.nrows() != s_count {
        return Err(Error::Dimension(format!(
            "sharing pattern has {} rows for {s_count} studies",
            m.nrows()
        )));
    }
    let mut t = nalgebra::DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            t[(i, j)] = match m[(i, j)] {
                v if v == 0.0 => 0u8,
                v if v == 1.0 => 1u8,
                v => {
                    return Err(Error::Config(format!(
                        "sharing pattern entry ({i}, {j}) is {v}, expected 0 or 1"
                    )))
                }
            };
        }
    }
    SharingMatrix::new(t)
}

pub fn cmd_fit(req: &FitRequest, st: &Settings) -> Result<()> {
    let covariate_paths = if req.covariates.is_empty() {
        None
    } else {
        Some(req.covariates.as_slice())
    };
    let raw = load_dataset(&req.data, covariate_paths)?;
    let transformed = match st.log_offset {
        Some(offset) => log_offset_transform(&raw, offset)?,
        None => raw,
    };
    let spec = PreprocessSpec {
        center: st.center || st.scale,
        scale: st.scale,
    };
    let (ds, pre_report) = preprocess(&transformed, spec)?;

    let plan = resolve_plan(req, st, ds.n_studies())?;
    let dir = st
        .out_dir
        .join(req.method.as_str())
        .join(&req.label)
        .join(st.seed.to_string());
    std::fs::create_dir_all(&dir)?;
    write_json(
        &dir.join("config.json"),
        &RunManifest {
            command: "fit",
            method: req.method.as_str(),
            data: &req.data,
            covariates: &req.covariates,
            label: &req.label,
            settings: st,
        },
    )?;

    let (outcome, usage) = profile(|| run_method(req.method, &ds, &plan, st, st.seed));
    let run = outcome?;
    let files = write_fit_matrices(&dir, &run.fit, &ds, st.edge_threshold)?;
    let meta_path = write_meta(
        &dir,
        &run,
        &ds,
        PreprocessMeta::new(st, &pre_report),
        st.seed,
        usage.seconds,
        usage.peak_mib,
        files,
    )?;
    println!(
        "{} fit done in {:.1}s; estimates in {}, metadata in {}",
        req.method.as_str(),
        usage.seconds,
        dir.display(),
        meta_path.display()
    );
    Ok(())
}

fn numbered_header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn cmd_simulate(scenario: u8, full: bool, st: &Settings) -> Result<()> {
    let spec = if full {
        ScenarioSpec::published(scenario, st.seed)?
    } else {
        ScenarioSpec::mini(scenario, st.seed)?
    };
    let (ds, truth) = generate_scenario(&spec)?;
    let dir = st
        .out_dir
        .join("simulate")
        .join(format!("scenario{scenario}"))
        .join(st.seed.to_string());
    std::fs::create_dir_all(&dir)?;

    let study_paths: Vec<PathBuf> = (1..=ds.n_studies())
        .map(|s| dir.join(format!("study{s}.csv")))
        .collect();
    save_dataset(&ds, &study_paths)?;
    let mut files: Vec<String> = study_paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    if let Some(covs) = &ds.covariates {
        for (s, x) in covs.iter().enumerate() {
            let name = format!("covariates_s{}.csv", s + 1);
            write_matrix_csv(x, &numbered_header("cov", x.ncols()), &dir.join(&name))?;
            files.push(name);
        }
    }

    let tdir = dir.join("truth");
    std::fs::create_dir_all(&tdir)?;
    write_matrix_csv(
        &truth.phi,
        &numbered_header("factor", truth.phi.ncols()),
        &tdir.join("phi.csv"),
    )?;
    write_matrix_csv(&truth.sigma_phi, &ds.variable_names, &tdir.join("sigma_phi.csv"))?;
    for (s, sig) in truth.sigma_s.iter().enumerate() {
        write_matrix_csv(sig, &ds.variable_names, &tdir.join(format!("sigma_s{}.csv", s + 1)))?;
    }
    if let Some(lams) = &truth.lambda {
        for (s, lam) in lams.iter().enumerate() {
            if lam.ncols() > 0 {
                write_matrix_csv(
                    lam,
                    &numbered_header("factor", lam.ncols()),
                    &tdir.join(format!("lambda_s{}.csv", s + 1)),
                )?;
            }
        }
    }
    if let Some(sls) = &truth.sigma_lambda {
        for (s, sig) in sls.iter().enumerate() {
            write_matrix_csv(
                sig,
                &ds.variable_names,
                &tdir.join(format!("sigma_lambda_s{}.csv", s + 1)),
            )?;
        }
    }
    if let ScenarioExtras::Sharing { t, .. } = &truth.extras {
        let tm = t.matrix();
        let as_f64 = nalgebra::DMatrix::from_fn(tm.nrows(), tm.ncols(), |i, j| tm[(i, j)] as f64);
        write_matrix_csv(
            &as_f64,
            &numbered_header("factor", tm.ncols()),
            &tdir.join("sharing_matrix.csv"),
        )?;
    }
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({
            "command": "simulate",
            "scenario": scenario,
            "seed": st.seed,
            "full_scale": full,
            "n_s": ds.study_sizes(),
            "p": ds.p(),
            "k": truth.k,
            "j_s": truth.j_s,
            "n_covariates": ds.n_covariates(),
            "files": files,
        }),
    )?;
    println!(
        "scenario {scenario} written to {} ({} studies, {} variables)",
        dir.display(),
        ds.n_studies(),
        ds.p()
    );
    Ok(())
}
