//! Writing run artifacts: estimate matrices as CSV, metadata and resolved
//! configuration as JSON, and the machine-readable error payload.

use std::path::{Path, PathBuf};

use serde::Serialize;

use msbfa::bench::report::write_edge_list;
use msbfa::data::{write_matrix_csv, MultiStudyDataset, PreprocessReport};
use msbfa::postprocess::FitResult;
use msbfa::{Error, Result};

use crate::config::Settings;
use crate::runner::{MethodRun, SelectionInfo};

/// Everything meta.json records about one fit.
#[derive(Debug, Serialize)]
pub struct Meta {
    pub method: String,
    pub seed: u64,
    pub k_hat: usize,
    pub j_hat: Vec<usize>,
    /// Factor count the method reports (see the runner's conventions).
    pub k_report: usize,
    pub j_report: Vec<usize>,
    pub selection: Option<SelectionInfo>,
    pub draws_used: usize,
    pub alignment: String,
    pub study_names: Vec<String>,
    pub variable_names: Vec<String>,
    pub study_rows: Vec<usize>,
    pub preprocessing: PreprocessMeta,
    pub seconds: f64,
    pub peak_mib: Option<f64>,
    pub warnings: Vec<String>,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct PreprocessMeta {
    pub center: bool,
    pub scale: bool,
    pub log_offset: Option<f64>,
    /// (study, variable) pairs that could not be scaled.
    pub constant_columns: Vec<(usize, usize)>,
}

impl PreprocessMeta {
    pub fn new(st: &Settings, report: &PreprocessReport) -> Self {
        PreprocessMeta {
            center: st.center,
            scale: st.scale,
            log_offset: st.log_offset,
            constant_columns: report.constant_columns.clone(),
        }
    }
}

fn factor_header(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("factor_{i}")).collect()
}

/// Write every matrix a fit provides (skipping absent/empty ones), plus
/// the thresholded edge list of the shared covariance. Returns the file
/// names written, relative to `dir`.
pub fn write_fit_matrices(
    dir: &Path,
    fit: &FitResult,
    ds: &MultiStudyDataset,
    edge_threshold: f64,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let vars = ds.variable_names.clone();
    let p = ds.p();
    let s_count = ds.n_studies();

    if let Some(phi) = &fit.phi {
        if phi.ncols() > 0 {
            write_matrix_csv(phi, &factor_header(phi.ncols()), &dir.join("phi.csv"))?;
            files.push("phi.csv".into());
        }
    }
    for (s, lam) in fit.lambda.iter().enumerate() {
        if lam.ncols() > 0 {
            let name = format!("lambda_s{}.csv", s + 1);
            write_matrix_csv(lam, &factor_header(lam.ncols()), &dir.join(&name))?;
            files.push(name);
        }
    }
    if !fit.psi.is_empty() {
        let mut psi = nalgebra::DMatrix::zeros(p, fit.psi.len());
        for (s, col) in fit.psi.iter().enumerate() {
            psi.column_mut(s).copy_from(col);
        }
        let header: Vec<String> = if fit.psi.len() == s_count {
            ds.study_names.clone()
        } else {
            (1..=fit.psi.len()).map(|i| format!("block_{i}")).collect()
        };
        write_matrix_csv(&psi, &header, &dir.join("psi.csv"))?;
        files.push("psi.csv".into());
    }
    if let Some(sigma) = &fit.sigma_phi {
        write_matrix_csv(sigma, &vars, &dir.join("sigma_phi.csv"))?;
        files.push("sigma_phi.csv".into());
        write_edge_list(&dir.join("sigma_phi_edges.csv"), sigma, &vars, edge_threshold)?;
        files.push("sigma_phi_edges.csv".into());
    }
    for (s, sig) in fit.sigma_lambda.iter().enumerate() {
        let name = format!("sigma_lambda_s{}.csv", s + 1);
        write_matrix_csv(sig, &vars, &dir.join(&name))?;
        files.push(name);
    }
    for (s, sig) in fit.sigma_marginal.iter().enumerate() {
        let name = format!("sigma_marginal_s{}.csv", s + 1);
        write_matrix_csv(sig, &vars, &dir.join(&name))?;
        files.push(name);
    }
    Ok(files)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Assemble and write meta.json; returns the path for reporting.
#[allow(clippy::too_many_arguments)]
pub fn write_meta(
    dir: &Path,
    run: &MethodRun,
    ds: &MultiStudyDataset,
    preprocessing: PreprocessMeta,
    seed: u64,
    seconds: f64,
    peak_mib: Option<f64>,
    files: Vec<String>,
) -> Result<PathBuf> {
    let meta = Meta {
        method: run.fit.method.as_str().to_string(),
        seed,
        k_hat: run.fit.k_hat,
        j_hat: run.fit.j_hat.clone(),
        k_report: run.k_report,
        j_report: run.j_report.clone(),
        selection: run.selection.clone(),
        draws_used: run.fit.provenance.draws_used,
        alignment: run.fit.provenance.alignment.clone(),
        study_names: ds.study_names.clone(),
        variable_names: ds.variable_names.clone(),
        study_rows: ds.study_sizes(),
        preprocessing,
        seconds,
        peak_mib,
        warnings: run.warnings.clone(),
        files,
    };
    let path = dir.join("meta.json");
    write_json(&path, &meta)?;
    Ok(path)
}

/// The JSON payload printed to stderr when a command fails.
#[derive(Debug, Serialize)]
pub struct ErrorPayload {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: i32,
}

pub fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Schema(_) => "schema",
        Error::Parse { .. } => "parse",
        Error::MissingValue { .. } => "missing_value",
        Error::Dimension(_) => "dimension",
        Error::Config(_) => "config",
        Error::Numeric(_) => "numeric",
        Error::Divergence(_) => "divergence",
        Error::Truncation(_) => "truncation",
        Error::Guard(_) => "guard",
        Error::Checkpoint(_) => "checkpoint",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
    }
}

pub fn error_payload(err: &Error) -> ErrorPayload {
    ErrorPayload {
        kind: error_kind(err),
        message: err.to_string(),
        exit_code: err.exit_code(),
    }
}
