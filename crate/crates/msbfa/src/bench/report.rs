//! Scoring fits against planted truth and emitting report artifacts:
//! per-cell JSON records, aggregate CSV tables, loading matrices, and
//! thresholded covariance edge lists for network tools.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{frobenius_distance, mean_over_studies, rv_coefficient};
use crate::bench::scenarios::GroundTruth;
use crate::error::{Error, Result};
use crate::postprocess::FitResult;

/// Similarity of one fit to the planted truth. Quantities a method does
/// not estimate (or whose truth the scenario lacks) are `None` and show
/// up as empty cells, never as zeros.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EvaluationScores {
    pub rv_phi: Option<f64>,
    pub rv_lambda: Option<f64>,
    pub rv_sigma_phi: Option<f64>,
    pub rv_sigma_lambda: Option<f64>,
    pub rv_sigma_marginal: Option<f64>,
    pub fn_sigma_phi: Option<f64>,
    pub fn_sigma_marginal: Option<f64>,
}

/// One benchmark grid cell: scenario x method x replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub scenario: u8,
    pub method: String,
    pub replicate: u64,
    #[serde(flatten)]
    pub scores: EvaluationScores,
    /// Held-out prediction error, when the cell ran a split.
    pub mse: Option<f64>,
    pub k_hat: Option<usize>,
    pub j_hat: Option<Vec<usize>>,
    pub seconds: f64,
    pub peak_mib: Option<f64>,
    /// Set when the cell failed; scores are then absent.
    pub error: Option<String>,
}

fn rv_or_none(x: Option<&DMatrix<f64>>, y: Option<&DMatrix<f64>>) -> Option<f64> {
    match (x, y) {
        (Some(x), Some(y)) => rv_coefficient(x, y).ok(),
        _ => None,
    }
}

/// Score a fit against the truth. Loading RVs compare through the
/// cross-product (rotation-invariant); per-study quantities are averaged
/// over the studies where both sides exist.
pub fn evaluate_fit(fit: &FitResult, truth: &GroundTruth) -> EvaluationScores {
    let s_count = truth.sigma_s.len();
    let rv_phi = rv_or_none(fit.phi.as_ref(), Some(&truth.phi));
    let rv_sigma_phi = rv_or_none(fit.sigma_phi.as_ref(), Some(&truth.sigma_phi));
    let fn_sigma_phi = fit
        .sigma_phi
        .as_ref()
        .and_then(|m| frobenius_distance(m, &truth.sigma_phi).ok());

    let rv_lambda = truth.lambda.as_ref().and_then(|lam_true| {
        let per: Vec<Option<f64>> = (0..s_count)
            .map(|s| {
                let est = fit.lambda.get(s)?;
                if est.ncols() == 0 {
                    return None;
                }
                rv_coefficient(est, lam_true.get(s)?).ok()
            })
            .collect();
        mean_over_studies(&per)
    });
    let rv_sigma_lambda = truth.sigma_lambda.as_ref().and_then(|sl_true| {
        let per: Vec<Option<f64>> = (0..s_count)
            .map(|s| rv_or_none(fit.sigma_lambda.get(s), sl_true.get(s)))
            .collect();
        mean_over_studies(&per)
    });

    let per_marginal: Vec<Option<f64>> = (0..s_count)
        .map(|s| rv_or_none(fit.sigma_marginal.get(s), Some(&truth.sigma_s[s])))
        .collect();
    let rv_sigma_marginal = mean_over_studies(&per_marginal);
    let per_fn: Vec<Option<f64>> = (0..s_count)
        .map(|s| {
            fit.sigma_marginal
                .get(s)
                .and_then(|m| frobenius_distance(m, &truth.sigma_s[s]).ok())
        })
        .collect();
    let fn_sigma_marginal = mean_over_studies(&per_fn);

    EvaluationScores {
        rv_phi,
        rv_lambda,
        rv_sigma_phi,
        rv_sigma_lambda,
        rv_sigma_marginal,
        fn_sigma_phi,
        fn_sigma_marginal,
    }
}

/// Write one cell record as pretty JSON.
pub fn write_cell_json(path: &Path, record: &CellRecord) -> Result<()> {
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| Error::Config(format!("serialize cell record: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::Config(format!("write {}: {e}", path.display())))
}

/// One aggregate table row: mean and SD of a metric over replicates.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub scenario: u8,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// Collapse per-cell records into per-(scenario, method, metric) rows.
/// Failed cells contribute nothing; metric order is fixed so output is
/// deterministic regardless of completion order.
pub fn aggregate_records(records: &[CellRecord]) -> Vec<AggregateRow> {
    let mut keys: Vec<(u8, String)> = Vec::new();
    for r in records {
        let key = (r.scenario, r.method.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let metrics: [(&str, fn(&CellRecord) -> Option<f64>); 10] = [
        ("rv_phi", |r| r.scores.rv_phi),
        ("rv_lambda", |r| r.scores.rv_lambda),
        ("rv_sigma_phi", |r| r.scores.rv_sigma_phi),
        ("rv_sigma_lambda", |r| r.scores.rv_sigma_lambda),
        ("rv_sigma_marginal", |r| r.scores.rv_sigma_marginal),
        ("fn_sigma_phi", |r| r.scores.fn_sigma_phi),
        ("fn_sigma_marginal", |r| r.scores.fn_sigma_marginal),
        ("mse", |r| r.mse),
        ("k_hat", |r| r.k_hat.map(|k| k as f64)),
        ("seconds", |r| Some(r.seconds)),
    ];
    let mut rows = Vec::new();
    for (scenario, method) in keys {
        let cell: Vec<&CellRecord> = records
            .iter()
            .filter(|r| r.scenario == scenario && r.method == method && r.error.is_none())
            .collect();
        for (name, get) in &metrics {
            let values: Vec<f64> = cell.iter().filter_map(|r| get(r)).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(&values);
            rows.push(AggregateRow {
                scenario,
                method: method.clone(),
                metric: (*name).to_string(),
                mean,
                sd,
                n: values.len(),
            });
        }
    }
    rows
}

/// Write aggregate rows as CSV.
pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("open {}: {e}", path.display())))?;
    w.write_record(["scenario", "method", "metric", "mean", "sd", "n"])
        .map_err(|e| Error::Config(format!("write header: {e}")))?;
    for r in rows {
        w.write_record([
            r.scenario.to_string(),
            r.method.clone(),
            r.metric.clone(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.sd),
            r.n.to_string(),
        ])
        .map_err(|e| Error::Config(format!("write row: {e}")))?;
    }
    w.flush().map_err(|e| Error::Config(format!("flush {}: {e}", path.display())))
}

/// Emit the strong off-diagonal entries of a covariance matrix as a
/// (source, target, weight) edge list for network tooling. Returns the
/// edge count.
pub fn write_edge_list(
    path: &Path,
    sigma: &DMatrix<f64>,
    names: &[String],
    threshold: f64,
) -> Result<usize> {
    if sigma.nrows() != sigma.ncols() || sigma.nrows() != names.len() {
        return Err(Error::Dimension(format!(
            "covariance {}x{} with {} names",
            sigma.nrows(),
            sigma.ncols(),
            names.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("open {}: {e}", path.display())))?;
    w.write_record(["source", "target", "weight"])
        .map_err(|e| Error::Config(format!("write header: {e}")))?;
    let mut count = 0;
    for i in 0..sigma.nrows() {
        for j in (i + 1)..sigma.ncols() {
            let weight = sigma[(i, j)];
            if weight.abs() > threshold {
                w.write_record([&names[i], &names[j], &format!("{weight:.6}")])
                    .map_err(|e| Error::Config(format!("write row: {e}")))?;
                count += 1;
            }
        }
    }
    w.flush()
        .map_err(|e| Error::Config(format!("flush {}: {e}", path.display())))?;
    Ok(count)
}
