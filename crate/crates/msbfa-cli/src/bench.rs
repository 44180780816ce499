//! The benchmark grid: scenario x method x replicate cells run on a
//! bounded worker pool, each cell scored against its generative truth and
//! written out individually; failures are recorded, never fatal.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use msbfa::bench::metrics::prediction_mse;
use msbfa::bench::profile::profile;
use msbfa::bench::report::{
    aggregate_records, evaluate_fit, write_aggregate_csv, write_cell_json, CellRecord,
    EvaluationScores,
};
use msbfa::bench::scenarios::{generate_scenario, split_train_test, ScenarioSpec};
use msbfa::data::{preprocess, PreprocessSpec};
use msbfa::postprocess::Method;
use msbfa::{Error, Result};

use crate::config::Settings;
use crate::output::{write_fit_matrices, write_json};
use crate::runner::{plan_for_truth, run_method};

/// Resolved grid request.
#[derive(Debug, Clone, Serialize)]
pub struct BenchPlan {
    pub scenarios: Vec<u8>,
    pub methods: Vec<String>,
    pub reps: usize,
    pub overspecified: bool,
    pub full: bool,
    pub split: Option<f64>,
    pub base_seed: u64,
}

#[derive(Debug, Serialize)]
struct CellStatus {
    scenario: u8,
    method: String,
    seed: u64,
    ok: bool,
    error: Option<String>,
    dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct BenchReport<'a> {
    plan: &'a BenchPlan,
    nrun: usize,
    burn: usize,
    thin: usize,
    completed: usize,
    failed: usize,
    cells: Vec<CellStatus>,
    /// Process-wide resident-memory high water, not per cell.
    peak_note: &'static str,
}

/// Worker count: the environment variable wins, then the config key,
/// then the library default.
pub fn build_pool(st: &Settings) -> Result<rayon::ThreadPool> {
    let n = match std::env::var("MSBFA_WORKERS") {
        Ok(v) => Some(v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("MSBFA_WORKERS must be a positive integer, got {v:?}"))
        })?),
        Err(_) => st.workers,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = n {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

pub fn cmd_bench(plan: &BenchPlan, st: &Settings) -> Result<()> {
    for &sc in &plan.scenarios {
        if !(1..=5).contains(&sc) {
            return Err(Error::Config(format!("scenario {sc} outside 1..=5")));
        }
    }
    if plan.scenarios.is_empty() || plan.methods.is_empty() {
        return Err(Error::Config("empty scenario or method list".into()));
    }
    if plan.reps == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    if let Some(f) = plan.split {
        if !(0.0 < f && f < 1.0) {
            return Err(Error::Config(format!("split fraction {f} outside (0,1)")));
        }
    }
    let methods: Vec<Method> = plan
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for &sc in &plan.scenarios {
        for &m in &methods {
            for rep in 0..plan.reps {
                cells.push((sc, m, plan.base_seed + rep as u64));
            }
        }
    }

    let pool = build_pool(st)?;
    let records: Vec<CellRecord> =
        pool.install(|| cells.par_iter().map(|&(sc, m, seed)| run_cell(sc, m, seed, plan, st)).collect());

    let statuses: Vec<CellStatus> = records
        .iter()
        .map(|r| CellStatus {
            scenario: r.scenario,
            method: r.method.clone(),
            seed: r.replicate,
            ok: r.error.is_none(),
            error: r.error.clone(),
            dir: cell_dir(st, &r.method, r.scenario, r.replicate),
        })
        .collect();
    let failed = statuses.iter().filter(|s| !s.ok).count();

    let rows = aggregate_records(&records);
    std::fs::create_dir_all(&st.out_dir)?;
    let agg_path = st.out_dir.join("aggregate.csv");
    write_aggregate_csv(&agg_path, &rows)?;
    let report = BenchReport {
        plan,
        nrun: st.nrun,
        burn: st.burn,
        thin: st.thin,
        completed: records.len() - failed,
        failed,
        cells: statuses,
        peak_note: "peak_mib is the process high-water mark, shared across parallel cells",
    };
    let report_path = st.out_dir.join("bench_report.json");
    write_json(&report_path, &report)?;

    for r in &records {
        match &r.error {
            None => println!(
                "scenario {} {} seed {}: done in {:.1}s",
                r.scenario, r.method, r.replicate, r.seconds
            ),
            Some(e) => println!(
                "scenario {} {} seed {}: FAILED ({e})",
                r.scenario, r.method, r.replicate
            ),
        }
    }
    println!(
        "{} cells completed, {} failed; aggregate at {}, report at {}",
        records.len() - failed,
        failed,
        agg_path.display(),
        report_path.display()
    );
    Ok(())
}

fn cell_dir(st: &Settings, method: &str, scenario: u8, seed: u64) -> PathBuf {
    st.out_dir
        .join(method)
        .join(format!("scenario{scenario}"))
        .join(seed.to_string())
}

/// Run one cell end to end; any error becomes a recorded failure.
fn run_cell(scenario: u8, method: Method, seed: u64, plan: &BenchPlan, st: &Settings) -> CellRecord {
    let dir = cell_dir(st, method.as_str(), scenario, seed);
    let mut record = CellRecord {
        scenario,
        method: method.as_str().to_string(),
        replicate: seed,
        scores: EvaluationScores::default(),
        mse: None,
        k_hat: None,
        j_hat: None,
        seconds: 0.0,
        peak_mib: None,
        error: None,
    };
    match run_cell_inner(scenario, method, seed, plan, st, &dir, &mut record) {
        Ok(()) => {}
        Err(e) => record.error = Some(e.to_string()),
    }
    if std::fs::create_dir_all(&dir).is_ok() {
        // Cell artifacts are best-effort on the failure path; the record
        // itself still reaches the aggregate through the return value.
        let _ = write_cell_json(&dir.join("cell.json"), &record);
    }
    record
}

fn run_cell_inner(
    scenario: u8,
    method: Method,
    seed: u64,
    plan: &BenchPlan,
    st: &Settings,
    dir: &std::path::Path,
    record: &mut CellRecord,
) -> Result<()> {
    let spec = if plan.full {
        ScenarioSpec::published(scenario, seed)?
    } else {
        ScenarioSpec::mini(scenario, seed)?
    };
    let (ds, truth) = generate_scenario(&spec)?;
    let method_plan = plan_for_truth(method, scenario, &truth, plan.overspecified);

    let (train, test) = match plan.split {
        Some(f) => {
            let (tr, te) = split_train_test(&ds, f, seed)?;
            (tr, Some(te))
        }
        None => (ds, None),
    };
    let (pre, _) = preprocess(&train, PreprocessSpec::center())?;

    let (outcome, usage) = profile(|| run_method(method, &pre, &method_plan, st, seed));
    record.seconds = usage.seconds;
    record.peak_mib = usage.peak_mib;
    let run = outcome?;

    record.scores = evaluate_fit(&run.fit, &truth);
    record.k_hat = Some(run.k_report);
    record.j_hat = if run.j_report.is_empty() {
        None
    } else {
        Some(run.j_report.clone())
    };
    if let Some(test) = test {
        let (test_centered, _) = preprocess(&test, PreprocessSpec::center())?;
        record.mse = Some(prediction_mse(&run.fit, &test_centered)?.mse);
    }
    write_fit_matrices(dir, &run.fit, &pre, st.edge_threshold)?;
    Ok(())
}
