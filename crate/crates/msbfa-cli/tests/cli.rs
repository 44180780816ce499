//! End-to-end tests of the msbfa binary: process spawn, exit codes,
//! emitted files, and the machine-readable error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;

use msbfa::data::{load_dataset, save_dataset, MultiStudyDataset};
use msbfa::rng::seeded_rng;

fn msbfa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msbfa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().find(|l| l.starts_with('{')).unwrap_or_else(|| {
        panic!("no JSON line on stderr, got: {text}");
    });
    serde_json::from_str(line).expect("stderr JSON parses")
}

/// Two small studies driven by one planted factor.
fn write_toy_studies(dir: &Path, p: usize) -> Vec<PathBuf> {
    let mut rng = seeded_rng(99);
    use rand::Rng;
    let mut studies = Vec::new();
    for _ in 0..2 {
        let n = 40;
        let mut y = DMatrix::zeros(n, p);
        for i in 0..n {
            let f: f64 = rng.gen_range(-2.0..2.0);
            for j in 0..p {
                let load = if j % 2 == 0 { 0.9 } else { -0.7 };
                y[(i, j)] = load * f + 0.3 * rng.gen_range(-1.0..1.0);
            }
        }
        studies.push(y);
    }
    let ds = MultiStudyDataset::from_matrices(studies).unwrap();
    let paths: Vec<PathBuf> = (1..=2).map(|s| dir.join(format!("toy{s}.csv"))).collect();
    save_dataset(&ds, &paths).unwrap();
    paths
}

#[test]
fn simulate_is_deterministic_and_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for out in ["a", "b"] {
        let res = msbfa(
            &[
                "simulate",
                "--scenario",
                "1",
                "--seed",
                "7",
                "--out-dir",
                out,
            ],
            dir,
        );
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let run_a = dir.join("a/simulate/scenario1/7");
    let run_b = dir.join("b/simulate/scenario1/7");
    for name in ["study1.csv", "study4.csv", "truth/sigma_phi.csv", "manifest.json"] {
        let a = std::fs::read(run_a.join(name)).unwrap();
        let b = std::fs::read(run_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical seeds");
    }

    let paths: Vec<PathBuf> = (1..=4).map(|s| run_a.join(format!("study{s}.csv"))).collect();
    let ds = load_dataset(&paths, None).unwrap();
    assert_eq!(ds.n_studies(), 4);
    assert_eq!(ds.p(), 40);
    assert_eq!(ds.study_sizes(), vec![100; 4]);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_a.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["scenario"], 1);
    assert_eq!(manifest["k"], 4);
}

#[test]
fn fit_writes_estimates_and_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let paths = write_toy_studies(dir, 6);
    let res = msbfa(
        &[
            "fit",
            "--method",
            "stackfa",
            "--data",
            paths[0].to_str().unwrap(),
            "--data",
            paths[1].to_str().unwrap(),
            "--k",
            "2",
            "--nrun",
            "300",
            "--burn",
            "150",
            "--seed",
            "3",
            "--no-refit",
            "--out-dir",
            "runs",
        ],
        dir,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let run_dir = dir.join("runs/stackfa/data/3");
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["method"], "stackfa");
    assert_eq!(meta["k_hat"], 2);
    assert_eq!(meta["draws_used"], 150);
    for file in meta["files"].as_array().unwrap() {
        assert!(
            run_dir.join(file.as_str().unwrap()).exists(),
            "listed file {file} missing"
        );
    }
    let phi = std::fs::read_to_string(run_dir.join("phi.csv")).unwrap();
    assert!(phi.starts_with("factor_1,factor_2"));
    assert_eq!(phi.lines().count(), 7, "header + one row per variable");
    assert!(run_dir.join("config.json").exists());
    assert!(run_dir.join("sigma_phi_edges.csv").exists());
}

#[test]
fn config_file_is_honored_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let paths = write_toy_studies(dir, 6);
    std::fs::write(
        dir.join("cfg.toml"),
        "nrun = 200\nburn = 100\n[stackfa]\nk = 2\n",
    )
    .unwrap();
    let res = msbfa(
        &[
            "fit",
            "--method",
            "stackfa",
            "--data",
            paths[0].to_str().unwrap(),
            "--data",
            paths[1].to_str().unwrap(),
            "--config",
            "cfg.toml",
            "--nrun",
            "240",
            "--seed",
            "5",
            "--no-refit",
            "--out-dir",
            "runs",
        ],
        dir,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("runs/stackfa/data/5/meta.json")).unwrap(),
    )
    .unwrap();
    // K came from the file; nrun came from the flag (240 - 100 kept).
    assert_eq!(meta["k_hat"], 2);
    assert_eq!(meta["draws_used"], 140);
}

#[test]
fn guard_refusals_exit_4_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let wide = MultiStudyDataset::from_matrices(vec![
        DMatrix::from_fn(8, 520, |i, j| ((i * 31 + j * 7) % 13) as f64 - 6.0),
        DMatrix::from_fn(9, 520, |i, j| ((i * 17 + j * 11) % 13) as f64 - 6.0),
    ])
    .unwrap();
    let paths = vec![dir.join("w1.csv"), dir.join("w2.csv")];
    save_dataset(&wide, &paths).unwrap();
    let res = msbfa(
        &[
            "fit",
            "--method",
            "pfa",
            "--data",
            paths[0].to_str().unwrap(),
            "--data",
            paths[1].to_str().unwrap(),
            "--k",
            "2",
            "--nrun",
            "50",
            "--burn",
            "20",
            "--out-dir",
            "runs",
        ],
        dir,
    );
    assert_eq!(res.status.code(), Some(4));
    let err = stderr_json(&res);
    assert_eq!(err["error"]["kind"], "guard");
    assert_eq!(err["error"]["exit_code"], 4);
    assert!(err["error"]["message"]
        .as_str()
        .unwrap()
        .contains("override"));
}

#[test]
fn bad_inputs_exit_2_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let res = msbfa(
        &["fit", "--method", "varimaxnet", "--data", "x.csv"],
        dir,
    );
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_json(&res)["error"]["kind"], "config");

    std::fs::write(dir.join("bad.toml"), "nruns = 5").unwrap();
    let res = msbfa(
        &[
            "simulate",
            "--scenario",
            "1",
            "--config",
            "bad.toml",
        ],
        dir,
    );
    assert_eq!(res.status.code(), Some(2));
    let err = stderr_json(&res);
    assert_eq!(err["error"]["kind"], "config");
    assert!(err["error"]["message"].as_str().unwrap().contains("nruns"));
}

#[test]
fn bench_grid_records_cells_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let res = msbfa(
        &[
            "bench",
            "--scenarios",
            "1",
            "--methods",
            "momss",
            "--reps",
            "2",
            "--seed",
            "11",
            "--out-dir",
            "grid",
        ],
        dir,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for seed in [11, 12] {
        let cell: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(
                dir.join(format!("grid/momss/scenario1/{seed}/cell.json")),
            )
            .unwrap(),
        )
        .unwrap();
        assert!(cell["error"].is_null());
        assert!(cell["rv_sigma_marginal"].as_f64().unwrap() > 0.0);
        assert!(dir
            .join(format!("grid/momss/scenario1/{seed}/phi.csv"))
            .exists());
    }
    let agg = std::fs::read_to_string(dir.join("grid/aggregate.csv")).unwrap();
    assert!(agg.starts_with("scenario,method,metric,mean,sd,n"));
    let rv_line = agg
        .lines()
        .find(|l| l.contains("momss") && l.contains("rv_sigma_marginal"))
        .expect("aggregate has the marginal RV row");
    assert!(rv_line.ends_with(",2"), "two replicates aggregated: {rv_line}");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("grid/bench_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["completed"], 2);
    assert_eq!(report["failed"], 0);
}

#[test]
fn bench_records_guard_failures_without_aborting() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let res = msbfa(
        &[
            "bench",
            "--scenarios",
            "5",
            "--methods",
            "pfa",
            "--reps",
            "1",
            "--full",
            "--seed",
            "3",
            "--nrun",
            "50",
            "--burn",
            "20",
            "--out-dir",
            "grid",
        ],
        dir,
    );
    // The grid itself succeeds; the refusal is recorded in the report.
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("grid/bench_report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["failed"], 1);
    let cell = &report["cells"][0];
    assert_eq!(cell["ok"], false);
    assert!(cell["error"].as_str().unwrap().contains("guard"));
    let cell_json: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("grid/pfa/scenario5/3/cell.json")).unwrap(),
    )
    .unwrap();
    assert!(cell_json["error"].as_str().unwrap().contains("1060"));
}
